//! Step-by-step f64 recurrence for the selective scan and the grid it is
//! checked over.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimd::{Graph, Tensor, SCAN_EXP_CLAMP};

pub const SEQ_LENS: [usize; 5] = [1, 2, 7, 33, 64];
pub const CHANNELS: [usize; 3] = [1, 3, 8];
pub const STATES: [usize; 4] = [1, 4, 9, 16];
pub const TOLERANCE: f64 = 1e-5;

pub fn uniform(dims: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn scan_reference(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Vec<f64> {
    let (t_len, e) = (u.dims()[0], u.dims()[1]);
    let s = a.dims()[1];
    let lim = f64::from(SCAN_EXP_CLAMP);
    let mut y = vec![0.0; t_len * e];
    for ch in 0..e {
        let mut h = vec![0.0f64; s];
        for t in 0..t_len {
            let ut = f64::from(u.at(&[t, ch]));
            let dt = f64::from(delta.at(&[t, ch]));
            let mut acc = 0.0;
            for (n, hn) in h.iter_mut().enumerate() {
                let decay = (dt * f64::from(a.at(&[ch, n]))).clamp(-lim, lim).exp();
                *hn = decay * *hn + dt * f64::from(b.at(&[t, n])) * ut;
                acc += f64::from(c.at(&[t, n])) * *hn;
            }
            y[t * e + ch] = acc + f64::from(d.at(&[ch])) * ut;
        }
    }
    y
}

/// Largest absolute deviation of the scan from the reference on one
/// random problem.
pub fn scan_case(t_len: usize, e: usize, s: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform(&[t_len, e], -2.0, 2.0, &mut rng);
    let delta = uniform(&[t_len, e], 1e-3, 2.0, &mut rng);
    let a = uniform(&[e, s], -16.0, -0.01, &mut rng);
    let b = uniform(&[t_len, s], -1.0, 1.0, &mut rng);
    let c = uniform(&[t_len, s], -1.0, 1.0, &mut rng);
    let d = uniform(&[e], -1.0, 1.0, &mut rng);
    let want = scan_reference(&u, &delta, &a, &b, &c, &d);

    let mut g = Graph::new();
    let vars: Vec<_> = [&u, &delta, &a, &b, &c, &d].iter().map(|t| g.constant((*t).clone())).collect();
    let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
    assert_eq!(g.value(y).dims(), [t_len, e]);
    g.value(y)
        .data()
        .iter()
        .zip(&want)
        .map(|(&got, &w)| (f64::from(got) - w).abs())
        .fold(0.0, f64::max)
}

/// Worst error over the whole grid for `seeds` seeds, with the first
/// offending case if any exceeds the tolerance.
pub fn grid_worst(seeds: u64) -> (f64, Option<String>) {
    let mut worst: f64 = 0.0;
    let mut first_bad = None;
    for seed in 0..seeds {
        for t in SEQ_LENS {
            for e in CHANNELS {
                for s in STATES {
                    let err = scan_case(t, e, s, seed * 1000 + (t * 100 + e * 10 + s) as u64);
                    if err > TOLERANCE && first_bad.is_none() {
                        first_bad = Some(format!("T={t} E={e} S={s} seed {seed}: error {err:e}"));
                    }
                    worst = worst.max(err);
                }
            }
        }
    }
    (worst, first_bad)
}
