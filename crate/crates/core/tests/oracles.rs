//! Kernels against straightforward f64 reference implementations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vimd::sr::bicubic_resize;
use vimd::{Graph, Tensor, SCAN_EXP_CLAMP};

#[path = "support/scan_oracle.rs"]
mod scan_oracle;

use scan_oracle::{grid_worst, uniform};

#[test]
fn selective_scan_matches_recurrence_over_grid() {
    let start = Instant::now();
    let (worst, first_bad) = grid_worst(20);
    assert!(first_bad.is_none(), "{}", first_bad.unwrap_or_default());
    assert!(start.elapsed().as_secs_f64() < 10.0);
    eprintln!("max scan error {worst:e}");
}

#[test]
fn saturated_decay_is_clamped() {
    // dt·a far below the clamp must behave exactly like the clamp value
    let mut g = Graph::new();
    let u = g.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
    let delta = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let a = g.constant(Tensor::new(&[1, 1], vec![-1000.0]).unwrap());
    let b = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let c = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let d = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let y = g.selective_scan(u, delta, a, b, c, d).unwrap();
    let y = g.value(y).data();
    assert_eq!(y[0], 1.0);
    let expected = (-f64::from(SCAN_EXP_CLAMP)).exp();
    assert!((f64::from(y[1]) - expected).abs() <= expected * 1e-3);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (17, 33, 9), (64, 65, 128)] {
        let a = uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = uniform(&[k, n], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.matmul(va, vb).unwrap();
        let out = g.value(out);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| f64::from(a.at(&[i, p])) * f64::from(b.at(&[p, j]))).sum();
                assert!((f64::from(out.at(&[i, j])) - want).abs() < 1e-4, "({m},{k},{n}) at ({i},{j})");
            }
        }
    }
}

#[test]
fn conv2d_matches_direct_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(c, h, w, d, k, stride, pad) in &[
        (1, 5, 5, 1, 3, 1, 0),
        (3, 8, 8, 4, 3, 1, 1),
        (3, 16, 16, 6, 8, 8, 0),
        (2, 9, 7, 3, 3, 2, 1),
    ] {
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let kw = uniform(&[d, c, k, k], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(kw.clone()));
        let out = g.conv2d(vx, vw, stride, pad).unwrap();
        let out = g.value(out);
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(out.dims(), [d, ho, wo]);
        for o in 0..d {
            for i in 0..ho {
                for j in 0..wo {
                    let mut want = 0.0f64;
                    for ci in 0..c {
                        for p in 0..k {
                            for q in 0..k {
                                let (y, x_) = ((i * stride + p) as i64 - pad as i64, (j * stride + q) as i64 - pad as i64);
                                if y < 0 || x_ < 0 || y >= h as i64 || x_ >= w as i64 {
                                    continue;
                                }
                                want += f64::from(x.at(&[ci, y as usize, x_ as usize])) * f64::from(kw.at(&[o, ci, p, q]));
                            }
                        }
                    }
                    assert!((f64::from(out.at(&[o, i, j])) - want).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn dwconv_causal_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t_len, e, k) = (9, 3, 4);
    let x = uniform(&[t_len, e], -1.0, 1.0, &mut rng);
    let w = uniform(&[e, k], -1.0, 1.0, &mut rng);
    let b = uniform(&[e], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let out = g.dwconv_causal(vx, vw, vb).unwrap();
    let out = g.value(out);
    for t in 0..t_len {
        for ch in 0..e {
            // tap K−1 multiplies the current token
            let want: f64 = f64::from(b.at(&[ch]))
                + (0..k)
                    .filter(|&j| t + j + 1 >= k)
                    .map(|j| f64::from(w.at(&[ch, j])) * f64::from(x.at(&[t + j + 1 - k, ch])))
                    .sum::<f64>();
            assert!((f64::from(out.at(&[t, ch])) - want).abs() < 1e-5, "t={t} ch={ch}");
        }
    }
}

fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 2-D evaluation: half-pixel centers, replicated borders, kernel
/// widened by the scale factor when shrinking, weights normalized to one.
fn bicubic_reference(img: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let axis = |n_in: usize, i: usize, n_out: usize| -> Vec<(usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        let stretch = scale.max(1.0);
        let center = (i as f64 + 0.5) * scale;
        let r = (2.0 * stretch).ceil() as i64 + 1;
        let base = center.floor() as i64;
        let taps: Vec<(usize, f64)> = (base - r..=base + r)
            .map(|j| {
                let wgt = catmull_rom((j as f64 + 0.5 - center) / stretch);
                (j.clamp(0, n_in as i64 - 1) as usize, wgt)
            })
            .collect();
        let total: f64 = taps.iter().map(|t| t.1).sum();
        taps.into_iter().map(|(j, wgt)| (j, wgt / total)).collect()
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let ty = axis(h, i, oh);
            for j in 0..ow {
                let tx = axis(w, j, ow);
                let mut v = 0.0;
                for &(y, wy) in &ty {
                    for &(x, wx) in &tx {
                        v += wy * wx * f64::from(img.at(&[ch, y, x]));
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

#[test]
fn bicubic_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(h, w, oh, ow) in &[(16, 16, 64, 64), (64, 64, 16, 16), (7, 5, 13, 3), (224, 224, 56, 56)] {
        let img = uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let got = bicubic_resize(&img, oh, ow).unwrap();
        let want = bicubic_reference(&img, oh, ow);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(&g, &w)| (f64::from(g) - w).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{h}×{w} → {oh}×{ow}: {worst:e}");
    }
}

#[test]
fn bicubic_preserves_constants_and_identity_size() {
    let img = Tensor::full(&[3, 10, 6], 0.375);
    for &(oh, ow) in &[(40, 24), (3, 2), (10, 6)] {
        let out = bicubic_resize(&img, oh, ow).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-6));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = uniform(&[1, 9, 9], 0.0, 1.0, &mut rng);
    let same = bicubic_resize(&img, 9, 9).unwrap();
    assert!(same.max_abs_diff(&img) < 1e-6);
}
