//! The finite-difference suite run by `vimd gradcheck` and the test suite:
//! every graph primitive on random inputs, the three losses, and the full
//! student objective of a one-layer model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{graph_hsd, graph_ld, sample_loss, DistillConfig, TeacherTargets};
use crate::error::Result;
use crate::gradcheck::grad_check_inputs;
use crate::graph::{Graph, Var};
use crate::network::{HiddenStates, VimConfig, VimNet};
use crate::tensor::Tensor;

/// Threshold for single primitives and the individual losses.
pub const PRIMITIVE_TOL: f32 = 1e-3;
/// Threshold for the full student objective.
pub const FULL_LOSS_TOL: f32 = 5e-3;

const STEP: f32 = 5e-3;
/// The full objective has large curvature along the class token, so it needs a finer step.
const FULL_LOSS_STEP: f32 = 1e-3;
/// Parameter coordinates probed in the full-loss check.
const FULL_LOSS_COORDS: usize = 400;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f32,
    pub threshold: f32,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

/// The small model of the full-loss check: D=8, one layer, two classes, 32².
pub fn tiny_config() -> VimConfig {
    VimConfig {
        embed_dim: 8,
        depth: 1,
        num_classes: 2,
        input_side: 32,
        ..VimConfig::toy()
    }
}

fn u(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(dims, 1.0, rng)
}

/// Uniform values in `[lo, hi]`.
fn range(dims: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    Tensor::new(dims, v).expect("dims match")
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let dims = g.value(out).dims().to_vec();
    let w = Tensor::uniform(&dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let ps = rng.random::<u64>();
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {
            cases.push((
                $name,
                vec![$($t),*],
                Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let out = $body?;
                    project($g, out, ps)
                }),
            ))
        };
    }
    case!("matmul", [u(&[3, 4], rng), u(&[4, 5], rng)], |g, v| g.matmul(v[0], v[1]));
    case!("add", [u(&[3, 4], rng), u(&[3, 4], rng)], |g, v| g.add(v[0], v[1]));
    case!("sub", [u(&[3, 4], rng), u(&[3, 4], rng)], |g, v| g.sub(v[0], v[1]));
    case!("mul", [u(&[3, 4], rng), u(&[3, 4], rng)], |g, v| g.mul(v[0], v[1]));
    case!("add_bias", [u(&[3, 4], rng), u(&[4], rng)], |g, v| g.add_bias(v[0], v[1]));
    case!("scale", [u(&[3, 4], rng)], |g, v| Ok::<_, crate::Error>(g.scale(v[0], -1.7)));
    case!("silu", [u(&[3, 4], rng)], |g, v| Ok::<_, crate::Error>(g.silu(v[0])));
    case!("softplus", [u(&[3, 4], rng)], |g, v| Ok::<_, crate::Error>(g.softplus(v[0])));
    case!("exp", [u(&[3, 4], rng)], |g, v| Ok::<_, crate::Error>(g.exp(v[0])));
    // values kept a few steps away from the clamp bounds at ±0.5
    case!("clamp", [{
        let t = u(&[3, 4], rng);
        let v = t.data().iter().map(|&x| if (x.abs() - 0.5).abs() < 0.05 { x * 0.5 } else { x }).collect();
        Tensor::new(&[3, 4], v).expect("dims")
    }], |g, v| Ok::<_, crate::Error>(g.clamp(v[0], -0.5, 0.5)));
    case!("sum", [u(&[3, 4], rng)], |g, v| {
        let s = g.sum(v[0]);
        g.reshape(s, &[1])
    });
    case!("mean", [u(&[3, 4], rng)], |g, v| {
        let s = g.mean(v[0]);
        g.reshape(s, &[1])
    });
    case!("pick", [u(&[6], rng)], |g, v| {
        let s = g.pick(v[0], 4)?;
        g.reshape(s, &[1])
    });
    case!("reshape", [u(&[3, 4], rng)], |g, v| g.reshape(v[0], &[2, 6]));
    case!("transpose", [u(&[3, 4], rng)], |g, v| g.transpose(v[0]));
    case!("reverse_rows", [u(&[5, 3], rng)], |g, v| g.reverse_rows(v[0]));
    case!("concat_rows", [u(&[2, 3], rng), u(&[4, 3], rng)], |g, v| g.concat_rows(&[v[0], v[1]]));
    case!("slice_rows", [u(&[5, 3], rng)], |g, v| g.slice_rows(v[0], 1, 3));
    case!("slice_cols", [u(&[3, 5], rng)], |g, v| g.slice_cols(v[0], 2, 2));
    case!("conv2d", [u(&[2, 6, 6], rng), u(&[3, 2, 3, 3], rng)], |g, v| g.conv2d(v[0], v[1], 2, 1));
    case!("channel_bias", [u(&[2, 3, 3], rng), u(&[2], rng)], |g, v| g.channel_bias(v[0], v[1]));
    case!("channel_scale", [u(&[2, 3, 3], rng), u(&[2], rng)], |g, v| g.channel_scale(v[0], v[1]));
    case!("pixel_shuffle", [u(&[8, 2, 3], rng)], |g, v| g.pixel_shuffle(v[0], 2));
    case!("rms_norm", [u(&[3, 6], rng), u(&[6], rng)], |g, v| g.rms_norm(v[0], v[1]));
    case!("dwconv_causal", [u(&[5, 3], rng), u(&[3, 4], rng), u(&[3], rng)], |g, v| {
        g.dwconv_causal(v[0], v[1], v[2])
    });
    case!(
        "selective_scan",
        [
            u(&[6, 3], rng),
            range(&[6, 3], 0.05, 1.0, rng),
            range(&[3, 4], -1.5, -0.1, rng),
            u(&[6, 4], rng),
            u(&[6, 4], rng),
            u(&[3], rng)
        ],
        |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
    );
    case!("log_softmax", [u(&[2, 5], rng)], |g, v| g.log_softmax(v[0], 2.0));
    case!("softmax", [u(&[2, 5], rng)], |g, v| g.softmax(v[0], 2.0));
    for (name, student_first) in [("kl_div_student_first", true), ("kl_div_teacher_first", false)] {
        let teacher = u(&[5], rng);
        cases.push((
            name,
            vec![u(&[5], rng)],
            Box::new(move |g: &mut Graph, v: &[Var]| g.kl_div(v[0], &teacher, 4.0, student_first)),
        ));
    }
    cases
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let teacher_logits = u(&[5], rng);
    let teacher_hidden = HiddenStates {
        layers: (0..3).map(|_| u(&[4, 6], rng)).collect(),
    };
    let label = rng.random_range(0..5);
    vec![
        (
            "loss_ce",
            vec![u(&[5], rng)],
            Box::new(move |g: &mut Graph, v: &[Var]| crate::distill::graph_ce(g, v[0], label)),
        ),
        (
            "loss_ld",
            vec![u(&[5], rng)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                graph_ld(g, v[0], &teacher_logits, &DistillConfig::default())
            }),
        ),
        (
            "loss_hsd",
            (0..3).map(|_| u(&[4, 6], rng)).collect(),
            Box::new(move |g: &mut Graph, v: &[Var]| graph_hsd(g, v, &teacher_hidden)),
        ),
    ]
}

/// Gradient of the full student objective (CE + α·(LD + β·HSD)) with respect
/// to a random sample of the student's parameters.
pub fn full_loss_error(seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf011_1055);
    let cfg = tiny_config();
    let student = VimNet::new(cfg.clone(), &mut rng)?;
    let teacher = VimNet::new(cfg.clone(), &mut rng)?;
    let side = cfg.input_side;
    let image = Tensor::uniform(&[cfg.in_channels, side, side], 1.0, &mut rng);
    let hr = Tensor::uniform(&[cfg.in_channels, side, side], 1.0, &mut rng);
    let (hidden, logits) = teacher.infer(&hr)?;
    let targets = TeacherTargets { logits, hidden };
    let label = rng.random_range(0..cfg.num_classes);
    let dcfg = DistillConfig::default();

    let inputs = student.params.tensors().to_vec();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picked = sample(&mut rng, total, FULL_LOSS_COORDS.min(total)).into_vec();
    let mut coords = vec![Vec::new(); inputs.len()];
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut acc = 0;
    for t in &inputs {
        offsets.push(acc);
        acc += t.numel();
    }
    for flat in picked {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        coords[k].push(flat - offsets[k]);
    }
    for c in &mut coords {
        c.sort_unstable();
    }

    let report = grad_check_inputs(
        |g, vars| {
            let params = student.vars_from(vars);
            let x = g.constant(image.clone());
            let out = student.forward(g, &params, x)?;
            let loss = sample_loss(g, &dcfg, out.logits, &out.hidden, label, Some(&targets))?;
            Ok(loss.total)
        },
        &inputs,
        FULL_LOSS_STEP,
        Some(&coords),
    )?;
    Ok(report.max_rel_error)
}

/// Runs every check once with inputs drawn from `seed`.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, f) in cases {
        let report = grad_check_inputs(|g, v| f(g, v), &inputs, STEP, None)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            threshold: PRIMITIVE_TOL,
        });
    }
    out.push(SuiteEntry {
        name: "full_loss".to_string(),
        max_rel_error: full_loss_error(seed)?,
        threshold: FULL_LOSS_TOL,
    });
    Ok(out)
}
