//! Finite-difference checks of every primitive, the individual losses and
//! the full student objective.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vimd::gradcheck::{grad_check, relative_error};
use vimd::gradsuite::{self, FULL_LOSS_TOL, PRIMITIVE_TOL};
use vimd::Tensor;

#[test]
fn suite_passes_for_several_seeds() {
    let start = Instant::now();
    for seed in 0..5 {
        let entries = gradsuite::run(seed).unwrap();
        assert!(entries.iter().any(|e| e.name == "full_loss"));
        for e in &entries {
            assert!(e.passed(), "seed {seed}: {} error {:e} > {:e}", e.name, e.max_rel_error, e.threshold);
        }
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn suite_covers_every_primitive_and_loss() {
    let names: Vec<String> = gradsuite::run(11).unwrap().into_iter().map(|e| e.name).collect();
    for want in [
        "matmul",
        "conv2d",
        "selective_scan",
        "dwconv_causal",
        "rms_norm",
        "pixel_shuffle",
        "log_softmax",
        "kl_div_student_first",
        "kl_div_teacher_first",
        "loss_ce",
        "loss_ld",
        "loss_hsd",
        "full_loss",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[test]
fn thresholds_follow_the_suite_definition() {
    for e in gradsuite::run(3).unwrap() {
        let want = if e.name == "full_loss" { FULL_LOSS_TOL } else { PRIMITIVE_TOL };
        assert_eq!(e.threshold, want, "{}", e.name);
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
    assert!(relative_error(&[1.0, 2.0], &[1.0, 2.2]) > 1e-2);

    // sum(stop-gradient(x) ⊙ x): backward sees only half of d(x²)/dx
    let x = Tensor::uniform(&[5], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let err = grad_check(
        |g, v| {
            let c = g.constant(g.value(v).clone());
            let p = g.mul(v, c)?;
            Ok(g.sum(p))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err > 0.1, "error {err}");
}
