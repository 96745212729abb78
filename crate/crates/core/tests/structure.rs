//! Exact structural identities of the network and the loss composition.

#[path = "support/identities.rs"]
mod identities;

use identities::graph_losses;
use vimd::distill::{DistillConfig, DistillLosses, KlDirection};

#[test]
fn zeroed_output_projections_make_every_block_the_identity() {
    identities::residual_identity();
}

#[test]
fn head_reads_only_the_class_token_row() {
    identities::head_locality();
}

#[test]
fn class_token_sits_at_the_middle_index() {
    identities::class_token_middle();
}

#[test]
fn distillation_losses_vanish_at_equality() {
    identities::zero_at_equality();
}

#[test]
fn total_loss_composes_from_its_terms() {
    identities::composition();
}

#[test]
fn compose_matches_the_formula() {
    let cfg = DistillConfig { alpha: 0.5, beta: 3.0, ..DistillConfig::default() };
    let l = DistillLosses::compose(&cfg, 1.25, 0.5, 0.25);
    assert_eq!(l.l_mkd, 0.5 + 3.0 * 0.25);
    assert_eq!(l.l_total, 1.25 + 0.5 * l.l_mkd);
    let off = DistillLosses::compose(&DistillConfig::ce_only(), 1.25, 0.5, 0.25);
    assert_eq!((off.l_ld, off.l_hsd, off.l_mkd, off.l_total), (0.0, 0.0, 0.0, 1.25));
}

#[test]
fn temperature_squared_flag_scales_the_logit_term() {
    let base = DistillConfig { use_hsd: false, ..DistillConfig::default() };
    let plain = graph_losses(&base, 20);
    let scaled = graph_losses(&DistillConfig { temp_squared: true, ..base.clone() }, 20);
    let t2 = base.delta_temp * base.delta_temp;
    assert!((scaled.l_ld - t2 * plain.l_ld).abs() <= 1e-6 * scaled.l_ld);
    let reversed = graph_losses(&DistillConfig { kl_direction: KlDirection::TeacherFirst, ..base }, 20);
    assert!(reversed.l_ld > 0.0 && reversed.l_ld != plain.l_ld);
}
