//! Training-loop contracts: reproducibility, resumption, frozen parts and
//! input validation.

mod common;

use common::{generator, net, tiny_data, tiny_model, tiny_train};
use vimd::checkpoint::Checkpoint;
use vimd::data::Dataset;
use vimd::distill::DistillConfig;
use vimd::network::VimConfig;
use vimd::train::{
    metrics_csv, read_metrics_csv, train_student, train_teacher, write_metrics_csv, EpochMetrics, FitOutcome,
    FitState, StudentRun, TrainConfig,
};
use vimd::Error;

fn student(hr: &Dataset, lr: &Dataset, cfg: &TrainConfig, resume: Option<FitState>, init_seed: u64) -> FitOutcome {
    let teacher = net(100);
    train_student(
        StudentRun { hr, lr, teacher: &teacher },
        net(init_seed),
        generator(init_seed + 1),
        &DistillConfig::default(),
        cfg,
        resume,
        |_, _, _, _| Ok(()),
    )
    .unwrap()
}

#[test]
fn deterministic_runs_repeat_bit_for_bit() {
    let (hr, lr) = tiny_data(6, 1);
    let cfg = TrainConfig {
        deterministic: true,
        sr_fine_tune: true,
        ..tiny_train(2)
    };
    let a = student(&hr, &lr, &cfg, None, 10);
    let b = student(&hr, &lr, &cfg, None, 10);
    assert_eq!(metrics_csv(&a.metrics).unwrap(), metrics_csv(&b.metrics).unwrap());
    assert!(a.last.net.params.bit_eq(&b.last.net.params));
    assert!(a.last.sr.unwrap().params.bit_eq(&b.last.sr.unwrap().params));
}

#[test]
fn worker_count_does_not_change_results() {
    let (hr, lr) = tiny_data(6, 2);
    let with = |threads| TrainConfig {
        threads: Some(threads),
        ..tiny_train(2)
    };
    let one = student(&hr, &lr, &with(1), None, 20);
    let three = student(&hr, &lr, &with(3), None, 20);
    let serial = student(&hr, &lr, &TrainConfig { deterministic: true, ..tiny_train(2) }, None, 20);
    assert_eq!(metrics_csv(&one.metrics).unwrap(), metrics_csv(&three.metrics).unwrap());
    assert_eq!(metrics_csv(&one.metrics).unwrap(), metrics_csv(&serial.metrics).unwrap());
    assert!(one.last.net.params.bit_eq(&three.last.net.params));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (hr, lr) = tiny_data(6, 3);
    let cfg = TrainConfig {
        sr_fine_tune: true,
        ..tiny_train(3)
    };
    let full = student(&hr, &lr, &cfg, None, 30);

    // stop after the first epoch by saving what the CLI would save
    let mut saved: Option<Vec<u8>> = None;
    let teacher = net(100);
    let _ = train_student(
        StudentRun { hr: &hr, lr: &lr, teacher: &teacher },
        net(30),
        generator(31),
        &DistillConfig::default(),
        &cfg,
        None,
        |row, model, state, _| {
            if row.epoch == 0 {
                let mut ck = Checkpoint::model(&model.net, model.sr.as_ref(), &hr.classes);
                ck.meta.loop_state = Some(state.loop_state.clone());
                ck.optimizer = Some(state.optimizer.clone());
                ck.sr_optimizer = state.sr_optimizer.clone();
                saved = Some(ck.to_bytes()?);
            }
            Ok(())
        },
    )
    .unwrap();
    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let state = FitState {
        loop_state: ck.meta.loop_state.clone().unwrap(),
        optimizer: ck.optimizer.clone().unwrap(),
        sr_optimizer: ck.sr_optimizer.clone(),
    };
    assert_eq!(state.loop_state.epoch, 1);
    let resumed = train_student(
        StudentRun { hr: &hr, lr: &lr, teacher: &teacher },
        ck.net,
        ck.sr.unwrap(),
        &DistillConfig::default(),
        &cfg,
        Some(state),
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(resumed.metrics.as_slice(), &full.metrics[1..]);
    assert!(resumed.last.net.params.bit_eq(&full.last.net.params));
    assert!(resumed.last.sr.unwrap().params.bit_eq(&full.last.sr.unwrap().params));
    assert_eq!(resumed.state, full.state);
}

#[test]
fn generator_stays_fixed_without_fine_tuning() {
    let (hr, lr) = tiny_data(4, 4);
    let out = student(&hr, &lr, &tiny_train(1), None, 40);
    let init = generator(41);
    assert!(out.last.sr.as_ref().unwrap().params.bit_eq(&init.params));
    assert!(!out.last.net.params.bit_eq(&net(40).params));

    let tuned = student(&hr, &lr, &TrainConfig { sr_fine_tune: true, ..tiny_train(1) }, None, 40);
    assert!(!tuned.last.sr.unwrap().params.bit_eq(&init.params));
}

#[test]
fn teacher_loss_decreases_on_a_learnable_set() {
    let (hr, _) = tiny_data(8, 5);
    let cfg = TrainConfig {
        lr_init: 3e-3,
        val_fraction: 0.0,
        ..tiny_train(6)
    };
    let out = train_teacher(&hr, net(50), &cfg, None, |_, _, _, _| Ok(())).unwrap();
    let (first, last) = (out.metrics.first().unwrap(), out.metrics.last().unwrap());
    assert!(last.l_ce < first.l_ce, "{} → {}", first.l_ce, last.l_ce);
    assert!(out.metrics.iter().all(|m| m.l_ld == 0.0 && m.l_hsd == 0.0 && m.l_total == m.l_ce));
}

#[test]
fn student_inputs_are_validated() {
    let (hr, lr) = tiny_data(4, 6);
    let cfg = tiny_train(1);
    let other = vimd::network::VimNet::new(
        VimConfig { depth: 1, ..tiny_model() },
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .unwrap();
    let run = |hr: &Dataset, lr: &Dataset, teacher| {
        train_student(
            StudentRun { hr, lr, teacher },
            net(1),
            generator(2),
            &DistillConfig::default(),
            &cfg,
            None,
            |_, _, _, _| Ok(()),
        )
    };
    let teacher = net(0);
    assert!(matches!(run(&hr, &lr, &other), Err(Error::Contract(_))));

    let shuffled = Dataset {
        labels: lr.labels.iter().rev().copied().collect(),
        ..lr.clone()
    };
    assert!(run(&hr, &shuffled, &teacher).is_err());

    let wrong_side = hr.resized(12).unwrap();
    assert!(run(&hr, &wrong_side, &teacher).is_err());

    let bad_cfg = TrainConfig { epochs: 0, ..cfg.clone() };
    assert!(matches!(
        train_teacher(&hr, net(0), &bad_cfg, None, |_, _, _, _| Ok(())),
        Err(Error::Config(_))
    ));
}

#[test]
fn metrics_csv_round_trips() {
    let rows: Vec<EpochMetrics> = (0..3)
        .map(|e| EpochMetrics {
            epoch: e,
            lr: 1e-4 / (e as f32 + 1.0),
            l_ce: 1.0 / 3.0,
            l_total: 0.1 * e as f32,
            train_acc: 0.5,
            ..EpochMetrics::default()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &rows).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    let text = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
    assert!(text.starts_with("epoch,lr,l_ce,l_ld,l_hsd,l_mkd,l_total,train_acc,val_acc\n"));
}
