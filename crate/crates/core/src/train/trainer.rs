use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, cosine_lr, OptimizerState};
use super::TrainConfig;
use crate::checkpoint::LoopState;
use crate::data::{stratified_split, Dataset};
use crate::distill::{sample_loss, DistillConfig, DistillLosses, TeacherTargets};
use crate::error::{contract_err, Error, Result};
use crate::graph::Graph;
use crate::network::{predict, VimNet};
use crate::params::Grads;
use crate::sr::{sr_generate, SrGenerator};
use crate::tensor::Tensor;

/// A classifier, optionally preceded by an SR generator. With a generator
/// the model consumes LR images; without one it consumes images already at
/// the classifier's input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: VimNet,
    pub sr: Option<SrGenerator>,
}

impl Model {
    pub fn plain(net: VimNet) -> Self {
        Self { net, sr: None }
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let (_, logits) = match &self.sr {
            Some(sr) => self.net.infer(&sr_generate(input, sr)?)?,
            None => self.net.infer(input)?,
        };
        Ok(logits)
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub l_ce: f32,
    pub l_ld: f32,
    pub l_hsd: f32,
    pub l_mkd: f32,
    pub l_total: f32,
    pub train_acc: f32,
    pub val_acc: f32,
}

/// Training tensors for [`fit`]. `targets`, when present, align with `train`.
#[derive(Clone, Copy, Debug)]
pub struct FitInputs<'a> {
    pub train: &'a [Tensor],
    pub train_labels: &'a [usize],
    pub targets: Option<&'a [TeacherTargets]>,
    pub val: &'a [Tensor],
    pub val_labels: &'a [usize],
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub loop_state: LoopState,
    pub optimizer: OptimizerState,
    pub sr_optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub last: Model,
    /// Parameters from the epoch with the highest validation accuracy
    /// (earliest on ties); the last model when there is no validation set.
    pub best: Model,
    pub state: FitState,
    pub metrics: Vec<EpochMetrics>,
}

struct SampleOut {
    net: Grads,
    sr: Option<Grads>,
    losses: DistillLosses,
    correct: bool,
}

fn sample_step(
    model: &Model,
    input: &Tensor,
    label: usize,
    target: Option<&TeacherTargets>,
    dcfg: &DistillConfig,
) -> Result<SampleOut> {
    let mut g = Graph::new();
    let (sr_bound, x) = match &model.sr {
        Some(sr) => sr.forward(&mut g, input, true)?,
        None => {
            model.net.check_input(input)?;
            (None, g.constant(input.clone()))
        }
    };
    let (bound, vars) = model.net.bind(&mut g, true);
    let out = model.net.forward(&mut g, &vars, x)?;
    let loss = sample_loss(&mut g, dcfg, out.logits, &out.hidden, label, target)?;
    let correct = predict(g.value(out.logits).data()) == label;
    let losses = loss.values(&g, dcfg);
    g.backward(loss.total)?;
    let net = model.net.params.collect_grads(&g, &bound);
    let sr = match (&model.sr, sr_bound) {
        (Some(sr), Some(b)) => Some(sr.params.collect_grads(&g, &b)),
        _ => None,
    };
    Ok(SampleOut {
        net,
        sr,
        losses,
        correct,
    })
}

/// Order-preserving map, parallel unless `pool` is `None`.
fn map_ordered<T, F>(pool: Option<&rayon::ThreadPool>, idx: &[usize], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| idx.par_iter().map(|&i| f(i)).collect()),
        None => idx.iter().map(|&i| f(i)).collect(),
    }
}

fn build_pool(cfg: &TrainConfig) -> Result<Option<rayon::ThreadPool>> {
    if cfg.deterministic {
        return Ok(None);
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        b = b.num_threads(n);
    }
    b.build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

fn accuracy(pool: Option<&rayon::ThreadPool>, model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f32> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(contract_err!(
            "evaluation needs a nonempty set with one label per image ({} images, {} labels)",
            images.len(),
            labels.len()
        ));
    }
    let idx: Vec<usize> = (0..images.len()).collect();
    let hits = map_ordered(pool, &idx, |i| {
        model
            .logits(&images[i])
            .map(|l| predict(l.data()) == labels[i])
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f32 / images.len() as f32)
}

/// Top-1 accuracy of `model` over `images`.
pub fn evaluate_top1(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f32> {
    let pool = build_pool(&TrainConfig::toy())?;
    accuracy(pool.as_ref(), model, images, labels)
}

/// Teacher logits and hidden states for every image, computed once.
pub fn teacher_targets(teacher: &VimNet, images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<TeacherTargets>> {
    let pool = build_pool(cfg)?;
    let idx: Vec<usize> = (0..images.len()).collect();
    map_ordered(pool.as_ref(), &idx, |i| {
        teacher
            .infer(&images[i])
            .map(|(hidden, logits)| TeacherTargets { logits, hidden })
    })
    .into_iter()
    .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch AdamW training under the objective described by `dcfg`.
///
/// Each sample gets its own graph; batch gradients are the mean of the
/// per-sample gradients summed in batch order, so results do not depend on
/// the number of worker threads. `on_epoch` sees every finished epoch
/// together with the current model, the loop state and whether the epoch
/// set a new best validation accuracy.
pub fn fit(
    model: Model,
    inputs: &FitInputs,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    resume: Option<FitState>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &FitState, bool) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    dcfg.validate()?;
    let n = inputs.train.len();
    if n == 0 {
        return Err(contract_err!("training set is empty"));
    }
    if inputs.train_labels.len() != n || inputs.val.len() != inputs.val_labels.len() {
        return Err(contract_err!("every image needs exactly one label"));
    }
    if let Some(t) = inputs.targets {
        if t.len() != n {
            return Err(contract_err!("{} teacher targets for {n} training images", t.len()));
        }
    }
    if dcfg.needs_teacher() && inputs.targets.is_none() {
        return Err(contract_err!("distillation terms enabled but no teacher outputs given"));
    }
    let classes = model.net.config.num_classes;
    if let Some(&bad) = inputs
        .train_labels
        .iter()
        .chain(inputs.val_labels)
        .find(|&&l| l >= classes)
    {
        return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
    }

    let mut model = model;
    let sr_trainable = model.sr.as_ref().is_some_and(|s| !s.is_frozen());
    let mut state = resume.unwrap_or_else(|| FitState {
        loop_state: LoopState {
            epoch: 0,
            best_val_acc: f32::NEG_INFINITY,
            best_epoch: 0,
        },
        optimizer: OptimizerState::new(&model.net.params),
        sr_optimizer: None,
    });
    if sr_trainable && state.sr_optimizer.is_none() {
        let sr = model.sr.as_ref().expect("trainable generator");
        state.sr_optimizer = Some(OptimizerState::new(&sr.params));
    }
    let pool = build_pool(cfg)?;
    let mut best = model.clone();
    let mut metrics = Vec::new();

    for epoch in state.loop_state.epoch..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init);
        let order = epoch_order(n, cfg.seed, epoch);
        let mut sums = [0.0f64; 5];
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let outs = map_ordered(pool.as_ref(), batch, |i| {
                sample_step(
                    &model,
                    &inputs.train[i],
                    inputs.train_labels[i],
                    inputs.targets.map(|t| &t[i]),
                    dcfg,
                )
            });
            let scale = 1.0 / batch.len() as f32;
            let mut net_grads = Grads::empty(model.net.params.len());
            let mut sr_grads = model.sr.as_ref().map(|s| Grads::empty(s.params.len()));
            for out in outs {
                let out = out?;
                if !out.losses.is_finite() {
                    return Err(contract_err!(
                        "non-finite loss at epoch {epoch}, step {step}: {:?}",
                        out.losses
                    ));
                }
                let l = &out.losses;
                for (s, v) in sums.iter_mut().zip([l.l_ce, l.l_ld, l.l_hsd, l.l_mkd, l.l_total]) {
                    *s += f64::from(v);
                }
                correct += usize::from(out.correct);
                net_grads.add_scaled(&out.net, scale);
                if let (Some(acc), Some(g)) = (sr_grads.as_mut(), out.sr.as_ref()) {
                    acc.add_scaled(g, scale);
                }
            }
            adamw_step(&mut model.net.params, &net_grads, &mut state.optimizer, &cfg.optimizer, lr)?;
            if let (Some(sr), Some(g), Some(st)) =
                (model.sr.as_mut(), sr_grads.as_ref(), state.sr_optimizer.as_mut())
            {
                if sr_trainable {
                    adamw_step(&mut sr.params, g, st, &cfg.optimizer, lr)?;
                }
            }
        }

        let val_acc = if inputs.val.is_empty() {
            f32::NAN
        } else {
            accuracy(pool.as_ref(), &model, inputs.val, inputs.val_labels)?
        };
        let mean = |k: usize| (sums[k] / n as f64) as f32;
        let row = EpochMetrics {
            epoch,
            lr,
            l_ce: mean(0),
            l_ld: mean(1),
            l_hsd: mean(2),
            l_mkd: mean(3),
            l_total: mean(4),
            train_acc: correct as f32 / n as f32,
            val_acc,
        };
        let improved = inputs.val.is_empty() || val_acc > state.loop_state.best_val_acc;
        if improved {
            if !inputs.val.is_empty() {
                state.loop_state.best_val_acc = val_acc;
            }
            state.loop_state.best_epoch = epoch;
            best = model.clone();
        }
        state.loop_state.epoch = epoch + 1;
        metrics.push(row);
        on_epoch(&row, &model, &state, improved)?;
    }
    Ok(FitOutcome {
        last: model,
        best,
        state,
        metrics,
    })
}

/// Splits `data` into train/validation parts for `cfg`.
fn split(data: &Dataset, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    stratified_split(&data.labels, cfg.val_fraction, cfg.seed)
}

fn pick(images: &[Tensor], idx: &[usize]) -> Vec<Tensor> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

fn pick_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Cross-entropy training of a teacher on HR images.
pub fn train_teacher(
    data: &Dataset,
    net: VimNet,
    cfg: &TrainConfig,
    resume: Option<FitState>,
    on_epoch: impl FnMut(&EpochMetrics, &Model, &FitState, bool) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract_err!("teacher training set is empty"));
    }
    let (tr, va) = split(data, cfg);
    let (train, val) = (pick(&data.images, &tr), pick(&data.images, &va));
    let (train_labels, val_labels) = (pick_labels(&data.labels, &tr), pick_labels(&data.labels, &va));
    let inputs = FitInputs {
        train: &train,
        train_labels: &train_labels,
        targets: None,
        val: &val,
        val_labels: &val_labels,
    };
    fit(
        Model::plain(net),
        &inputs,
        &DistillConfig::ce_only(),
        cfg,
        resume,
        on_epoch,
    )
}

/// Inputs of a student run: paired HR/LR datasets and the frozen teacher.
#[derive(Clone, Copy, Debug)]
pub struct StudentRun<'a> {
    pub hr: &'a Dataset,
    pub lr: &'a Dataset,
    pub teacher: &'a VimNet,
}

/// Trains SR generator + classifier on LR images under `dcfg`. The teacher
/// only ever runs in inference mode on the HR copies. A frozen generator is
/// applied once up front.
pub fn train_student(
    run: StudentRun,
    student: VimNet,
    mut sr: SrGenerator,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    resume: Option<FitState>,
    on_epoch: impl FnMut(&EpochMetrics, &Model, &FitState, bool) -> Result<()>,
) -> Result<FitOutcome> {
    if let Some(diff) = run.teacher.config.mismatch(&student.config) {
        return Err(contract_err!("teacher and student configurations differ ({diff})"));
    }
    cfg.validate()?;
    dcfg.validate()?;
    if run.lr.is_empty() {
        return Err(contract_err!("student training set is empty"));
    }
    run.hr.check_paired(run.lr)?;
    if sr.config.output_side() != student.config.input_side {
        return Err(contract_err!(
            "SR output side {} differs from the classifier input side {}",
            sr.config.output_side(),
            student.config.input_side
        ));
    }
    sr.check_input(&run.lr.images[0])?;
    sr.set_frozen(!cfg.sr_fine_tune);

    let (tr, va) = split(run.lr, cfg);
    let targets = if dcfg.needs_teacher() {
        Some(teacher_targets(run.teacher, &pick(&run.hr.images, &tr), cfg)?)
    } else {
        None
    };
    let train_labels = pick_labels(&run.lr.labels, &tr);
    let val_labels = pick_labels(&run.lr.labels, &va);
    let (train, val, model) = if sr.is_frozen() {
        let pool = build_pool(cfg)?;
        let all: Vec<usize> = (0..run.lr.len()).collect();
        let sr_images = map_ordered(pool.as_ref(), &all, |i| sr_generate(&run.lr.images[i], &sr))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        (pick(&sr_images, &tr), pick(&sr_images, &va), Model::plain(student))
    } else {
        (
            pick(&run.lr.images, &tr),
            pick(&run.lr.images, &va),
            Model {
                net: student,
                sr: Some(sr.clone()),
            },
        )
    };
    let inputs = FitInputs {
        train: &train,
        train_labels: &train_labels,
        targets: targets.as_deref(),
        val: &val,
        val_labels: &val_labels,
    };
    let mut on_epoch = on_epoch;
    let attach = |m: &Model| Model {
        net: m.net.clone(),
        sr: Some(m.sr.clone().unwrap_or_else(|| sr.clone())),
    };
    let mut outcome = fit(model, &inputs, dcfg, cfg, resume, |row, m, st, best| {
        on_epoch(row, &attach(m), st, best)
    })?;
    outcome.last = attach(&outcome.last);
    outcome.best = attach(&outcome.best);
    Ok(outcome)
}

/// Result of one β value in [`sweep_beta`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f32,
    pub top1: f32,
    pub best_val_acc: f32,
    pub l_ce: f32,
    pub l_ld: f32,
    pub l_hsd: f32,
    pub l_total: f32,
}

/// Trains one student per β (same seed and initialization) and reports
/// top-1 of its best-validation model on `test`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_beta(
    run: StudentRun,
    init: &VimNet,
    sr: &SrGenerator,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    betas: &[f32],
    test_lr: &Dataset,
) -> Result<Vec<SweepRow>> {
    betas
        .iter()
        .map(|&beta| {
            let d = DistillConfig { beta, ..dcfg.clone() };
            let out = train_student(run, init.clone(), sr.clone(), &d, cfg, None, |_, _, _, _| Ok(()))?;
            let top1 = evaluate_top1(&out.best, &test_lr.images, &test_lr.labels)?;
            let last = out.metrics.last().copied().unwrap_or_default();
            Ok(SweepRow {
                beta,
                top1,
                best_val_acc: out.state.loop_state.best_val_acc,
                l_ce: last.l_ce,
                l_ld: last.l_ld,
                l_hsd: last.l_hsd,
                l_total: last.l_total,
            })
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("csv serialization: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv serialization: {e}")))
}

/// Metrics as CSV text with a header row.
pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<Vec<u8>> {
    to_csv(rows)
}

/// One row per β value, with a header row.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    crate::checkpoint::write_file(path, &metrics_csv(rows)?)
}

/// Reads rows written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<EpochMetrics>, _>>()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}
