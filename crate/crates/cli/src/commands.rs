//! Subcommand bodies. Each one validates its inputs before any expensive
//! work and writes exactly one manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vimd::checkpoint::{Checkpoint, LoopState};
use vimd::config::RunConfig;
use vimd::data::{self, Dataset, ToySpec};
use vimd::network::{flops_estimate, param_count, VimNet};
use vimd::sr::{SrConfig, SrGenerator};
use vimd::train::{self, EpochMetrics, FitState, Model, StudentRun};
use vimd::{gradsuite, Error};

use crate::manifest::RunManifest;
use crate::{ConfigArgs, Failure, StudentArgs};

type CmdResult = Result<(), Failure>;

const TEACHER_STREAM: u64 = 1;
const STUDENT_STREAM: u64 = 2;
const SR_STREAM: u64 = 3;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn env_flag(name: &str) -> Result<Option<String>, Failure> {
    match std::env::var(name) {
        Ok(v) => Ok(Some(v)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Failure::Usage(format!("{name}: {e}"))),
    }
}

/// Profile or file, then `--set` overrides, `--seed`, and the environment.
pub fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(&args.profile)?,
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = env_flag("VIMD_THREADS")? {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("VIMD_THREADS must be a positive integer, got `{v}`")))?;
        cfg.train.threads = Some(n);
    }
    if let Some(v) = env_flag("VIMD_DETERMINISTIC")? {
        cfg.train.deterministic = matches!(v.as_str(), "1" | "true" | "yes");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_dataset(ds: &Dataset, cfg: &RunConfig, side: usize, what: &str) -> CmdResult {
    if ds.is_empty() {
        return Err(Error::Contract(format!("{what} has no images")).into());
    }
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::Contract(format!(
            "{what} has {} classes but the model is configured for {}",
            ds.num_classes(),
            cfg.model.num_classes
        ))
        .into());
    }
    let want = [cfg.model.in_channels, side, side];
    if let Some(name) = ds.images.iter().zip(&ds.names).find(|(t, _)| t.dims() != want).map(|(_, n)| n) {
        return Err(Error::Contract(format!(
            "{what}: image {name} is not {}×{side}×{side}",
            cfg.model.in_channels
        ))
        .into());
    }
    Ok(())
}

fn progress(tag: &str, row: &EpochMetrics) {
    eprintln!(
        "[{tag}] epoch {:>3}  lr {:.2e}  loss {:.4} (ce {:.4} ld {:.4} hsd {:.5})  train {:.3}  val {:.3}",
        row.epoch, row.lr, row.l_total, row.l_ce, row.l_ld, row.l_hsd, row.train_acc, row.val_acc
    );
}

/// Run-directory layout shared by the training commands.
struct RunDir {
    best: PathBuf,
    last: PathBuf,
    metrics: PathBuf,
    manifest: PathBuf,
}

impl RunDir {
    fn new(out: &Path) -> Self {
        Self {
            best: out.join("best.ckpt"),
            last: out.join("last.ckpt"),
            metrics: out.join("metrics.csv"),
            manifest: out.join("manifest.json"),
        }
    }

    /// Rows already logged before the resumed epoch.
    fn previous_rows(&self, resume_epoch: usize) -> Result<Vec<EpochMetrics>, Failure> {
        if !self.metrics.exists() {
            return Ok(Vec::new());
        }
        let mut rows = train::read_metrics_csv(&self.metrics)?;
        rows.retain(|r| r.epoch < resume_epoch);
        Ok(rows)
    }
}

/// Saves the per-epoch artifacts: CSV, resumable last checkpoint and, when
/// improved, the best model.
struct EpochWriter<'a> {
    dir: &'a RunDir,
    classes: &'a [String],
    run: serde_json::Value,
    rows: Vec<EpochMetrics>,
    tag: &'static str,
}

impl EpochWriter<'_> {
    fn on_epoch(&mut self, row: &EpochMetrics, model: &Model, state: &FitState, improved: bool) -> vimd::Result<()> {
        progress(self.tag, row);
        self.rows.push(*row);
        train::write_metrics_csv(&self.dir.metrics, &self.rows)?;
        let mut last = Checkpoint::model(&model.net, model.sr.as_ref(), self.classes);
        last.meta.loop_state = Some(state.loop_state.clone());
        last.meta.run = self.run.clone();
        last.optimizer = Some(state.optimizer.clone());
        last.sr_optimizer = state.sr_optimizer.clone();
        last.save(&self.dir.last)?;
        if improved {
            let mut best = Checkpoint::model(&model.net, model.sr.as_ref(), self.classes);
            best.meta.loop_state = Some(state.loop_state.clone());
            best.meta.run = self.run.clone();
            best.save(&self.dir.best)?;
        }
        Ok(())
    }
}

fn resume_state(ck: &Checkpoint, path: &Path) -> Result<FitState, Failure> {
    match (&ck.meta.loop_state, &ck.optimizer) {
        (Some(loop_state), Some(optimizer)) => Ok(FitState {
            loop_state: loop_state.clone(),
            optimizer: optimizer.clone(),
            sr_optimizer: ck.sr_optimizer.clone(),
        }),
        _ => Err(Error::Contract(format!(
            "{} has no training state to resume from",
            path.display()
        ))
        .into()),
    }
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

pub fn synth_lr(root: &Path, size: usize) -> CmdResult {
    if !root.is_dir() {
        return Err(Failure::Usage(format!("data root {} does not exist", root.display())));
    }
    let mut manifest = RunManifest::new("synth-lr", None);
    let report = data::synth_lr(root, size)?;
    manifest.lap("synthesize");
    let out = data::lr_root(root, size);
    println!(
        "{}: {} written, {} already up to date",
        out.display(),
        report.written,
        report.skipped
    );
    manifest.output(&out);
    manifest.result = json!({ "size": size, "written": report.written, "skipped": report.skipped });
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

pub fn gen_toy(out: &Path, seed: u64, per_class: usize, classes: usize, side: usize) -> CmdResult {
    let spec = ToySpec {
        classes,
        per_class,
        side,
        ..ToySpec::default()
    };
    let mut manifest = RunManifest::new("gen-toy", None);
    manifest.seed = Some(seed);
    let ds = data::toy_dataset(&spec, seed)?;
    ds.write_to(out)?;
    manifest.lap("generate");
    println!("{}: {} images in {} classes", out.display(), ds.len(), ds.num_classes());
    manifest.output(out);
    manifest.result = json!({ "spec": spec, "images": ds.len() });
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

pub fn train_teacher(args: &ConfigArgs, data_root: &Path, out: &Path, resume: bool) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = RunDir::new(out);
    let resumed = if resume {
        let ck = Checkpoint::load_matching(&dir.last, &cfg.model)?;
        let state = resume_state(&ck, &dir.last)?;
        Some((ck.net, state))
    } else {
        None
    };
    let mut manifest = RunManifest::new("train-teacher", Some(&cfg));
    let ds = data::load_dir(data_root)?;
    check_dataset(&ds, &cfg, cfg.model.input_side, "teacher dataset")?;
    manifest.lap("load");

    let (net, state) = match resumed {
        Some((net, state)) => (net, Some(state)),
        None => (VimNet::new(cfg.model.clone(), &mut init_rng(cfg.train.seed, TEACHER_STREAM))?, None),
    };
    let rows = match &state {
        Some(s) => dir.previous_rows(s.loop_state.epoch)?,
        None => Vec::new(),
    };
    let mut writer = EpochWriter {
        dir: &dir,
        classes: &ds.classes,
        run: config_json(&cfg),
        rows,
        tag: "teacher",
    };
    let outcome = train::train_teacher(&ds, net, &cfg.train, state, |r, m, s, b| writer.on_epoch(r, m, s, b))?;
    manifest.lap("train");
    finish_training(manifest, &dir, &outcome.state.loop_state)
}

fn finish_training(mut manifest: RunManifest, dir: &RunDir, ls: &LoopState) -> CmdResult {
    for p in [&dir.best, &dir.last, &dir.metrics] {
        manifest.output(p);
    }
    manifest.result = json!({
        "epochs_completed": ls.epoch,
        "best_val_acc": ls.best_val_acc,
        "best_epoch": ls.best_epoch,
    });
    println!(
        "best validation accuracy {:.4} at epoch {}; checkpoint {}",
        ls.best_val_acc,
        ls.best_epoch,
        dir.best.display()
    );
    manifest.write(&dir.manifest)?;
    Ok(())
}

/// Student configuration after the command-line switches.
fn student_config(args: &ConfigArgs, s: &StudentArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(args)?;
    if s.no_ld {
        cfg.distill.use_ld = false;
    }
    if s.no_hsd {
        cfg.distill.use_hsd = false;
    }
    if let Some(beta) = s.beta {
        cfg.distill.beta = beta;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct StudentData {
    hr: Dataset,
    lr: Dataset,
    teacher: VimNet,
}

fn load_student_data(cfg: &RunConfig, s: &StudentArgs) -> Result<StudentData, Failure> {
    let teacher = Checkpoint::load_matching(&s.teacher_ckpt, &cfg.model)?;
    let lr_dir = s
        .lr_data
        .clone()
        .unwrap_or_else(|| data::lr_root(&s.data, cfg.sr.input_side));
    if !lr_dir.is_dir() {
        return Err(Failure::Usage(format!(
            "LR dataset {} not found; run `vimd synth-lr --data-root {} --size {}` first",
            lr_dir.display(),
            s.data.display(),
            cfg.sr.input_side
        )));
    }
    let hr = data::load_dir(&s.data)?;
    let lr = data::load_dir(&lr_dir)?;
    check_dataset(&hr, cfg, cfg.model.input_side, "HR dataset")?;
    check_dataset(&lr, cfg, cfg.sr.input_side, "LR dataset")?;
    if !teacher.meta.classes.is_empty() && teacher.meta.classes != hr.classes {
        return Err(Error::Contract(format!(
            "teacher classes {:?} differ from dataset classes {:?}",
            teacher.meta.classes, hr.classes
        ))
        .into());
    }
    Ok(StudentData {
        hr,
        lr,
        teacher: teacher.net,
    })
}

fn fresh_student(cfg: &RunConfig) -> vimd::Result<(VimNet, SrGenerator)> {
    let net = VimNet::new(cfg.model.clone(), &mut init_rng(cfg.train.seed, STUDENT_STREAM))?;
    let sr = SrGenerator::new(
        SrConfig {
            input_side: cfg.sr.input_side,
            ..cfg.sr.clone()
        },
        &mut init_rng(cfg.train.seed, SR_STREAM),
    )?;
    Ok((net, sr))
}

pub fn train_student(args: &ConfigArgs, s: &StudentArgs, out: &Path, resume: bool) -> CmdResult {
    let cfg = student_config(args, s)?;
    let dir = RunDir::new(out);
    let resumed = if resume {
        let ck = Checkpoint::load_matching(&dir.last, &cfg.model)?;
        let state = resume_state(&ck, &dir.last)?;
        let sr = ck
            .sr
            .clone()
            .ok_or_else(|| Error::Contract(format!("{} has no SR generator", dir.last.display())))?;
        Some((ck.net, sr, state))
    } else {
        None
    };
    let mut manifest = RunManifest::new("train-student", Some(&cfg));
    let sd = load_student_data(&cfg, s)?;
    manifest.lap("load");

    let (net, sr, state) = match resumed {
        Some((net, sr, state)) => (net, sr, Some(state)),
        None => {
            let (net, sr) = fresh_student(&cfg)?;
            (net, sr, None)
        }
    };
    let rows = match &state {
        Some(st) => dir.previous_rows(st.loop_state.epoch)?,
        None => Vec::new(),
    };
    let mut writer = EpochWriter {
        dir: &dir,
        classes: &sd.hr.classes,
        run: config_json(&cfg),
        rows,
        tag: "student",
    };
    let run = StudentRun {
        hr: &sd.hr,
        lr: &sd.lr,
        teacher: &sd.teacher,
    };
    let outcome = train::train_student(run, net, sr, &cfg.distill, &cfg.train, state, |r, m, st, b| {
        writer.on_epoch(r, m, st, b)
    })?;
    manifest.lap("train");
    finish_training(manifest, &dir, &outcome.state.loop_state)
}

pub fn eval(ckpt: &Path, data_root: &Path, out: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let ds = data::load_dir(data_root)?;
    if !ck.meta.classes.is_empty() && ck.meta.classes != ds.classes {
        return Err(Error::Contract(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            ck.meta.classes, ds.classes
        ))
        .into());
    }
    if ds.is_empty() {
        return Err(Error::Contract(format!("{} has no images", data_root.display())).into());
    }
    let mut manifest = RunManifest::new("eval", None);
    let model = Model { net: ck.net, sr: ck.sr };
    let top1 = train::evaluate_top1(&model, &ds.images, &ds.labels)?;
    manifest.lap("evaluate");
    println!("top-1 {top1:.4} on {} images", ds.len());
    let path = out.map_or_else(
        || {
            let mut p = ckpt.as_os_str().to_os_string();
            p.push(".eval.json");
            PathBuf::from(p)
        },
        Path::to_path_buf,
    );
    manifest.result = json!({
        "checkpoint": ckpt,
        "data": data_root,
        "images": ds.len(),
        "top1": top1,
        "uses_sr": model.sr.is_some(),
    });
    manifest.write(&path)?;
    Ok(())
}

/// Optional expectation with a relative tolerance.
pub struct Gate {
    expect: Option<f64>,
    tolerance: f64,
}

impl Gate {
    pub fn new(expect: Option<f64>, tolerance: f64) -> Self {
        Self { expect, tolerance }
    }

    /// `None` when no expectation is set; otherwise whether `actual` passes.
    fn check(&self, actual: f64) -> Option<bool> {
        self.expect
            .map(|e| (actual - e).abs() <= self.tolerance * e.abs())
    }
}

pub fn audit(args: &ConfigArgs, params: Gate, flops: Gate, manifest_path: &Path) -> CmdResult {
    let cfg = load_config(args)?;
    let mut manifest = RunManifest::new("audit", Some(&cfg));
    let n = param_count(&cfg.model) as f64;
    let f = flops_estimate(&cfg.model);
    println!("params {:.0} ({:.3} M)", n, n / 1e6);
    println!("flops  {:.0} ({:.3} G)", f, f / 1e9);
    let mut failures = Vec::new();
    let mut gates = serde_json::Map::new();
    for (name, gate, actual) in [("params", &params, n), ("flops", &flops, f)] {
        let Some(ok) = gate.check(actual) else { continue };
        let expect = gate.expect.unwrap_or_default();
        println!(
            "gate {name}: expected {expect} ± {:.0}% → {}",
            gate.tolerance * 100.0,
            if ok { "pass" } else { "FAIL" }
        );
        gates.insert(name.into(), json!({ "expected": expect, "tolerance": gate.tolerance, "passed": ok }));
        if !ok {
            failures.push(format!("{name} {actual:.0} outside {expect} ± {}%", gate.tolerance * 100.0));
        }
    }
    manifest.lap("audit");
    manifest.result = json!({ "params": n, "flops": f, "gates": gates });
    manifest.write(manifest_path)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gate(failures.join("; ")))
    }
}

pub fn gradcheck(seed: u64, seeds: u64, manifest_path: &Path) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut manifest = RunManifest::new("gradcheck", None);
    manifest.seed = Some(seed);
    let mut worst: BTreeMap<String, (f32, f32)> = BTreeMap::new();
    for s in seed..seed + seeds {
        for e in gradsuite::run(s)? {
            let slot = worst.entry(e.name).or_insert((0.0, e.threshold));
            slot.0 = slot.0.max(e.max_rel_error);
        }
    }
    manifest.lap("check");
    let mut failed = Vec::new();
    for (name, (err, tol)) in &worst {
        let ok = err <= tol;
        println!("{name:24} {err:.3e}  (≤ {tol:.0e})  {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    manifest.result = json!({ "seeds": seeds, "max_rel_error": worst, "failed": failed });
    manifest.write(manifest_path)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gate(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn sweep_beta(args: &ConfigArgs, s: &StudentArgs, test_root: &Path, betas: &[f32], out: &Path) -> CmdResult {
    let cfg = student_config(args, s)?;
    if betas.is_empty() {
        return Err(Failure::Usage("--betas needs at least one value".into()));
    }
    if let Some(b) = betas.iter().find(|b| !b.is_finite() || **b < 0.0) {
        return Err(Failure::Usage(format!("β must be finite and nonnegative, got {b}")));
    }
    let mut manifest = RunManifest::new("sweep-beta", Some(&cfg));
    let sd = load_student_data(&cfg, s)?;
    let test = data::load_dir(test_root)?;
    check_dataset(&test, &cfg, cfg.sr.input_side, "LR test set")?;
    manifest.lap("load");

    let (init, sr) = fresh_student(&cfg)?;
    let run = StudentRun {
        hr: &sd.hr,
        lr: &sd.lr,
        teacher: &sd.teacher,
    };
    let rows = train::sweep_beta(run, &init, &sr, &cfg.distill, &cfg.train, betas, &test)?;
    manifest.lap("sweep");
    for r in &rows {
        println!(
            "beta {:>5}  top-1 {:.4}  val {:.4}  loss {:.4}",
            r.beta, r.top1, r.best_val_acc, r.l_total
        );
    }
    let csv_path = out.join("sweep.csv");
    vimd::checkpoint::write_file(&csv_path, &train::sweep_csv(&rows)?)?;
    manifest.output(&csv_path);
    manifest.result = json!({ "rows": rows });
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}
