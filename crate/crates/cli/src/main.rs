//! `vimd`: LR synthesis, teacher/student training, evaluation and audits.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 contract or
//! validation error, 3 failed gate (`audit` expectations, `gradcheck`
//! thresholds).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "vimd", version, about = "Vision-Mamba distillation for low-resolution classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every command that builds a model.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile when no file is given (`toy` or `paper`).
    #[arg(long, default_value = "toy")]
    pub profile: String,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a bicubic-downsampled copy of a dataset next to it (`<root>_lr<size>`).
    SynthLr {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long, default_value_t = 56)]
        size: usize,
    },
    /// Writes the synthetic oriented-grating dataset as PNG files.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Trains the HR teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// HR dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Trains the SR front end and student classifier on LR images.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        student: StudentArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Top-1 accuracy of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON summary path; defaults to `<ckpt>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count and FLOPs estimate, optionally gated.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        expect_params: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        params_tolerance: f64,
        #[arg(long)]
        expect_flops: Option<f64>,
        #[arg(long, default_value_t = 0.25)]
        flops_tolerance: f64,
        #[arg(long, default_value = "audit-manifest.json")]
        manifest: PathBuf,
    },
    /// Finite-difference checks of every primitive and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "gradcheck-manifest.json")]
        manifest: PathBuf,
    },
    /// One student per β; writes one CSV row per value.
    SweepBeta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        student: StudentArgs,
        /// LR test set root.
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,20,30")]
        betas: Vec<f32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args, Clone)]
pub struct StudentArgs {
    /// HR dataset root (teacher inputs).
    #[arg(long)]
    pub data: PathBuf,
    /// LR dataset root; defaults to `<data>_lr<lr_side>`.
    #[arg(long)]
    pub lr_data: Option<PathBuf>,
    #[arg(long)]
    pub teacher_ckpt: PathBuf,
    /// Drop the logit distillation term.
    #[arg(long)]
    pub no_ld: bool,
    /// Drop the hidden-state distillation term.
    #[arg(long)]
    pub no_hsd: bool,
    #[arg(long)]
    pub beta: Option<f32>,
}

/// Failure of a command, already mapped to its exit code.
#[derive(Debug)]
pub enum Failure {
    Lib(vimd::Error),
    Usage(String),
    Gate(String),
}

impl From<vimd::Error> for Failure {
    fn from(e: vimd::Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use vimd::Error as E;
        match self {
            Failure::Usage(_) => 1,
            Failure::Gate(_) => 3,
            Failure::Lib(E::Config(_) | E::Io { .. }) => 1,
            Failure::Lib(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Usage(m) | Failure::Gate(m) => m.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    use commands as c;
    match cli.command {
        Command::SynthLr { data_root, size } => c::synth_lr(&data_root, size),
        Command::GenToy {
            out,
            seed,
            per_class,
            classes,
            side,
        } => c::gen_toy(&out, seed, per_class, classes, side),
        Command::TrainTeacher { cfg, data, out, resume } => c::train_teacher(&cfg, &data, &out, resume),
        Command::TrainStudent {
            cfg,
            student,
            out,
            resume,
        } => c::train_student(&cfg, &student, &out, resume),
        Command::Eval { ckpt, data, out } => c::eval(&ckpt, &data, out.as_deref()),
        Command::Audit {
            cfg,
            expect_params,
            params_tolerance,
            expect_flops,
            flops_tolerance,
            manifest,
        } => c::audit(
            &cfg,
            c::Gate::new(expect_params, params_tolerance),
            c::Gate::new(expect_flops, flops_tolerance),
            &manifest,
        ),
        Command::Gradcheck { seed, seeds, manifest } => c::gradcheck(seed, seeds, &manifest),
        Command::SweepBeta {
            cfg,
            student,
            test_data,
            betas,
            out,
        } => c::sweep_beta(&cfg, &student, &test_data, &betas, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
