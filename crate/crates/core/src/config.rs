//! Plain-text `key = value` run configuration.
//!
//! A file starts from a named profile (`profile = toy` or `profile = paper`,
//! default `toy`) and overrides individual keys. `#` starts a comment.
//! Unknown keys and unparsable values are configuration errors.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, KlDirection};
use crate::encoder::GateMode;
use crate::error::{Error, Result};
use crate::network::VimConfig;
use crate::sr::{SrConfig, SrMode, SR_SCALE};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub model: VimConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub sr: SrConfig,
}

impl RunConfig {
    /// Vim-Tiny at 224², LR 56², 200 epochs at lr 1e-6.
    pub fn paper() -> Self {
        let model = VimConfig::vim_tiny();
        Self {
            profile: "paper".into(),
            sr: SrConfig::new(model.input_side / SR_SCALE),
            model,
            train: TrainConfig::paper(),
            distill: DistillConfig::default(),
        }
    }

    /// Four-class 64² model with 16² LR inputs, lr 3e-4.
    pub fn toy() -> Self {
        let model = VimConfig::toy();
        Self {
            profile: "toy".into(),
            sr: SrConfig::new(model.input_side / SR_SCALE),
            model,
            train: TrainConfig::toy(),
            distill: DistillConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected `paper` or `toy`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if self.sr.output_side() != self.model.input_side {
            return Err(Error::Config(format!(
                "lr_side {} × {SR_SCALE} must equal input_side {}",
                self.sr.input_side, self.model.input_side
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map_or("toy", |(_, v)| v.as_str());
        let mut cfg = Self::profile(profile)?;
        for (k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d, s) = (&mut self.model, &mut self.train, &mut self.distill, &mut self.sr);
        match key {
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "d_state" => m.d_state = parse(key, value)?,
            "expand" => m.expand = parse(key, value)?,
            "conv_width" => m.conv_width = parse(key, value)?,
            "dt_rank" => {
                m.dt_rank = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "input_side" => m.input_side = parse(key, value)?,
            "final_norm" => m.final_norm = parse(key, value)?,
            "gate" => {
                m.gate = match value {
                    "projected" => GateMode::Projected,
                    "literal" => GateMode::Literal,
                    _ => return Err(bad(key, value)),
                }
            }
            "epochs" => t.epochs = parse(key, value)?,
            "lr_init" => t.lr_init = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "beta1" => t.optimizer.beta1 = parse(key, value)?,
            "beta2" => t.optimizer.beta2 = parse(key, value)?,
            "eps" => t.optimizer.eps = parse(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "deterministic" => t.deterministic = parse(key, value)?,
            "threads" => t.threads = Some(parse(key, value)?),
            "sr_fine_tune" => t.sr_fine_tune = parse(key, value)?,
            "alpha" => d.alpha = parse(key, value)?,
            "beta" => d.beta = parse(key, value)?,
            "delta_temp" => d.delta_temp = parse(key, value)?,
            "use_ld" => d.use_ld = parse(key, value)?,
            "use_hsd" => d.use_hsd = parse(key, value)?,
            "kl_direction" => {
                d.kl_direction = match value {
                    "student_first" => KlDirection::StudentFirst,
                    "teacher_first" => KlDirection::TeacherFirst,
                    _ => return Err(bad(key, value)),
                }
            }
            "temp_squared" => d.temp_squared = parse(key, value)?,
            "sr_mode" => {
                s.mode = match value {
                    "residual" => SrMode::Residual,
                    "bicubic" => SrMode::Bicubic,
                    _ => return Err(bad(key, value)),
                }
            }
            "sr_channels" => s.channels = parse(key, value)?,
            "sr_blocks" => s.res_blocks = parse(key, value)?,
            "lr_side" => s.input_side = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` rendering that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let (m, t, d, s) = (&self.model, &self.train, &self.distill, &self.sr);
        let gate = match m.gate {
            GateMode::Projected => "projected",
            GateMode::Literal => "literal",
        };
        let kl = match d.kl_direction {
            KlDirection::StudentFirst => "student_first",
            KlDirection::TeacherFirst => "teacher_first",
        };
        let mode = match s.mode {
            SrMode::Residual => "residual",
            SrMode::Bicubic => "bicubic",
        };
        let dt_rank = m.dt_rank.map_or("auto".to_string(), |r| r.to_string());
        let mut lines = vec![
            format!("profile = {}", self.profile),
            format!("embed_dim = {}", m.embed_dim),
            format!("depth = {}", m.depth),
            format!("patch = {}", m.patch),
            format!("in_channels = {}", m.in_channels),
            format!("num_classes = {}", m.num_classes),
            format!("d_state = {}", m.d_state),
            format!("expand = {}", m.expand),
            format!("conv_width = {}", m.conv_width),
            format!("dt_rank = {dt_rank}"),
            format!("input_side = {}", m.input_side),
            format!("final_norm = {}", m.final_norm),
            format!("gate = {gate}"),
            format!("epochs = {}", t.epochs),
            format!("lr_init = {:e}", t.lr_init),
            format!("batch_size = {}", t.batch_size),
            format!("beta1 = {}", t.optimizer.beta1),
            format!("beta2 = {}", t.optimizer.beta2),
            format!("eps = {:e}", t.optimizer.eps),
            format!("weight_decay = {}", t.optimizer.weight_decay),
            format!("seed = {}", t.seed),
            format!("val_fraction = {}", t.val_fraction),
            format!("deterministic = {}", t.deterministic),
        ];
        if let Some(n) = t.threads {
            lines.push(format!("threads = {n}"));
        }
        lines.extend([
            format!("sr_fine_tune = {}", t.sr_fine_tune),
            format!("alpha = {}", d.alpha),
            format!("beta = {}", d.beta),
            format!("delta_temp = {}", d.delta_temp),
            format!("use_ld = {}", d.use_ld),
            format!("use_hsd = {}", d.use_hsd),
            format!("kl_direction = {kl}"),
            format!("temp_squared = {}", d.temp_squared),
            format!("sr_mode = {mode}"),
            format!("sr_channels = {}", s.channels),
            format!("sr_blocks = {}", s.res_blocks),
            format!("lr_side = {}", s.input_side),
        ]);
        lines.join("\n") + "\n"
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::paper().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        assert_eq!(RunConfig::paper().train.lr_init, 1e-6);
        assert_eq!(RunConfig::toy().train.lr_init, 3e-4);
        assert_eq!(RunConfig::paper().sr.input_side, 56);
        assert_eq!(RunConfig::toy().sr.input_side, 16);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse("profile = toy\n# comment\nepochs = 3 # trailing\nbeta=10\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.distill.beta, 10.0);
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("profile = huge").is_err());
        assert!(RunConfig::parse("lr_side = 15").is_err());
    }

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::paper(), RunConfig::toy()] {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
