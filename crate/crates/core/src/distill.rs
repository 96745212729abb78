//! Classification and distillation losses.
//!
//! `total = ce + α·(ld + β·hsd)`, where `ld` is a tempered KL divergence
//! between student and teacher class distributions and `hsd` is the summed
//! per-layer mean-squared difference of encoder outputs H_1 … H_N. Teacher
//! quantities always enter the graph as constants.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::network::HiddenStates;
use crate::tensor::Tensor;

/// Which argument of the KL divergence carries the student distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_s ‖ p_t) = Σ p_s (ln p_s − ln p_t)`.
    #[default]
    StudentFirst,
    /// `KL(p_t ‖ p_s)`, the usual knowledge-distillation form.
    TeacherFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f32,
    pub beta: f32,
    pub delta_temp: f32,
    pub use_ld: bool,
    pub use_hsd: bool,
    pub kl_direction: KlDirection,
    /// Multiply the logit term by Δ².
    pub temp_squared: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 20.0,
            delta_temp: 4.0,
            use_ld: true,
            use_hsd: true,
            kl_direction: KlDirection::StudentFirst,
            temp_squared: false,
        }
    }
}

impl DistillConfig {
    /// Cross-entropy only.
    pub fn ce_only() -> Self {
        Self {
            use_ld: false,
            use_hsd: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_temp > 0.0) || !self.delta_temp.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.delta_temp
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    /// True when any term needs teacher outputs.
    pub fn needs_teacher(&self) -> bool {
        self.use_ld || self.use_hsd
    }
}

/// Scalar loss values, batch-averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub l_ce: f32,
    pub l_ld: f32,
    pub l_hsd: f32,
    pub l_mkd: f32,
    pub l_total: f32,
}

impl DistillLosses {
    /// Assembles the composite terms from the three base losses. Disabled
    /// terms contribute zero.
    pub fn compose(cfg: &DistillConfig, l_ce: f32, l_ld: f32, l_hsd: f32) -> Self {
        let l_ld = if cfg.use_ld { l_ld } else { 0.0 };
        let l_hsd = if cfg.use_hsd { l_hsd } else { 0.0 };
        let l_mkd = l_ld + cfg.beta * l_hsd;
        Self {
            l_ce,
            l_ld,
            l_hsd,
            l_mkd,
            l_total: l_ce + cfg.alpha * l_mkd,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_ld, self.l_hsd, self.l_mkd, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Teacher outputs for one sample, used as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub logits: Tensor,
    pub hidden: HiddenStates,
}

/// Graph handles of one sample's losses.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub ce: Var,
    pub ld: Option<Var>,
    pub hsd: Option<Var>,
    pub total: Var,
}

impl SampleLoss {
    pub fn values(&self, g: &Graph, cfg: &DistillConfig) -> DistillLosses {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        DistillLosses::compose(cfg, g.value(self.ce).item(), get(self.ld), get(self.hsd))
    }
}

/// `−log softmax(logits)[label]`.
pub fn graph_ce(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let c = g.value(logits).numel();
    if label >= c {
        return Err(Error::Domain(format!("label {label} out of range for {c} classes")));
    }
    let logp = g.log_softmax(logits, 1.0)?;
    let picked = g.pick(logp, label)?;
    Ok(g.scale(picked, -1.0))
}

/// Tempered KL between student logits (a graph node) and constant teacher
/// logits.
pub fn graph_ld(g: &mut Graph, student: Var, teacher: &Tensor, cfg: &DistillConfig) -> Result<Var> {
    if g.value(student).dims() != teacher.dims() {
        return Err(shape_err!(
            "student logits {:?} vs teacher logits {:?}",
            g.value(student).dims(),
            teacher.dims()
        ));
    }
    let temp = cfg.delta_temp;
    let student_first = cfg.kl_direction == KlDirection::StudentFirst;
    let kl = g.kl_div(student, teacher, temp, student_first)?;
    Ok(if cfg.temp_squared {
        g.scale(kl, temp * temp)
    } else {
        kl
    })
}

fn check_layers(student: &[&Tensor], teacher: &HiddenStates) -> Result<()> {
    if student.len() != teacher.layers.len() {
        return Err(contract_err!(
            "student has {} hidden states, teacher {}",
            student.len(),
            teacher.layers.len()
        ));
    }
    for (i, (s, t)) in student.iter().zip(&teacher.layers).enumerate() {
        if s.dims() != t.dims() {
            return Err(contract_err!(
                "hidden state {i}: student {:?} vs teacher {:?}",
                s.dims(),
                t.dims()
            ));
        }
    }
    Ok(())
}

/// `Σ_{i=1..N} mean((H_i^s − H_i^t)²)`; `student` holds H_0 … H_N.
pub fn graph_hsd(g: &mut Graph, student: &[Var], teacher: &HiddenStates) -> Result<Var> {
    let values: Vec<&Tensor> = student.iter().map(|&v| g.value(v)).collect();
    check_layers(&values, teacher)?;
    if student.len() < 2 {
        return Err(contract_err!("hidden-state loss needs at least one encoder layer"));
    }
    let mut total: Option<Var> = None;
    for (&s, t) in student.iter().zip(&teacher.layers).skip(1) {
        let t = g.constant(t.clone());
        let diff = g.sub(s, t)?;
        let sq = g.mul(diff, diff)?;
        let layer = g.mean(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Builds the full per-sample objective on `g`.
pub fn sample_loss(
    g: &mut Graph,
    cfg: &DistillConfig,
    logits: Var,
    hidden: &[Var],
    label: usize,
    teacher: Option<&TeacherTargets>,
) -> Result<SampleLoss> {
    let ce = graph_ce(g, logits, label)?;
    let teacher = match (cfg.needs_teacher(), teacher) {
        (true, None) => return Err(contract_err!("distillation terms enabled but no teacher outputs given")),
        (_, t) => t,
    };
    let ld = match (cfg.use_ld, teacher) {
        (true, Some(t)) => Some(graph_ld(g, logits, &t.logits, cfg)?),
        _ => None,
    };
    let hsd = match (cfg.use_hsd, teacher) {
        (true, Some(t)) => Some(graph_hsd(g, hidden, &t.hidden)?),
        _ => None,
    };
    let mkd = match (ld, hsd) {
        (Some(l), Some(h)) => {
            let h = g.scale(h, cfg.beta);
            Some(g.add(l, h)?)
        }
        (Some(l), None) => Some(l),
        (None, Some(h)) => Some(g.scale(h, cfg.beta)),
        (None, None) => None,
    };
    let total = match mkd {
        Some(m) => {
            let m = g.scale(m, cfg.alpha);
            g.add(ce, m)?
        }
        None => ce,
    };
    Ok(SampleLoss { ce, ld, hsd, total })
}

/// Cross-entropy of one logit vector.
pub fn loss_ce(logits: &Tensor, label: usize) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = graph_ce(&mut g, x, label)?;
    Ok(g.value(l).item())
}

/// Student-first tempered KL with no Δ² factor.
pub fn loss_ld(student: &Tensor, teacher: &Tensor, delta_temp: f32) -> Result<f32> {
    let cfg = DistillConfig {
        delta_temp,
        ..DistillConfig::default()
    };
    cfg.validate()?;
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = graph_ld(&mut g, s, teacher, &cfg)?;
    Ok(g.value(l).item())
}

/// Hidden-state loss between two complete sets of encoder outputs.
pub fn loss_hsd(student: &HiddenStates, teacher: &HiddenStates) -> Result<f32> {
    let mut g = Graph::new();
    let vars: Vec<Var> = student
        .layers
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let l = graph_hsd(&mut g, &vars, teacher)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = loss_ce(&vec1(&[0.3; 4]), 2).unwrap();
        assert!((uniform - 4f32.ln()).abs() < 1e-6);
        assert!(loss_ce(&vec1(&[100.0, 0.0, 0.0]), 0).unwrap() < 1e-6);
        assert!(matches!(
            loss_ce(&vec1(&[0.0, 1.0]), 2),
            Err(Error::Domain(_))
        ));
    }

    /// Two-class KL(p_s ‖ p_t) in f64, straight from the definition.
    fn kl_oracle(s: [f64; 2], t: [f64; 2], temp: f64) -> f64 {
        let sm = |x: [f64; 2]| {
            let e = [(x[0] / temp).exp(), (x[1] / temp).exp()];
            [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        };
        let (p, q) = (sm(s), sm(t));
        p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln()
    }

    #[test]
    fn ld_scalar_examples() {
        let s = vec1(&[2.0, 0.0]);
        let t = vec1(&[0.0, 2.0]);
        let at4 = loss_ld(&s, &t, 4.0).unwrap();
        let at1 = loss_ld(&s, &t, 1.0).unwrap();
        assert!((f64::from(at4) - kl_oracle([2.0, 0.0], [0.0, 2.0], 4.0)).abs() < 1e-6);
        assert!((f64::from(at1) - kl_oracle([2.0, 0.0], [0.0, 2.0], 1.0)).abs() < 1e-6);
        // closed form for this pair: 2·tanh(1/Δ)/Δ
        assert!((at4 - 0.5 * 0.25f32.tanh()).abs() < 1e-6);
        assert!((at1 - 2.0 * 1f32.tanh()).abs() < 1e-6);
        assert!(at1 > at4);
        assert_eq!(loss_ld(&s, &s, 4.0).unwrap(), 0.0);
        assert!(loss_ld(&s, &vec1(&[1.0, 2.0, 3.0]), 4.0).is_err());
    }

    #[test]
    fn hsd_closed_form() {
        let zeros = HiddenStates {
            layers: vec![Tensor::full(&[2, 3], 7.0), Tensor::zeros(&[2, 3])],
        };
        let ones = HiddenStates {
            layers: vec![Tensor::full(&[2, 3], -7.0), Tensor::ones(&[2, 3])],
        };
        // H_0 differs but is excluded
        assert_eq!(loss_hsd(&zeros, &ones).unwrap(), 1.0);
        let short = HiddenStates {
            layers: vec![Tensor::zeros(&[2, 3])],
        };
        assert!(matches!(loss_hsd(&zeros, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn composition_identities() {
        let cfg = DistillConfig {
            alpha: 0.7,
            beta: 3.0,
            ..DistillConfig::default()
        };
        let l = DistillLosses::compose(&cfg, 1.0, 0.25, 0.5);
        assert_eq!(l.l_mkd, 0.25 + 3.0 * 0.5);
        assert_eq!(l.l_total, 1.0 + 0.7 * l.l_mkd);
        let ce = DistillLosses::compose(&DistillConfig::ce_only(), 1.0, 0.25, 0.5);
        assert_eq!(ce.l_total, ce.l_ce);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            delta_temp: 0.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = DistillConfig {
            beta: -1.0,
            ..DistillConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
