//! Central finite-difference checks against [`Graph::backward`].
//!
//! The error reported for a set of coordinates is
//! `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`,
//! i.e. the worst deviation relative to the gradient's own scale. A
//! per-coordinate ratio is meaningless for coordinates whose true gradient is
//! zero, which are common (head locality, causal masks).

use crate::error::{contract_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smallest gradient scale treated as nonzero when normalizing.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
}

fn check_step(step: f32) -> Result<()> {
    if !(1e-4..=1e-2).contains(&step) {
        return Err(contract_err!("finite-difference step {step} outside [1e-4, 1e-2]"));
    }
    Ok(())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(grad)))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(contract_err!(
            "gradient check needs a scalar function, got dims {:?}",
            g.value(out).dims()
        ));
    }
    Ok((g, vars, out))
}

/// Scale-normalized worst deviation between two gradient vectors.
pub fn relative_error(analytic: &[f32], numeric: &[f32]) -> f32 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
        .max(SCALE_FLOOR);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (&a, &n)| m.max((f64::from(a) - f64::from(n)).abs()));
    (worst / scale) as f32
}

/// Checks the gradient of scalar `f` with respect to several inputs at once.
///
/// `coords` optionally restricts which flat coordinates are perturbed per
/// input (`None` means all of them); analytic and numeric vectors in the
/// report list the checked coordinates in input order.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor],
    step: f32,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let (mut g, vars, out) = eval_scalar(&f, inputs, true)?;
    g.backward(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords {
            Some(c) => &c[k],
            None => {
                all = (0..input.numel()).collect();
                &all
            }
        };
        let grad = g.grad(vars[k]).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for &i in idx {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + step;
            let (gp, _, op) = eval_scalar(&f, &probe, false)?;
            let plus = f64::from(gp.value(op).item());
            probe[k].data_mut()[i] = orig - step;
            let (gm, _, om) = eval_scalar(&f, &probe, false)?;
            let minus = f64::from(gm.value(om).item());
            probe[k].data_mut()[i] = orig;
            // the perturbation actually applied in f32
            let h = f64::from(orig + step) - f64::from(orig - step);
            numeric.push(((plus - minus) / h) as f32);
            analytic.push(grad[i]);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: relative_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

/// Max scale-relative error between backward() and central differences of
/// scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), step, None)?;
    Ok(report.max_rel_error)
}
