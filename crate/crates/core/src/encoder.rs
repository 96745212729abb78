//! Bidirectional selective-scan encoder block.
//!
//! One block maps a token sequence `H[T×D]` to a sequence of the same shape:
//!
//! ```text
//! n    = RMSNorm(H)
//! P    = n·W_in_x                      (T×E)
//! Q_fw = M_fw(silu(conv_fw(P)))
//! Q_bw = reverse(M_bw(silu(conv_bw(reverse(P)))))
//! g    = silu(n·W_in_z)                (or silu(H) in literal mode, E == D)
//! out  = (g ⊙ Q_fw + g ⊙ Q_bw)·W_out + H
//! ```
//!
//! where `M` is the selective scan whose step size, input and output
//! projections are computed from its own (convolved) input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// How the fused scan outputs are gated before the output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `silu(Linear_z(Norm(H)))`, a learned D→E gate projection.
    #[default]
    Projected,
    /// `silu(H)` applied directly; only valid when E == D.
    Literal,
}

/// Sizes shared by every block of one encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
    pub gate: GateMode,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d_model,
            self.d_inner,
            self.d_state,
            self.dt_rank,
            self.conv_width,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("block sizes must be positive: {self:?}")));
        }
        if self.gate == GateMode::Literal && self.d_inner != self.d_model {
            return Err(Error::Config(format!(
                "literal gate needs inner width == model width, got {} vs {}",
                self.d_inner, self.d_model
            )));
        }
        Ok(())
    }

    /// Learnable scalars in one direction's scan parameters.
    pub fn direction_params(&self) -> usize {
        let (e, s, r, k) = (self.d_inner, self.d_state, self.dt_rank, self.conv_width);
        e * k + e + e * (r + 2 * s) + r * e + e + e * s + e
    }

    /// Learnable scalars in one block.
    pub fn block_params(&self) -> usize {
        let (d, e) = (self.d_model, self.d_inner);
        let gate = match self.gate {
            GateMode::Projected => d * e,
            GateMode::Literal => 0,
        };
        d + d * e + gate + 2 * self.direction_params() + e * d
    }

    /// Multiply-accumulates of one block over `tokens` tokens.
    pub fn block_macs(&self, tokens: usize) -> u64 {
        let (d, e, s, r, k) = (
            self.d_model as u64,
            self.d_inner as u64,
            self.d_state as u64,
            self.dt_rank as u64,
            self.conv_width as u64,
        );
        let t = tokens as u64;
        let gate = match self.gate {
            GateMode::Projected => t * d * e,
            GateMode::Literal => 0,
        };
        // per scan step and state: decay·h, (Δ·B)·u, C·h
        let direction = t * e * k + t * e * (r + 2 * s) + t * r * e + 3 * t * e * s + t * e;
        t * d * e + gate + 2 * direction + t * e * d
    }
}

/// Scan parameters of one direction: causal depthwise conv, input-dependent
/// Δ/B/C projections, state matrix and skip.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// `[E×K]` depthwise kernel.
    pub conv_w: T,
    pub conv_b: T,
    /// `[E×(R+2S)]`, producing (Δ̂, B, C) per token.
    pub x_proj: T,
    /// `[R×E]` rank-R step-size projection.
    pub dt_w: T,
    pub dt_b: T,
    /// `[E×S]` log of −A; A = −exp(a_log) is strictly negative.
    pub a_log: T,
    /// `[E]`.
    pub d_skip: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VimBlockParams<T> {
    pub norm_gain: T,
    pub w_in_x: T,
    /// Absent in [`GateMode::Literal`].
    pub w_in_z: Option<T>,
    pub fw: SsmParams<T>,
    pub bw: SsmParams<T>,
    pub w_out: T,
}

impl<T> SsmParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SsmParams<U> {
        SsmParams {
            conv_w: f(&self.conv_w),
            conv_b: f(&self.conv_b),
            x_proj: f(&self.x_proj),
            dt_w: f(&self.dt_w),
            dt_b: f(&self.dt_b),
            a_log: f(&self.a_log),
            d_skip: f(&self.d_skip),
        }
    }
}

impl<T> VimBlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> VimBlockParams<U> {
        VimBlockParams {
            norm_gain: f(&self.norm_gain),
            w_in_x: f(&self.w_in_x),
            w_in_z: self.w_in_z.as_ref().map(&mut f),
            fw: self.fw.map(&mut f),
            bw: self.bw.map(&mut f),
            w_out: f(&self.w_out),
        }
    }
}

fn inverse_softplus(y: f32) -> f32 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams<ParamId> {
    fn init(set: &mut ParamSet, prefix: &str, dims: &BlockDims, rng: &mut impl Rng) -> Self {
        let (e, s, r, k) = (dims.d_inner, dims.d_state, dims.dt_rank, dims.conv_width);
        let conv_bound = 1.0 / (k as f32).sqrt();
        let conv_w = set.add(format!("{prefix}.conv_w"), Tensor::uniform(&[e, k], conv_bound, rng));
        let conv_b = set.add(format!("{prefix}.conv_b"), Tensor::uniform(&[e], conv_bound, rng));
        let x_proj = set.add(
            format!("{prefix}.x_proj"),
            Tensor::uniform(&[e, r + 2 * s], 1.0 / (e as f32).sqrt(), rng),
        );
        let dt_w = set.add(
            format!("{prefix}.dt_w"),
            Tensor::uniform(&[r, e], 1.0 / (r as f32).sqrt(), rng),
        );
        // initial step sizes log-uniform in [1e-3, 1e-1]
        let (lo, hi) = (1e-3f32.ln(), 1e-1f32.ln());
        let dt_b = Tensor::from_fn(&[e], |_| {
            let dt = (lo + (hi - lo) * rng.random::<f32>()).exp().max(1e-4);
            inverse_softplus(dt)
        });
        let dt_b = set.add(format!("{prefix}.dt_b"), dt_b);
        let a_log = set.add(
            format!("{prefix}.a_log"),
            Tensor::from_fn(&[e, s], |i| ((i % s) as f32 + 1.0).ln()),
        );
        let d_skip = set.add(format!("{prefix}.d_skip"), Tensor::ones(&[e]));
        Self {
            conv_w,
            conv_b,
            x_proj,
            dt_w,
            dt_b,
            a_log,
            d_skip,
        }
    }
}

impl VimBlockParams<ParamId> {
    /// Registers one block's parameters under `prefix` with the usual
    /// Mamba-style initialization.
    pub fn init(set: &mut ParamSet, prefix: &str, dims: &BlockDims, rng: &mut impl Rng) -> Self {
        let (d, e) = (dims.d_model, dims.d_inner);
        let in_bound = 1.0 / (d as f32).sqrt();
        let norm_gain = set.add(format!("{prefix}.norm"), Tensor::ones(&[d]));
        let w_in_x = set.add(format!("{prefix}.in_x"), Tensor::uniform(&[d, e], in_bound, rng));
        let w_in_z = match dims.gate {
            GateMode::Projected => Some(set.add(
                format!("{prefix}.in_z"),
                Tensor::uniform(&[d, e], in_bound, rng),
            )),
            GateMode::Literal => None,
        };
        let fw = SsmParams::init(set, &format!("{prefix}.fw"), dims, rng);
        let bw = SsmParams::init(set, &format!("{prefix}.bw"), dims, rng);
        let w_out = set.add(
            format!("{prefix}.out"),
            Tensor::uniform(&[e, d], 1.0 / (e as f32).sqrt(), rng),
        );
        Self {
            norm_gain,
            w_in_x,
            w_in_z,
            fw,
            bw,
            w_out,
        }
    }
}

/// One scan direction over `p[T×E]`, already in the direction's own order.
pub fn mamba_direction(
    g: &mut Graph,
    p: Var,
    params: &SsmParams<Var>,
    dims: &BlockDims,
) -> Result<Var> {
    let (r, s) = (dims.dt_rank, dims.d_state);
    let conv = g.dwconv_causal(p, params.conv_w, params.conv_b)?;
    let u = g.silu(conv);
    let x_dbl = g.matmul(u, params.x_proj)?;
    let dt_in = g.slice_cols(x_dbl, 0, r)?;
    let b = g.slice_cols(x_dbl, r, s)?;
    let c = g.slice_cols(x_dbl, r + s, s)?;
    let dt = g.matmul(dt_in, params.dt_w)?;
    let dt = g.add_bias(dt, params.dt_b)?;
    let delta = g.softplus(dt);
    let a = g.exp(params.a_log);
    let a = g.scale(a, -1.0);
    g.selective_scan(u, delta, a, b, c, params.d_skip)
}

/// Full residual block; `h_prev` is `[T×D]`.
pub fn vim_block(
    g: &mut Graph,
    h_prev: Var,
    params: &VimBlockParams<Var>,
    dims: &BlockDims,
) -> Result<Var> {
    let n = g.rms_norm(h_prev, params.norm_gain)?;
    let p_fw = g.matmul(n, params.w_in_x)?;
    let p_bw = g.reverse_rows(p_fw)?;
    let q_fw = mamba_direction(g, p_fw, &params.fw, dims)?;
    let q_bw_rev = mamba_direction(g, p_bw, &params.bw, dims)?;
    let q_bw = g.reverse_rows(q_bw_rev)?;
    let gate = match (dims.gate, params.w_in_z) {
        (GateMode::Projected, Some(w_z)) => {
            let z = g.matmul(n, w_z)?;
            g.silu(z)
        }
        (GateMode::Literal, None) => g.silu(h_prev),
        (mode, _) => {
            return Err(Error::Config(format!(
                "gate mode {mode:?} does not match the block's parameters"
            )))
        }
    };
    let u_fw = g.mul(gate, q_fw)?;
    let u_bw = g.mul(gate, q_bw)?;
    let fused = g.add(u_fw, u_bw)?;
    let proj = g.matmul(fused, params.w_out)?;
    g.add(proj, h_prev)
}
