//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Graph`] records one forward pass. Every op appends a node whose inputs
//! already exist, so append order is a topological order and [`Graph::backward`]
//! walks the tape once in reverse. Nodes that do not depend on any
//! gradient-requiring leaf are never visited by the backward sweep.
//!
//! Graphs are single-threaded and meant to be dropped after `backward`.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::kernels::{self, Conv2dGeom, ScanDims, ScanSaved};
use crate::tensor::Tensor;

/// Epsilon inside the RMS normalization.
pub const RMS_EPS: f32 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Clamp(Var, f32, f32),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    ReverseRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Pick(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    PixelShuffle(Var, usize),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    DwConvCausal {
        x: Var,
        w: Var,
        b: Var,
    },
    Scan {
        inputs: [Var; 6],
        saved: ScanSaved,
    },
    LogSoftmax(Var, f32),
    Softmax(Var, f32),
    /// Gradient of the scalar output with respect to `x`, computed with the value.
    KlDiv { x: Var, dx: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn same_dims(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn rank2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        &[r, c] => Ok((r, c)),
        d => Err(shape_err!("{op}: expected a rank-2 tensor, got {d:?}")),
    }
}

fn rank3(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[a, b, c] => Ok((a, b, c)),
        d => Err(shape_err!("{op}: expected a rank-3 tensor, got {d:?}")),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.dims().last().copied().unwrap_or(1)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + kernels::exp_approx(-x))
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -15.0 {
        kernels::exp_approx(x)
    } else {
        (1.0 + kernels::exp_approx(x)).ln()
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise `(x/T) − logsumexp(x/T)` over the last dim.
fn log_softmax_rows(x: &[f32], width: usize, temperature: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let lse = row
            .iter()
            .map(|&v| (v / temperature - max).exp())
            .sum::<f32>()
            .ln()
            + max;
        out.extend(row.iter().map(|&v| v / temperature - lse));
    }
    out
}

/// Row-wise tempered softmax with max subtraction.
pub fn softmax_values(x: &[f32], width: usize, temperature: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let start = out.len();
        out.extend(row.iter().map(|&v| (v / temperature - max).exp()));
        let sum: f32 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn check_temperature(temperature: f32) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul lhs", self.value(a))?;
        let (k2, n) = rank2("matmul rhs", self.value(b))?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims disagree: lhs is {m}×{k}, rhs is {k2}×{n}"
            ));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("add", self.value(a), self.value(b))?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.dims(a), out)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("sub", self.value(a), self.value(b))?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.dims(a), out)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("mul", self.value(a), self.value(b))?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.dims(a), out)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a `[n]` bias to every row of a `[..×n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.value(x));
        if self.dims(b) != [n] {
            return Err(shape_err!(
                "add_bias: bias {:?} does not match last dim {n} of {:?}",
                self.dims(b),
                self.dims(x)
            ));
        }
        let bias = self.data(b);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.any_needs(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.dims(x), out).expect("same dims");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, factor), needs)
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.dims(x), out).expect("same dims");
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    /// x·sigmoid(x).
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// ln(1 + eˣ), linear above 20.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where no clamping happened.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f32>() / d.len() as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(shape_err!("pick: index {index} out of range for {n} elements"));
        }
        let v = self.data(x)[index];
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, index), needs))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(x))?;
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    /// Reverses the row (token) order of a `[T×E]` sequence.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rank2("reverse_rows", self.value(x))?;
        let out = self.data(x).rchunks(c).flatten().copied().collect();
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::ReverseRows(x), needs))
    }

    /// Stacks rank-2 tensors with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_rows: no inputs"))?;
        let (_, width) = rank2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rank2("concat_rows", self.value(p))?;
            if c != width {
                return Err(shape_err!("concat_rows: widths {width} and {c} differ"));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(&[rows, width], out)?;
        let needs = self.any_needs(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_rows", self.value(x))?;
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows: {start}..{} out of {r} rows", start + len));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceRows(x, start), needs))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_cols", self.value(x))?;
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols: {start}..{} out of {c} cols", start + len));
        }
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[r, len], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceCols(x, start), needs))
    }

    // ---- image ops ------------------------------------------------------

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Conv2dGeom> {
        let (c, h, wd) = rank3("conv2d input", self.value(x))?;
        let (d, c2, k, k2) = match self.dims(w) {
            &[d, c2, k, k2] => (d, c2, k, k2),
            other => return Err(shape_err!("conv2d kernel must be rank 4, got {other:?}")),
        };
        if c != c2 || k != k2 {
            return Err(shape_err!(
                "conv2d kernel {:?} incompatible with input {:?}",
                self.dims(w),
                self.dims(x)
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!(
                "conv2d kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        Ok(Conv2dGeom {
            c,
            h,
            w: wd,
            d,
            k,
            stride,
            pad,
            ho: kernels::conv_out(h, k, stride, pad),
            wo: kernels::conv_out(wd, k, stride, pad),
        })
    }

    /// Cross-correlation of `x[C×H×W]` with `w[D×C×J×J]` (no kernel flip).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w));
        let t = Tensor::new(&[geom.d, geom.ho, geom.wo], out)?;
        let needs = self.any_needs(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, needs))
    }

    fn channel_check(&self, op: &str, x: Var, p: Var) -> Result<(usize, usize)> {
        let (c, h, w) = rank3(op, self.value(x))?;
        if self.dims(p) != [c] {
            return Err(shape_err!("{op}: parameter {:?} vs {c} channels", self.dims(p)));
        }
        Ok((c, h * w))
    }

    /// Adds `b[C]` to every pixel of channel c in `x[C×H×W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, plane) = self.channel_check("channel_bias", x, b)?;
        let bias = self.data(b);
        let out = self
            .data(x)
            .chunks(plane)
            .zip(bias)
            .flat_map(|(ch, &bv)| ch.iter().map(move |v| v + bv))
            .collect();
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.any_needs(&[x, b]);
        Ok(self.push(t, Op::ChannelBias(x, b), needs))
    }

    /// Multiplies channel c of `x[C×H×W]` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, plane) = self.channel_check("channel_scale", x, s)?;
        let scale = self.data(s);
        let out = self
            .data(x)
            .chunks(plane)
            .zip(scale)
            .flat_map(|(ch, &sv)| ch.iter().map(move |v| v * sv))
            .collect();
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.any_needs(&[x, s]);
        Ok(self.push(t, Op::ChannelScale(x, s), needs))
    }

    /// Depth-to-space `[r²C×H×W] → [C×rH×rW]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = rank3("pixel_shuffle", self.value(x))?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err!(
                "pixel_shuffle: {c} channels not divisible by r² = {}",
                r * r
            ));
        }
        let c_out = c / (r * r);
        let out = kernels::pixel_shuffle(self.data(x), c_out, h, w, r);
        let t = Tensor::new(&[c_out, h * r, w * r], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::PixelShuffle(x, r), needs))
    }

    // ---- sequence ops ---------------------------------------------------

    /// Per-token `x / sqrt(mean(x²) + ε) · gain` over the last dim.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        if self.dims(gain) != [d] {
            return Err(shape_err!(
                "rms_norm: gain {:?} does not match last dim {d}",
                self.dims(gain)
            ));
        }
        let g = self.data(gain);
        let mut inv_rms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, gv)| v * r * gv));
        }
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.any_needs(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, needs))
    }

    /// Causal depthwise convolution of `x[T×E]` with `w[E×K]`, bias `b[E]`:
    /// token t sees tokens t−K+1..=t (zero left padding).
    pub fn dwconv_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tl, e) = rank2("dwconv_causal input", self.value(x))?;
        let (e2, k) = rank2("dwconv_causal kernel", self.value(w))?;
        if e != e2 || self.dims(b) != [e] {
            return Err(shape_err!(
                "dwconv_causal: input {:?}, kernel {:?}, bias {:?}",
                self.dims(x),
                self.dims(w),
                self.dims(b)
            ));
        }
        let out = kernels::dwconv_causal_forward(self.data(x), self.data(w), self.data(b), tl, e, k);
        let t = Tensor::new(&[tl, e], out)?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(t, Op::DwConvCausal { x, w, b }, needs))
    }

    /// Selective scan over `u[T×E]` with step sizes `delta[T×E]`, state
    /// matrix `a[E×S]`, input/output projections `b, c[T×S]` and skip `d[E]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let (tl, e) = rank2("scan u", self.value(u))?;
        let (e2, s) = rank2("scan A", self.value(a))?;
        let ok = self.dims(delta) == [tl, e]
            && e2 == e
            && self.dims(b) == [tl, s]
            && self.dims(c) == [tl, s]
            && self.dims(d) == [e];
        if !ok {
            return Err(shape_err!(
                "selective_scan: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                self.dims(u),
                self.dims(delta),
                self.dims(a),
                self.dims(b),
                self.dims(c),
                self.dims(d)
            ));
        }
        if let Some(bad) = self.data(delta).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!(
                "selective_scan: step sizes must be positive, found {bad}"
            )));
        }
        let dims = ScanDims { t: tl, e, s };
        let inputs = [u, delta, a, b, c, d];
        let needs = self.any_needs(&inputs);
        let (y, saved) = kernels::scan_forward(
            &dims,
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
            needs,
        );
        let t = Tensor::new(&[tl, e], y)?;
        Ok(self.push(t, Op::Scan { inputs, saved }, needs))
    }

    // ---- probabilities --------------------------------------------------

    /// Row-wise log-softmax of `x / temperature` over the last dim.
    pub fn log_softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        let w = last_dim(self.value(x));
        let out = log_softmax_rows(self.data(x), w, temperature);
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x, temperature), needs))
    }

    /// Row-wise softmax of `x / temperature` over the last dim.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        let w = last_dim(self.value(x));
        let out = softmax_values(self.data(x), w, temperature);
        let t = Tensor::new(self.dims(x), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax(x, temperature), needs))
    }

    /// KL divergence between `softmax(x/T)` and `softmax(teacher/T)`, with
    /// both vectors taken as one distribution each. `student_first` selects
    /// KL(p_x ‖ p_teacher), otherwise KL(p_teacher ‖ p_x). Evaluated in `f64`
    /// so that small divergences keep their relative precision.
    pub fn kl_div(&mut self, x: Var, teacher: &Tensor, temperature: f32, student_first: bool) -> Result<Var> {
        check_temperature(temperature)?;
        same_dims("kl_div", self.value(x), teacher)?;
        let temp = f64::from(temperature);
        let log_probs = |v: &[f32]| -> Vec<f64> {
            let z: Vec<f64> = v.iter().map(|&x| f64::from(x) / temp).collect();
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            z.iter().map(|v| v - lse).collect()
        };
        let ls = log_probs(self.data(x));
        let lt = log_probs(teacher.data());
        let (kl, dx): (f64, Vec<f32>) = if student_first {
            let kl = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            let dx = ls
                .iter()
                .zip(&lt)
                .map(|(a, b)| (a.exp() * ((a - b) - kl) / temp) as f32)
                .collect();
            (kl, dx)
        } else {
            let kl = ls.iter().zip(&lt).map(|(a, b)| b.exp() * (b - a)).sum::<f64>();
            let dx = ls.iter().zip(&lt).map(|(a, b)| ((a.exp() - b.exp()) / temp) as f32).collect();
            (kl, dx)
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(kl as f32), Op::KlDiv { x, dx }, needs))
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor shaped like its value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.dims(v), g.to_vec()).expect("grad matches value"))
    }

    /// Copies the gradient of leaf `v` into the gradient slot of `t`.
    pub fn export_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => {
                t.clear_grad();
                Ok(())
            }
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f32], &Graph)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let mut slot = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(&mut slot, self);
        self.grads[v.0] = Some(slot);
    }

    /// Populates gradients of every gradient-requiring node with respect to
    /// the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f32]) {
        let out_dims = self.nodes[i].value.dims().to_vec();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(a)[0], self.dims(a)[1]);
                let n = self.dims(b)[1];
                self.accumulate(a, |ga, gr| {
                    // ga[m×k] += g[m×n] · bᵀ
                    kernels::gemm(m, n, k, g, (n, 1), gr.data(b), (1, n), 1.0, ga);
                });
                self.accumulate(b, |gb, gr| {
                    // gb[k×n] += aᵀ · g
                    kernels::gemm(k, m, n, gr.data(a), (1, k), g, (n, 1), 1.0, gb);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |ga, gr| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(gr.data(b)) {
                        *d += s * y;
                    }
                });
                self.accumulate(b, |gb, gr| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(gr.data(a)) {
                        *d += s * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(x, |gx, _| add_into(gx, g));
                self.accumulate(b, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * f));
            }
            Op::Silu(x) => self.accumulate(x, |gx, gr| {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(gr.data(x)) {
                    let sg = sigmoid(v);
                    *d += s * sg * (1.0 + v * (1.0 - sg));
                }
            }),
            Op::Softplus(x) => self.accumulate(x, |gx, gr| {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(gr.data(x)) {
                    *d += s * sigmoid(v);
                }
            }),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(x, |gx, _| {
                    for ((d, s), e) in gx.iter_mut().zip(g).zip(&y) {
                        *d += s * e;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => self.accumulate(x, |gx, gr| {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(gr.data(x)) {
                    if v > lo && v < hi {
                        *d += s;
                    }
                }
            }),
            Op::Sum(x) => self.accumulate(x, |gx, _| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => self.accumulate(x, |gx, _| {
                let s = g[0] / gx.len() as f32;
                gx.iter_mut().for_each(|d| *d += s);
            }),
            Op::Pick(x, idx) => self.accumulate(x, |gx, _| gx[idx] += g[0]),
            Op::Reshape(x) => self.accumulate(x, |gx, _| add_into(gx, g)),
            Op::Transpose(x) => {
                let (r, c) = (self.dims(x)[0], self.dims(x)[1]);
                self.accumulate(x, |gx, _| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ReverseRows(x) => {
                let c = self.dims(x)[1];
                self.accumulate(x, |gx, _| {
                    for (d, s) in gx.chunks_mut(c).zip(g.rchunks(c)) {
                        add_into(d, s);
                    }
                });
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(p, |gp, _| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.dims(x)[1];
                self.accumulate(x, |gx, _| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let c = self.dims(x)[1];
                let len = out_dims[1];
                self.accumulate(x, |gx, _| {
                    for (row, src) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut row[start..start + len], src);
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geom = self.conv_geom(x, w, stride, pad).expect("validated in forward");
                let mut gx_buf = self.needs(x).then(|| vec![0.0; self.value(x).numel()]);
                let mut gw_buf = self.needs(w).then(|| vec![0.0; self.value(w).numel()]);
                kernels::conv2d_backward(
                    &geom,
                    self.data(x),
                    self.data(w),
                    g,
                    gx_buf.as_deref_mut(),
                    gw_buf.as_deref_mut(),
                );
                if let Some(buf) = gx_buf {
                    self.accumulate(x, |gx, _| add_into(gx, &buf));
                }
                if let Some(buf) = gw_buf {
                    self.accumulate(w, |gw, _| add_into(gw, &buf));
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(x, |gx, _| add_into(gx, g));
                let plane = out_dims[1] * out_dims[2];
                self.accumulate(b, |gb, _| {
                    for (d, ch) in gb.iter_mut().zip(g.chunks(plane)) {
                        *d += ch.iter().sum::<f32>();
                    }
                });
            }
            Op::ChannelScale(x, s) => {
                let plane = out_dims[1] * out_dims[2];
                self.accumulate(x, |gx, gr| {
                    for ((d, gs), &sv) in gx.chunks_mut(plane).zip(g.chunks(plane)).zip(gr.data(s)) {
                        d.iter_mut().zip(gs).for_each(|(dv, gv)| *dv += gv * sv);
                    }
                });
                self.accumulate(s, |gsc, gr| {
                    for ((d, gs), xs) in gsc.iter_mut().zip(g.chunks(plane)).zip(gr.data(x).chunks(plane)) {
                        *d += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f32>();
                    }
                });
            }
            Op::PixelShuffle(x, r) => {
                let (c_out, oh, ow) = (out_dims[0], out_dims[1], out_dims[2]);
                let back = kernels::pixel_unshuffle(g, c_out, oh / r, ow / r, r);
                self.accumulate(x, |gx, _| add_into(gx, &back));
            }
            Op::RmsNorm { x, gain, ref inv_rms } => {
                let d = *out_dims.last().unwrap_or(&1);
                self.accumulate(x, |gx, gr| {
                    let gn = gr.data(gain);
                    for (((dx, gs), xs), &r) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(gr.data(x).chunks(d))
                        .zip(inv_rms)
                    {
                        let dot: f32 = gs.iter().zip(gn).zip(xs).map(|((a, b), c)| a * b * c).sum();
                        let coef = r * r * r * dot / d as f32;
                        for j in 0..d {
                            dx[j] += r * gn[j] * gs[j] - coef * xs[j];
                        }
                    }
                });
                self.accumulate(gain, |gg, gr| {
                    for ((gs, xs), &r) in g.chunks(d).zip(gr.data(x).chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += gs[j] * xs[j] * r;
                        }
                    }
                });
            }
            Op::DwConvCausal { x, w, b } => {
                let (tl, e) = (self.dims(x)[0], self.dims(x)[1]);
                let k = self.dims(w)[1];
                let mut gx = self.needs(x).then(|| vec![0.0; tl * e]);
                let mut gw = self.needs(w).then(|| vec![0.0; e * k]);
                let mut gb = self.needs(b).then(|| vec![0.0; e]);
                kernels::dwconv_causal_backward(
                    self.data(x),
                    self.data(w),
                    g,
                    tl,
                    e,
                    k,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(x, gx), (w, gw), (b, gb)] {
                    if let Some(buf) = buf {
                        self.accumulate(v, |dst, _| add_into(dst, &buf));
                    }
                }
            }
            Op::Scan { inputs, ref saved } => {
                let [u, delta, a, b, c, d] = inputs;
                let dims = ScanDims {
                    t: self.dims(u)[0],
                    e: self.dims(u)[1],
                    s: self.dims(a)[1],
                };
                let grads = kernels::scan_backward(
                    &dims,
                    self.data(u),
                    self.data(delta),
                    self.data(a),
                    self.data(b),
                    self.data(c),
                    self.data(d),
                    saved,
                    g,
                );
                let pairs = [
                    (u, grads.u),
                    (delta, grads.delta),
                    (a, grads.a),
                    (b, grads.b),
                    (c, grads.c),
                    (d, grads.d),
                ];
                for (v, buf) in pairs {
                    self.accumulate(v, |dst, _| add_into(dst, &buf));
                }
            }
            Op::LogSoftmax(x, temp) => {
                let w = *out_dims.last().unwrap_or(&1);
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(x, |gx, _| {
                    for ((dx, gs), ys) in gx.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let total: f32 = gs.iter().sum();
                        for j in 0..w {
                            dx[j] += (gs[j] - ys[j].exp() * total) / temp;
                        }
                    }
                });
            }
            Op::Softmax(x, temp) => {
                let w = *out_dims.last().unwrap_or(&1);
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(x, |gx, _| {
                    for ((dx, gs), ys) in gx.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: f32 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dx[j] += ys[j] * (gs[j] - dot) / temp;
                        }
                    }
                });
            }
            Op::KlDiv { x, ref dx } => {
                let gk = g[0];
                let dk = dx.clone();
                self.accumulate(x, |gx, _| {
                    for (d, v) in gx.iter_mut().zip(&dk) {
                        *d += gk * v;
                    }
                });
            }
        }
    }
}
