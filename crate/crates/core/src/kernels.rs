//! Allocation-light numeric kernels behind the graph ops.
//!
//! Everything here works on flat row-major slices with explicit shapes.
//! Shape validation happens in [`crate::graph`]; these functions assume it.

/// `c = op(a)·op(b) + beta·c` with explicit row/column strides, `c` dense `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every offset sgemm can touch in a, b and c.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c);
    c
}

/// Range-reduced polynomial `exp`, written so the compiler can vectorize it.
/// Relative error stays below 2e-7 on `[-87, 88]`.
#[inline(always)]
pub(crate) fn exp_approx(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5·2²³ rounds to the nearest integer and leaves it in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let v = x * LOG2E + SHIFTER;
    let n = v - SHIFTER;
    let ni = v.to_bits() as i32 - SHIFTER.to_bits() as i32;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5e-1;
    let p = p * r * r + r + 1.0;
    let scale = f32::from_bits(((ni + 127) as u32) << 23);
    p * scale
}

/// Output spatial extent of a strided, padded convolution.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

pub(crate) struct Conv2dGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits every (column-row, output position, input offset) triple that
    /// lands inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * p + oy * self.wo + ox, src, row);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let mut cols = vec![0.0; self.patch_len() * self.positions()];
        self.for_each_tap(|dst, src, _| cols[dst] = x[src]);
        cols
    }
}

/// Cross-correlation of `x[C×H×W]` with `w[D×C×K×K]`, returning `D×Ho×Wo`.
pub(crate) fn conv2d_forward(geom: &Conv2dGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
    let cols = geom.im2col(x);
    matmul(w, &cols, geom.d, geom.patch_len(), geom.positions())
}

/// Accumulates input and kernel gradients of [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    geom: &Conv2dGeom,
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_w: Option<&mut [f32]>,
) {
    let (pl, p, d) = (geom.patch_len(), geom.positions(), geom.d);
    if let Some(gw) = grad_w {
        let cols = geom.im2col(x);
        // gw[d×pl] += g[d×p] · colsᵀ
        gemm(d, p, pl, grad_out, (p, 1), &cols, (1, p), 1.0, gw);
    }
    if let Some(gx) = grad_x {
        let mut dcols = vec![0.0; pl * p];
        // dcols[pl×p] = wᵀ · g
        gemm(pl, d, p, w, (1, pl), grad_out, (p, 1), 0.0, &mut dcols);
        geom.for_each_tap(|col, src, _| gx[src] += dcols[col]);
    }
}

/// Depth-to-space: `[r²C×H×W] → [C×rH×rW]`, out[c, h·r+i, w·r+j] = in[c·r²+i·r+j, h, w].
pub(crate) fn pixel_shuffle(x: &[f32], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    let (oh, ow) = (h * r, w * r);
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src_c = c * r * r + i * r + j;
                for y in 0..h {
                    let src = (src_c * h + y) * w;
                    let dst = (c * oh + y * r + i) * ow + j;
                    for xx in 0..w {
                        out[dst + xx * r] = x[src + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]: `[C×rH×rW] → [r²C×H×W]`.
pub(crate) fn pixel_unshuffle(x: &[f32], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    let (oh, ow) = (h * r, w * r);
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let dst_c = c * r * r + i * r + j;
                for y in 0..h {
                    let dst = (dst_c * h + y) * w;
                    let src = (c * oh + y * r + i) * ow + j;
                    for xx in 0..w {
                        out[dst + xx] = x[src + xx * r];
                    }
                }
            }
        }
    }
    out
}

/// Causal depthwise conv over time: y[t,e] = b[e] + Σ_k w[e,k]·x[t+k−(K−1), e].
pub(crate) fn dwconv_causal_forward(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    t_len: usize,
    e: usize,
    k: usize,
) -> Vec<f32> {
    let mut y = vec![0.0; t_len * e];
    for t in 0..t_len {
        let row = &mut y[t * e..(t + 1) * e];
        row.copy_from_slice(b);
        for tap in 0..k {
            let Some(src_t) = (t + tap).checked_sub(k - 1) else {
                continue;
            };
            let src = &x[src_t * e..(src_t + 1) * e];
            for ch in 0..e {
                row[ch] += w[ch * k + tap] * src[ch];
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv_causal_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    t_len: usize,
    e: usize,
    k: usize,
    mut gx: Option<&mut [f32]>,
    mut gw: Option<&mut [f32]>,
    mut gb: Option<&mut [f32]>,
) {
    for t in 0..t_len {
        let grow = &g[t * e..(t + 1) * e];
        if let Some(gb) = gb.as_deref_mut() {
            for ch in 0..e {
                gb[ch] += grow[ch];
            }
        }
        for tap in 0..k {
            let Some(src_t) = (t + tap).checked_sub(k - 1) else {
                continue;
            };
            if let Some(gx) = gx.as_deref_mut() {
                let dst = &mut gx[src_t * e..(src_t + 1) * e];
                for ch in 0..e {
                    dst[ch] += w[ch * k + tap] * grow[ch];
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                let src = &x[src_t * e..(src_t + 1) * e];
                for ch in 0..e {
                    gw[ch * k + tap] += grow[ch] * src[ch];
                }
            }
        }
    }
}

/// Exponents of the discretized state matrix are clamped to this range.
pub const SCAN_EXP_CLAMP: f32 = 30.0;

pub(crate) struct ScanDims {
    pub t: usize,
    pub e: usize,
    pub s: usize,
}

/// Forward activations the scan backward pass needs.
#[derive(Clone, Debug)]
pub(crate) struct ScanSaved {
    /// h_t for every step, channel-major `[E×T×S]`.
    pub states: Vec<f32>,
    /// exp(clamp(Δ·A)) for every step, `[E×T×S]`.
    pub decay: Vec<f32>,
}

/// Eight lanes processed together. Every op is a fixed-length loop, which
/// the compiler turns into a single vector instruction.
#[derive(Clone, Copy)]
struct F8([f32; 8]);

impl F8 {
    #[inline(always)]
    fn load(x: &[f32]) -> Self {
        F8(x[..8].try_into().expect("eight lanes"))
    }

    #[inline(always)]
    fn splat(v: f32) -> Self {
        F8([v; 8])
    }

    #[inline(always)]
    fn store(self, x: &mut [f32]) {
        x[..8].copy_from_slice(&self.0);
    }

    #[inline(always)]
    #[allow(clippy::needless_range_loop)]
    fn map(self, f: impl Fn(f32) -> f32) -> Self {
        let mut r = [0.0; 8];
        for l in 0..8 {
            r[l] = f(self.0[l]);
        }
        F8(r)
    }

    #[inline(always)]
    #[allow(clippy::needless_range_loop)]
    fn zip(self, o: Self, f: impl Fn(f32, f32) -> f32) -> Self {
        let mut r = [0.0; 8];
        for l in 0..8 {
            r[l] = f(self.0[l], o.0[l]);
        }
        F8(r)
    }

    #[inline(always)]
    fn add(self, o: Self) -> Self {
        self.zip(o, |x, y| x + y)
    }

    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        self.zip(o, |x, y| x * y)
    }

    /// Folds the lanes, then adds a scalar tail.
    #[inline(always)]
    fn reduce(self, tail: f32) -> f32 {
        let l = self.0;
        let q = [l[0] + l[4], l[1] + l[5], l[2] + l[6], l[3] + l[7]];
        (q[0] + q[2]) + (q[1] + q[3]) + tail
    }
}

#[inline(always)]
fn scan_decay(dt: f32, a: f32) -> f32 {
    exp_approx((dt * a).clamp(-SCAN_EXP_CLAMP, SCAN_EXP_CLAMP))
}

/// Selective scan with zero-order-hold decay and Euler input:
/// h_t = exp(Δ_t·A) ⊙ h_{t−1} + Δ_t·B_t·u_t, y_t = ⟨C_t, h_t⟩ + D·u_t.
///
/// Channels are independent, so each one runs its whole time loop with its
/// state kept in a small local buffer. The state axis goes eight lanes at a
/// time with a scalar tail. States and decays are only stored when `save`
/// is set.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn scan_forward_body(
    dims: &ScanDims,
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    b: &[f32],
    c: &[f32],
    d: &[f32],
    save: bool,
) -> (Vec<f32>, ScanSaved) {
    let ScanDims { t: tl, e, s } = *dims;
    let (blocks, body) = (s / 8, s / 8 * 8);
    let stored = if save { tl * e * s } else { 0 };
    let mut y = vec![0.0; tl * e];
    // filled in (channel, step) order, which is exactly the storage order
    let mut states = Vec::with_capacity(stored);
    let mut decay = Vec::with_capacity(stored);
    let mut h = vec![0.0f32; s];
    for ch in 0..e {
        let arow = &a[ch * s..(ch + 1) * s];
        h.fill(0.0);
        for t in 0..tl {
            let i = t * e + ch;
            let (ut, dt) = (u[i], delta[i]);
            let du = dt * ut;
            let brow = &b[t * s..(t + 1) * s];
            let crow = &c[t * s..(t + 1) * s];
            let mut lanes = F8::splat(0.0);
            for k in 0..blocks {
                let r = k * 8..k * 8 + 8;
                let zk = F8::load(&arow[r.clone()]).map(|av| scan_decay(dt, av));
                let bk = F8::load(&brow[r.clone()]).map(|bv| du * bv);
                let hk = zk.mul(F8::load(&h[r.clone()])).add(bk);
                hk.store(&mut h[r.clone()]);
                if save {
                    states.extend_from_slice(&hk.0);
                    decay.extend_from_slice(&zk.0);
                }
                lanes = lanes.add(F8::load(&crow[r]).mul(hk));
            }
            let mut tail = 0.0;
            for j in body..s {
                let z = scan_decay(dt, arow[j]);
                h[j] = z * h[j] + du * brow[j];
                tail += crow[j] * h[j];
                if save {
                    states.push(h[j]);
                    decay.push(z);
                }
            }
            y[i] = lanes.reduce(tail) + d[ch] * ut;
        }
    }
    (y, ScanSaved { states, decay })
}

/// Gradients of [`scan_forward`] with respect to every input.
pub(crate) struct ScanGrads {
    pub u: Vec<f32>,
    pub delta: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub c: Vec<f32>,
    pub d: Vec<f32>,
}

/// One state element of the backward step. Returns the updated
/// `(dh, ∂b, ∂c, gz)` where `gz` is the gradient reaching Δ·A through the decay.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn scan_backward_lane(
    dh: f32,
    gb: f32,
    gc: f32,
    gyt: f32,
    du: f32,
    h: f32,
    c: f32,
) -> (f32, f32, f32) {
    let dh = dh + gyt * c;
    (dh, gb + dh * du, gc + gyt * h)
}

#[inline(always)]
fn decay_grad(dh: f32, prev: f32, z: f32, dt: f32, a: f32) -> f32 {
    let inside = (dt * a).abs() <= SCAN_EXP_CLAMP;
    if inside {
        dh * prev * z
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn scan_backward_body(
    dims: &ScanDims,
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    b: &[f32],
    c: &[f32],
    d: &[f32],
    saved: &ScanSaved,
    gy: &[f32],
) -> ScanGrads {
    let ScanDims { t: tl, e, s } = *dims;
    let (blocks, body) = (s / 8, s / 8 * 8);
    let mut g = ScanGrads {
        u: vec![0.0; tl * e],
        delta: vec![0.0; tl * e],
        a: vec![0.0; e * s],
        b: vec![0.0; tl * s],
        c: vec![0.0; tl * s],
        d: vec![0.0; e],
    };
    // dL/dh_t, carried backwards through the decay
    let mut dh = vec![0.0f32; s];
    for ch in 0..e {
        let arow = &a[ch * s..(ch + 1) * s];
        let ga = &mut g.a[ch * s..(ch + 1) * s];
        dh.fill(0.0);
        let mut gd = 0.0;
        for t in (0..tl).rev() {
            let i = t * e + ch;
            let (gyt, ut, dt) = (gy[i], u[i], delta[i]);
            let du = dt * ut;
            gd += gyt * ut;
            let k0 = (ch * tl + t) * s;
            let hrow = &saved.states[k0..k0 + s];
            let zrow = &saved.decay[k0..k0 + s];
            // h_{t−1}; zero before the first step, where it drops out anyway
            let prow = if t > 0 { &saved.states[k0 - s..k0] } else { hrow };
            let live = if t > 0 { 1.0 } else { 0.0 };
            let brow = &b[t * s..(t + 1) * s];
            let crow = &c[t * s..(t + 1) * s];
            let gb = &mut g.b[t * s..(t + 1) * s];
            let gc = &mut g.c[t * s..(t + 1) * s];
            // the input term Δ·u·B contributes ⟨dh, B⟩ to both Δ and u
            let (mut hb, mut za) = (F8::splat(0.0), F8::splat(0.0));
            for k in 0..blocks {
                let r = k * 8..k * 8 + 8;
                let mut out = [[0.0f32; 8]; 4];
                let (dhk, gbk, gck) =
                    (F8::load(&dh[r.clone()]), F8::load(&gb[r.clone()]), F8::load(&gc[r.clone()]));
                let (hk, ck, bk) =
                    (F8::load(&hrow[r.clone()]), F8::load(&crow[r.clone()]), F8::load(&brow[r.clone()]));
                let (pk, zk, ak) =
                    (F8::load(&prow[r.clone()]), F8::load(&zrow[r.clone()]), F8::load(&arow[r.clone()]));
                #[allow(clippy::needless_range_loop)]
                for l in 0..8 {
                    let (dhv, gbv, gcv) = scan_backward_lane(dhk.0[l], gbk.0[l], gck.0[l], gyt, du, hk.0[l], ck.0[l]);
                    out[0][l] = dhv;
                    out[1][l] = gbv;
                    out[2][l] = gcv;
                    out[3][l] = live * decay_grad(dhv, pk.0[l], zk.0[l], dt, ak.0[l]);
                }
                let (dhv, zg) = (F8(out[0]), F8(out[3]));
                F8(out[1]).store(&mut gb[r.clone()]);
                F8(out[2]).store(&mut gc[r.clone()]);
                hb = hb.add(dhv.mul(bk));
                za = za.add(zg.mul(ak));
                F8::load(&ga[r.clone()]).add(zg.map(|v| v * dt)).store(&mut ga[r.clone()]);
                dhv.mul(zk).store(&mut dh[r]);
            }
            let (mut hb_tail, mut za_tail) = (0.0, 0.0);
            for j in body..s {
                let (dhv, gbv, gcv) = scan_backward_lane(dh[j], gb[j], gc[j], gyt, du, hrow[j], crow[j]);
                gb[j] = gbv;
                gc[j] = gcv;
                let zg = live * decay_grad(dhv, prow[j], zrow[j], dt, arow[j]);
                hb_tail += dhv * brow[j];
                za_tail += zg * arow[j];
                ga[j] += zg * dt;
                dh[j] = dhv * zrow[j];
            }
            let hb = hb.reduce(hb_tail);
            g.u[i] = gyt * d[ch] + hb * dt;
            g.delta[i] = hb * ut + za.reduce(za_tail);
        }
        g.d[ch] = gd;
    }
    g
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

/// Defines `$name` as `$body` compiled twice, once with AVX2+FMA enabled,
/// and picks the wide version at run time when the CPU supports it. Rust
/// never contracts `a*b + c` into an FMA on its own, so both versions
/// round identically.
macro_rules! dispatch {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) -> $ret:ty => $body:ident) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if has_avx2_fma() {
                    // SAFETY: the required CPU features were detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch! {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn scan_forward(
        dims: &ScanDims,
        u: &[f32],
        delta: &[f32],
        a: &[f32],
        b: &[f32],
        c: &[f32],
        d: &[f32],
        save: bool,
    ) -> (Vec<f32>, ScanSaved) => scan_forward_body
}

dispatch! {
    /// Gradients of [`scan_forward`] by reverse-time accumulation of dL/dh.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn scan_backward(
        dims: &ScanDims,
        u: &[f32],
        delta: &[f32],
        a: &[f32],
        b: &[f32],
        c: &[f32],
        d: &[f32],
        saved: &ScanSaved,
        gy: &[f32],
    ) -> ScanGrads => scan_backward_body
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_approx_tracks_libm() {
        let mut worst = 0.0f32;
        let mut x = -30.0f32;
        while x <= 30.0 {
            let rel = ((exp_approx(x) - x.exp()) / x.exp()).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 2e-7, "worst relative error {worst}");
        assert_eq!(exp_approx(0.0), 1.0);
    }

    #[test]
    fn strided_gemm_transposes() {
        // a = [[1,2],[3,4]], aᵀ·a = [[10,14],[14,20]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (1, 2), &a, (2, 1), 0.0, &mut c);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle() {
        let x: Vec<f32> = (0..8 * 3 * 3).map(|i| i as f32 * 0.5).collect();
        let y = pixel_shuffle(&x, 2, 3, 3, 2);
        assert_eq!(pixel_unshuffle(&y, 2, 3, 3, 2), x);
    }

    #[test]
    fn causal_conv_ignores_future_tokens() {
        let (t, e, k) = (5, 2, 4);
        let w: Vec<f32> = (0..e * k).map(|i| 0.1 * (i + 1) as f32).collect();
        let b = vec![0.5, -0.5];
        let x: Vec<f32> = (0..t * e).map(|i| i as f32).collect();
        let base = dwconv_causal_forward(&x, &w, &b, t, e, k);
        let mut bumped = x.clone();
        bumped[3 * e] += 10.0;
        let after = dwconv_causal_forward(&bumped, &w, &b, t, e, k);
        for tt in 0..3 {
            assert_eq!(base[tt * e], after[tt * e]);
        }
        assert_ne!(base[3 * e], after[3 * e]);
    }
}
