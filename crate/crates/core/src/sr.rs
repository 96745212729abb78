//! Bicubic resampling, PNG I/O and the ×4 super-resolution front end.
//!
//! The generator predicts a residual on top of a bicubic ×4 upsample, so a
//! zero tail convolution reproduces plain bicubic exactly.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Cubic-convolution coefficient (Catmull-Rom).
pub const CUBIC_A: f32 = -0.5;

/// Overall upsampling factor of the generator.
pub const SR_SCALE: usize = 4;

fn cubic(x: f32) -> f32 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output position along one axis.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    pub taps: Vec<Vec<(usize, f32)>>,
}

/// Builds resampling weights from `n_in` to `n_out` samples. When shrinking,
/// the kernel is stretched by the scale factor so it also low-passes.
pub fn axis_weights(n_in: usize, n_out: usize) -> AxisWeights {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    let taps = (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut row: Vec<(usize, f32)> = Vec::new();
            for j in lo..=hi {
                let w = cubic(((j as f64 + 0.5 - center) / stretch) as f32);
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, n_in as i64 - 1) as usize;
                match row.iter_mut().find(|(s, _)| *s == src) {
                    Some(slot) => slot.1 += w,
                    None => row.push((src, w)),
                }
            }
            let total: f64 = row.iter().map(|&(_, w)| f64::from(w)).sum();
            for tap in &mut row {
                tap.1 = (f64::from(tap.1) / total) as f32;
            }
            row
        })
        .collect();
    AxisWeights { taps }
}

/// Separable bicubic resize of a `[C×H×W]` image.
pub fn bicubic_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = img.dims() else {
        return Err(shape_err!("bicubic_resize expects [C×H×W], got {:?}", img.dims()));
    };
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("output size {out_h}×{out_w} must be at least 1×1"));
    }
    let wx = axis_weights(w, out_w);
    let wy = axis_weights(h, out_h);
    let src = img.data();
    let mut horiz = vec![0.0f32; c * h * out_w];
    for (plane, dst) in src.chunks(h * w).zip(horiz.chunks_mut(h * out_w)) {
        for (row, out) in plane.chunks(w).zip(dst.chunks_mut(out_w)) {
            for (o, taps) in out.iter_mut().zip(&wx.taps) {
                *o = taps.iter().map(|&(j, k)| row[j] * k).sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * out_h * out_w];
    for (plane, dst) in horiz.chunks(h * out_w).zip(out.chunks_mut(out_h * out_w)) {
        for (taps, out_row) in wy.taps.iter().zip(dst.chunks_mut(out_w)) {
            for &(j, k) in taps {
                let src_row = &plane[j * out_w..(j + 1) * out_w];
                for (o, s) in out_row.iter_mut().zip(src_row) {
                    *o += k * s;
                }
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Decodes an image file to `[3×H×W]` in `[0,1]`; grayscale is replicated.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = f32::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes a `[3×H×W]` image to 8-bit RGB and writes it as PNG.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// The bytes [`save_image`] would write.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.dims() else {
        return Err(shape_err!("expected a [3×H×W] image, got {:?}", img.dims()));
    };
    let d = img.data();
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            raw[3 * i + ch] = (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: "<png encoder>".into(),
            msg: e.to_string(),
        })?;
    Ok(out.into_inner())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrMode {
    /// Plain bicubic ×4, no parameters.
    Bicubic,
    /// Bicubic ×4 plus a learned residual.
    #[default]
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    pub mode: SrMode,
    pub channels: usize,
    pub res_blocks: usize,
    /// Side of the low-resolution input; the output is `4×` that.
    pub input_side: usize,
}

impl SrConfig {
    pub fn new(input_side: usize) -> Self {
        Self {
            mode: SrMode::Residual,
            channels: 32,
            res_blocks: 4,
            input_side,
        }
    }

    pub fn output_side(&self) -> usize {
        self.input_side * SR_SCALE
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlockIds {
    conv1: ConvIds,
    scale1: ParamId,
    shift1: ParamId,
    conv2: ConvIds,
    scale2: ParamId,
    shift2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct SrLayout {
    head: ConvIds,
    blocks: Vec<ResBlockIds>,
    up: [ConvIds; 2],
    tail: ConvIds,
}

/// Residual ×4 generator: head conv, residual blocks (conv, affine, SiLU,
/// conv, affine, skip), two conv + pixel-shuffle ×2 stages and a
/// zero-initialized tail conv.
#[derive(Clone, Debug, PartialEq)]
pub struct SrGenerator {
    pub config: SrConfig,
    pub params: ParamSet,
    layout: Option<SrLayout>,
}

fn add_conv(set: &mut ParamSet, name: &str, c_out: usize, c_in: usize, rng: &mut impl Rng) -> ConvIds {
    let bound = 1.0 / ((c_in * 9) as f32).sqrt();
    ConvIds {
        w: set.add(format!("{name}.w"), Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng)),
        b: set.add(format!("{name}.b"), Tensor::uniform(&[c_out], bound, rng)),
    }
}

impl SrGenerator {
    /// New generator; frozen unless `fine_tune` is later requested.
    pub fn new(config: SrConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.input_side == 0 {
            return Err(Error::Config("SR input side must be positive".into()));
        }
        let mut params = ParamSet::new();
        let layout = match config.mode {
            SrMode::Bicubic => None,
            SrMode::Residual => {
                if config.channels == 0 {
                    return Err(Error::Config("SR channel count must be positive".into()));
                }
                let ch = config.channels;
                let head = add_conv(&mut params, "sr.head", ch, 3, rng);
                let blocks = (0..config.res_blocks)
                    .map(|i| {
                        let p = format!("sr.blocks.{i}");
                        let conv1 = add_conv(&mut params, &format!("{p}.conv1"), ch, ch, rng);
                        let scale1 = params.add(format!("{p}.scale1"), Tensor::ones(&[ch]));
                        let shift1 = params.add(format!("{p}.shift1"), Tensor::zeros(&[ch]));
                        let conv2 = add_conv(&mut params, &format!("{p}.conv2"), ch, ch, rng);
                        let scale2 = params.add(format!("{p}.scale2"), Tensor::ones(&[ch]));
                        let shift2 = params.add(format!("{p}.shift2"), Tensor::zeros(&[ch]));
                        ResBlockIds {
                            conv1,
                            scale1,
                            shift1,
                            conv2,
                            scale2,
                            shift2,
                        }
                    })
                    .collect();
                let up = [
                    add_conv(&mut params, "sr.up0", 4 * ch, ch, rng),
                    add_conv(&mut params, "sr.up1", 4 * ch, ch, rng),
                ];
                let tail = ConvIds {
                    w: params.add("sr.tail.w", Tensor::zeros(&[3, ch, 3, 3])),
                    b: params.add("sr.tail.b", Tensor::zeros(&[3])),
                };
                Some(SrLayout {
                    head,
                    blocks,
                    up,
                    tail,
                })
            }
        };
        params.set_frozen(true);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(frozen);
    }

    pub fn check_input(&self, x_l: &Tensor) -> Result<()> {
        let s = self.config.input_side;
        if x_l.dims() != [3, s, s] {
            return Err(shape_err!(
                "SR input must be 3×{s}×{s} (output side {}), got {:?}",
                self.config.output_side(),
                x_l.dims()
            ));
        }
        Ok(())
    }

    /// Records the generator on `g`. Parameters become gradient leaves only
    /// when `trainable` is set and the generator is not frozen.
    pub fn forward(&self, g: &mut Graph, x_l: &Tensor, trainable: bool) -> Result<(Option<Bound>, Var)> {
        self.check_input(x_l)?;
        let out_side = self.config.output_side();
        let base = g.constant(bicubic_resize(x_l, out_side, out_side)?);
        let Some(layout) = &self.layout else {
            return Ok((None, g.clamp(base, 0.0, 1.0)));
        };
        let bound = self.params.bind(g, trainable && !self.is_frozen());
        let conv = |g: &mut Graph, x: Var, ids: &ConvIds| -> Result<Var> {
            let y = g.conv2d(x, bound[ids.w], 1, 1)?;
            g.channel_bias(y, bound[ids.b])
        };
        let x = g.constant(x_l.clone());
        let mut h = conv(g, x, &layout.head)?;
        for blk in &layout.blocks {
            let mut y = conv(g, h, &blk.conv1)?;
            y = g.channel_scale(y, bound[blk.scale1])?;
            y = g.channel_bias(y, bound[blk.shift1])?;
            y = g.silu(y);
            y = conv(g, y, &blk.conv2)?;
            y = g.channel_scale(y, bound[blk.scale2])?;
            y = g.channel_bias(y, bound[blk.shift2])?;
            h = g.add(h, y)?;
        }
        for stage in &layout.up {
            h = conv(g, h, stage)?;
            h = g.pixel_shuffle(h, 2)?;
            h = g.silu(h);
        }
        let residual = conv(g, h, &layout.tail)?;
        let sum = g.add(base, residual)?;
        Ok((Some(bound), g.clamp(sum, 0.0, 1.0)))
    }
}

/// Super-resolves a low-resolution image to `4×` its side, clamped to `[0,1]`.
pub fn sr_generate(x_l: &Tensor, generator: &SrGenerator) -> Result<Tensor> {
    let mut g = Graph::new();
    let (_, out) = generator.forward(&mut g, x_l, false)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-7);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-7);
    }

    #[test]
    fn weights_partition_unity() {
        for (n_in, n_out) in [(224, 56), (56, 224), (16, 64), (7, 3), (3, 11)] {
            for taps in axis_weights(n_in, n_out).taps {
                let s: f64 = taps.iter().map(|&(_, w)| f64::from(w)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsample_shape() {
        let img = Tensor::zeros(&[3, 224, 224]);
        assert_eq!(bicubic_resize(&img, 56, 56).unwrap().dims(), &[3, 56, 56]);
        assert!(bicubic_resize(&img, 0, 5).is_err());
    }

    #[test]
    fn zero_tail_is_bicubic() {
        let gen = SrGenerator::new(SrConfig::new(8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::uniform(&[3, 8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::from_fn(&[3, 8, 8], |i| x.data()[i] + 0.5);
        let out = sr_generate(&x, &gen).unwrap();
        let mut base = bicubic_resize(&x, 32, 32).unwrap();
        base.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        assert!(out.bit_eq(&base));
        assert!(sr_generate(&Tensor::zeros(&[3, 9, 9]), &gen).is_err());
    }
}
