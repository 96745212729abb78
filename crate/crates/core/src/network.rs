//! The vision-Mamba classifier used for both teacher and student.
//!
//! Pipeline: strided patch convolution → raster flatten → class token
//! inserted at the middle of the patch sequence → learned position embedding
//! → N encoder blocks → linear head on the class-token row only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{vim_block, BlockDims, GateMode, VimBlockParams};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Architectural hyper-parameters of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// Rank of the step-size projection; `None` means ⌈D/16⌉.
    pub dt_rank: Option<usize>,
    pub input_side: usize,
    /// RMS-normalize the class token before the head.
    pub final_norm: bool,
    pub gate: GateMode,
}

impl VimConfig {
    /// Vim-Tiny at 224² with 1000 classes.
    pub fn vim_tiny() -> Self {
        Self {
            embed_dim: 192,
            depth: 24,
            patch: 16,
            in_channels: 3,
            num_classes: 1000,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            dt_rank: None,
            input_side: 224,
            final_norm: true,
            gate: GateMode::Projected,
        }
    }

    /// Desk-scale model for 64² inputs.
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            patch: 8,
            num_classes: 4,
            input_side: 64,
            ..Self::vim_tiny()
        }
    }

    pub fn grid(&self) -> usize {
        self.input_side / self.patch
    }

    /// Number of patches Z.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length Z + 1.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Row of the class token, Z/2.
    pub fn cls_index(&self) -> usize {
        self.num_patches() / 2
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.embed_dim
    }

    pub fn resolved_dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.embed_dim.div_ceil(16))
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.embed_dim,
            d_inner: self.d_inner(),
            d_state: self.d_state,
            dt_rank: self.resolved_dt_rank(),
            conv_width: self.conv_width,
            gate: self.gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("patch", self.patch),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("input_side", self.input_side),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.input_side.is_multiple_of(self.patch) {
            return Err(shape_err!(
                "input side {} is not divisible by patch size {}",
                self.input_side,
                self.patch
            ));
        }
        if !self.num_patches().is_multiple_of(2) {
            return Err(shape_err!(
                "patch count {} must be even to place the class token in the middle",
                self.num_patches()
            ));
        }
        self.block_dims().validate()
    }

    /// Names the first architectural field that differs, if any.
    pub fn mismatch(&self, other: &VimConfig) -> Option<String> {
        let pairs = [
            ("embed_dim", self.embed_dim, other.embed_dim),
            ("depth", self.depth, other.depth),
            ("patch", self.patch, other.patch),
            ("in_channels", self.in_channels, other.in_channels),
            ("num_classes", self.num_classes, other.num_classes),
            ("d_state", self.d_state, other.d_state),
            ("expand", self.expand, other.expand),
            ("conv_width", self.conv_width, other.conv_width),
            ("dt_rank", self.resolved_dt_rank(), other.resolved_dt_rank()),
            ("input_side", self.input_side, other.input_side),
        ];
        if let Some((name, a, b)) = pairs.iter().find(|(_, a, b)| a != b) {
            return Some(format!("{name}: {a} vs {b}"));
        }
        if self.final_norm != other.final_norm {
            return Some(format!("final_norm: {} vs {}", self.final_norm, other.final_norm));
        }
        if self.gate != other.gate {
            return Some(format!("gate: {:?} vs {:?}", self.gate, other.gate));
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams<T> {
    /// `[D×C×J×J]`.
    pub w: T,
    pub b: T,
    /// `[1×D]`.
    pub cls: T,
    /// `[(Z+1)×D]`.
    pub pos: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub norm: Option<T>,
    /// `[D×classes]`.
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VimParams<T> {
    pub patch: PatchEmbedParams<T>,
    pub blocks: Vec<VimBlockParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> VimParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> VimParams<U> {
        VimParams {
            patch: PatchEmbedParams {
                w: f(&self.patch.w),
                b: f(&self.patch.b),
                cls: f(&self.patch.cls),
                pos: f(&self.patch.pos),
            },
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head: HeadParams {
                norm: self.head.norm.as_ref().map(&mut f),
                w: f(&self.head.w),
                b: f(&self.head.b),
            },
        }
    }
}

/// Outputs H_0 … H_N of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Tensor>,
}

impl HiddenStates {
    pub fn from_graph(g: &Graph, vars: &[Var]) -> Self {
        Self {
            layers: vars.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Number of encoder layers N (one less than the stored tensors).
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }
}

/// Graph handles produced by [`VimNet::forward`].
#[derive(Clone, Debug)]
pub struct VimForward {
    /// H_0 … H_N.
    pub hidden: Vec<Var>,
    pub logits: Var,
}

/// Strided patch conv, raster flatten, middle class token, position embedding.
pub fn patch_embed(
    g: &mut Graph,
    image: Var,
    p: &PatchEmbedParams<Var>,
    patch: usize,
) -> Result<Var> {
    let dims = g.value(image).dims().to_vec();
    if dims.len() != 3 || !dims[1].is_multiple_of(patch) || !dims[2].is_multiple_of(patch) {
        return Err(shape_err!(
            "image {dims:?} cannot be tiled by {patch}×{patch} patches"
        ));
    }
    let xa = g.conv2d(image, p.w, patch, 0)?;
    let xa = g.channel_bias(xa, p.b)?;
    let d = g.value(xa).dims()[0];
    let z = dims[1] / patch * (dims[2] / patch);
    if !z.is_multiple_of(2) {
        return Err(shape_err!("patch count {z} is odd; the class token needs a middle"));
    }
    let flat = g.reshape(xa, &[d, z])?;
    let xb = g.transpose(flat)?;
    let first = g.slice_rows(xb, 0, z / 2)?;
    let second = g.slice_rows(xb, z / 2, z / 2)?;
    let seq = g.concat_rows(&[first, p.cls, second])?;
    g.add(seq, p.pos)
}

/// Runs the blocks in order and returns every intermediate H_0 … H_N.
pub fn encode(
    g: &mut Graph,
    h0: Var,
    blocks: &[VimBlockParams<Var>],
    dims: &BlockDims,
) -> Result<Vec<Var>> {
    let mut hidden = Vec::with_capacity(blocks.len() + 1);
    hidden.push(h0);
    let mut h = h0;
    for block in blocks {
        h = vim_block(g, h, block, dims)?;
        hidden.push(h);
    }
    Ok(hidden)
}

/// Linear head over the class-token row `cls_index` of `h_n`.
pub fn classify_head(
    g: &mut Graph,
    h_n: Var,
    p: &HeadParams<Var>,
    cls_index: usize,
) -> Result<Var> {
    let mut h = g.slice_rows(h_n, cls_index, 1)?;
    if let Some(norm) = p.norm {
        h = g.rms_norm(h, norm)?;
    }
    let logits = g.matmul(h, p.w)?;
    let logits = g.add_bias(logits, p.b)?;
    let c = g.value(logits).dims()[1];
    g.reshape(logits, &[c])
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f32]) -> usize {
    assert!(!logits.is_empty(), "predict on empty logits");
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Exact learnable-scalar count of a configuration.
pub fn param_count(config: &VimConfig) -> usize {
    let (d, c, j) = (config.embed_dim, config.in_channels, config.patch);
    let patch = d * c * j * j + d + d + config.seq_len() * d;
    let blocks = config.depth * config.block_dims().block_params();
    let head = usize::from(config.final_norm) * d + d * config.num_classes + config.num_classes;
    patch + blocks + head
}

/// Forward-pass FLOPs at the configured input size: 2 × multiply-accumulates
/// of the patch convolution, every projection, the depthwise convolutions,
/// the scan recurrences and the head.
pub fn flops_estimate(config: &VimConfig) -> f64 {
    let (d, c, j) = (
        config.embed_dim as u64,
        config.in_channels as u64,
        config.patch as u64,
    );
    let z = config.num_patches() as u64;
    let patch = z * d * c * j * j;
    let blocks = config.depth as u64 * config.block_dims().block_macs(config.seq_len());
    let head = d * config.num_classes as u64;
    2.0 * (patch + blocks + head) as f64
}

/// A ViM classifier: configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VimNet {
    pub config: VimConfig,
    pub params: ParamSet,
    layout: VimParams<ParamId>,
}

impl VimNet {
    /// Fresh network with seeded initialization.
    pub fn new(config: VimConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new();
        let (d, c, j) = (config.embed_dim, config.in_channels, config.patch);
        let fan_in = (c * j * j) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let patch = PatchEmbedParams {
            w: set.add("patch.w", Tensor::uniform(&[d, c, j, j], bound, rng)),
            b: set.add("patch.b", Tensor::uniform(&[d], bound, rng)),
            cls: set.add("cls", Tensor::randn(&[1, d], 0.02, rng)),
            pos: set.add("pos", Tensor::randn(&[config.seq_len(), d], 0.02, rng)),
        };
        let dims = config.block_dims();
        let blocks = (0..config.depth)
            .map(|i| VimBlockParams::init(&mut set, &format!("blocks.{i}"), &dims, rng))
            .collect();
        let head_bound = 1.0 / (d as f32).sqrt();
        let head = HeadParams {
            norm: config
                .final_norm
                .then(|| set.add("head.norm", Tensor::ones(&[d]))),
            w: set.add(
                "head.w",
                Tensor::uniform(&[d, config.num_classes], head_bound, rng),
            ),
            b: set.add("head.b", Tensor::zeros(&[config.num_classes])),
        };
        Ok(Self {
            config,
            params: set,
            layout: VimParams {
                patch,
                blocks,
                head,
            },
        })
    }

    pub fn layout(&self) -> &VimParams<ParamId> {
        &self.layout
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Bound, VimParams<Var>) {
        let bound = self.params.bind(g, trainable);
        let vars = self.layout.map(|id| bound[*id]);
        (bound, vars)
    }

    /// Parameter handles from graph variables listed in parameter order.
    pub fn vars_from(&self, vars: &[Var]) -> VimParams<Var> {
        self.layout.map(|id| vars[id.index()])
    }

    /// Checks that `image` is `[C×side×side]` for this configuration.
    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.dims() != [c.in_channels, c.input_side, c.input_side] {
            return Err(shape_err!(
                "network expects a {}×{}×{} image, got {:?}",
                c.in_channels,
                c.input_side,
                c.input_side,
                image.dims()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, vars: &VimParams<Var>, image: Var) -> Result<VimForward> {
        let h0 = patch_embed(g, image, &vars.patch, self.config.patch)?;
        let hidden = encode(g, h0, &vars.blocks, &self.config.block_dims())?;
        let h_n = *hidden.last().expect("at least H_0");
        let logits = classify_head(g, h_n, &vars.head, self.config.cls_index())?;
        Ok(VimForward { hidden, logits })
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, image: &Tensor) -> Result<(HiddenStates, Tensor)> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let (_, vars) = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok((
            HiddenStates::from_graph(&g, &out.hidden),
            g.value(out.logits).clone(),
        ))
    }

    pub fn predict_image(&self, image: &Tensor) -> Result<usize> {
        let (_, logits) = self.infer(image)?;
        Ok(predict(logits.data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VimConfig {
        VimConfig {
            embed_dim: 8,
            depth: 2,
            patch: 16,
            num_classes: 2,
            input_side: 32,
            ..VimConfig::toy()
        }
    }

    #[test]
    fn sequence_geometry() {
        let c = VimConfig::vim_tiny();
        assert_eq!(c.num_patches(), 196);
        assert_eq!(c.seq_len(), 197);
        assert_eq!(c.cls_index(), 98);
        assert_eq!(c.resolved_dt_rank(), 12);
        let t = tiny();
        assert_eq!(t.num_patches(), 4);
        assert_eq!(t.cls_index(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.input_side = 40;
        assert!(matches!(c.validate(), Err(Error::Shape(_))));
        let mut odd = tiny();
        odd.patch = 32;
        odd.input_side = 96; // 3×3 = 9 patches
        assert!(odd.validate().is_err());
    }

    #[test]
    fn param_count_matches_construction() {
        for cfg in [tiny(), VimConfig::toy()] {
            let net = VimNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(net.params.num_scalars(), param_count(&cfg));
        }
    }

    #[test]
    fn predict_ties_to_lowest() {
        assert_eq!(predict(&[0.1, 2.3, -1.0]), 1);
        assert_eq!(predict(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(predict(&[-1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_image_embeds_position_and_class_token() {
        let mut net = VimNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bid = net.layout.patch.b;
        *net.params.get_mut(bid) = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let (_, vars) = net.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let h0 = patch_embed(&mut g, x, &vars.patch, 16).unwrap();
        let h0 = g.value(h0).clone();
        let pos = net.params.get(net.layout.patch.pos);
        let cls = net.params.get(net.layout.patch.cls);
        assert_eq!(h0.dims(), &[5, 8]);
        for row in 0..5 {
            for col in 0..8 {
                let expect = if row == 2 {
                    cls.at(&[0, col]) + pos.at(&[row, col])
                } else {
                    pos.at(&[row, col])
                };
                assert_eq!(h0.at(&[row, col]), expect);
            }
        }
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let net = VimNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(net.infer(&Tensor::zeros(&[3, 30, 30])).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = VimNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (w, b) = (net.layout.head.w, net.layout.head.b);
        *net.params.get_mut(w) = Tensor::zeros(&[8, 2]);
        *net.params.get_mut(b) = Tensor::zeros(&[2]);
        let img = Tensor::uniform(&[3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (_, logits) = net.infer(&img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
}
