//! Network architecture: parameter registry, mask prediction network,
//! TPS spatial transformer, three pyramid encoders with a shared-skip
//! decoder, patch discriminators, and checkpoint I/O.
//!
//! All networks are built against a [`Params`] store and executed on a
//! [`Graph`]; the same weights serve both cycle passes because parameter
//! binding is memoized per graph.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::ControlGrid;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Stage widths shared by the encoders, the mask network and the STN.
pub const STAGE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
/// Decoder per-stage input widths after skip concatenation.
pub const DECODER_INPUTS: [usize; 5] = [1536, 2048, 1024, 512, 256];
const DECODER_OUTPUTS: [usize; 5] = [512, 256, 128, 64, 64];
/// Control lattice predicted by the spatial transformer.
pub const STN_GRID: (usize, usize) = (5, 5);

// ── Parameter registry ──────────────────────────────────────────────────

/// Handle to one named tensor in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, name-addressable store of trainable tensors. Insertion order
/// is construction order and doubles as the optimizer state order.
pub struct Params<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
    namespace: u64,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new(), namespace: 0 }
    }

    /// A store whose graph binding uids live in a distinct namespace, so
    /// two stores can be bound into the same graph without colliding.
    pub fn with_namespace(namespace: u64) -> Self {
        let mut p = Self::new();
        p.namespace = namespace;
        p
    }

    /// Graph binding uid of the parameter at `index`.
    pub fn uid(&self, index: usize) -> u64 {
        (self.namespace << 48) | index as u64
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape(), "parameter shape is fixed");
        self.tensors[id.0] = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> + '_ {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Bind a parameter into a graph (memoized per graph).
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        let t = &self.tensors[id.0];
        g.param(self.uid(id.0), || t.clone())
    }

    /// Index behind a [`ParamId`] (matches `ids()` order).
    pub fn index(&self, id: ParamId) -> usize {
        id.0
    }
}

/// Parameter binder that optionally freezes (binds as constants).
#[derive(Clone, Copy)]
pub(crate) struct Binder<'a, T: Scalar> {
    params: &'a Params<T>,
    frozen: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub(crate) fn new(params: &'a Params<T>, frozen: bool) -> Self {
        Binder { params, frozen }
    }

    fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.frozen {
            g.leaf(self.params.get(id).clone())
        } else {
            self.params.bind(g, id)
        }
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Standard normal via Box-Muller on the dataset RNG (deterministic).
pub(crate) fn gaussian_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| T::from_f64(gaussian_sample(rng) * std)).collect())
}

// ── Layers ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
enum Act {
    None,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

/// 3x3 convolution with optional bias, instance norm and activation.
struct ConvBlock {
    w: ParamId,
    b: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    act: Act,
    stride: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar>(
        p: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        norm: bool,
        act: Act,
    ) -> Self {
        let w = p.add(&format!("{name}.w"), gaussian(rng, &[out_c, in_c, 3, 3], 0.02));
        let b = if norm {
            None
        } else {
            Some(p.add(&format!("{name}.b"), Tensor::zeros(&[out_c])))
        };
        let norm = if norm {
            Some((
                p.add(&format!("{name}.gamma"), Tensor::full(&[out_c], T::ONE)),
                p.add(&format!("{name}.beta"), Tensor::zeros(&[out_c])),
            ))
        } else {
            None
        };
        ConvBlock { w, b, norm, act, stride }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: Binder<T>, x: Var) -> Var {
        let w = b.var(g, self.w);
        let mut y = g.conv3(x, w, self.stride);
        if let Some(bias) = self.b {
            let bv = b.var(g, bias);
            y = g.add_bias(y, bv);
        }
        if let Some((gamma, beta)) = self.norm {
            let gv = b.var(g, gamma);
            let bv = b.var(g, beta);
            y = g.instance_norm(y, gv, bv);
        }
        match self.act {
            Act::None => y,
            Act::Relu => g.relu(y),
            Act::LeakyRelu => g.leaky_relu(y, 0.2),
            Act::Tanh => g.tanh_op(y),
            Act::Sigmoid => g.sigmoid(y),
        }
    }
}

/// Two-conv residual block with identity skip.
struct ResBlock {
    a: ConvBlock,
    b: ConvBlock,
}

impl ResBlock {
    fn build<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        ResBlock {
            a: ConvBlock::build(p, rng, &format!("{name}.a"), c, c, 1, true, Act::Relu),
            b: ConvBlock::build(p, rng, &format!("{name}.b"), c, c, 1, true, Act::None),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: Binder<T>, x: Var) -> Var {
        let y = self.a.forward(g, bind, x);
        let y = self.b.forward(g, bind, y);
        g.add(x, y)
    }
}

/// Learned 2x upsampling: 1x1 convolution to 4x channels, then
/// depth-to-space with crop to the exact target extent.
struct Deconv {
    w: ParamId,
    b: ParamId,
}

impl Deconv {
    fn build<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Deconv {
            w: p.add(&format!("{name}.w"), gaussian(rng, &[4 * c, c], 0.02)),
            b: p.add(&format!("{name}.b"), Tensor::zeros(&[4 * c])),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: Binder<T>, x: Var, oh: usize, ow: usize) -> Var {
        let w = bind.var(g, self.w);
        let b = bind.var(g, self.b);
        let y = g.conv1x1(x, w);
        let y = g.add_bias(y, b);
        g.pixel_shuffle2(y, oh, ow)
    }
}

/// Sizes of the five pyramid levels for an input extent (ceil halving).
fn level_sizes(h: usize, w: usize) -> [(usize, usize); 5] {
    let mut out = [(0, 0); 5];
    let (mut ch, mut cw) = (h, w);
    for slot in &mut out {
        ch = ch.div_ceil(2);
        cw = cw.div_ceil(2);
        *slot = (ch, cw);
    }
    out
}

/// Feature extents must survive five halvings cleanly.
pub(crate) fn check_extent(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial size must be at least 32 and divisible by 16, got {h}x{w}"
        )));
    }
    Ok(())
}

// ── Pyramid encoder ─────────────────────────────────────────────────────

/// Five stride-2 stages (64..512 channels) with residual blocks after the
/// third and fifth stages; returns all five feature levels.
pub struct Encoder {
    stages: Vec<ConvBlock>,
    res2: Option<ResBlock>,
    res4: Option<ResBlock>,
}

impl Encoder {
    fn build<T: Scalar>(
        p: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_c: usize,
        residual: bool,
    ) -> Self {
        let mut stages = Vec::new();
        let mut c = in_c;
        for (i, &oc) in STAGE_CHANNELS.iter().enumerate() {
            stages.push(ConvBlock::build(p, rng, &format!("{prefix}.s{i}"), c, oc, 2, true, Act::Relu));
            c = oc;
        }
        let (res2, res4) = if residual {
            (
                Some(ResBlock::build(p, rng, &format!("{prefix}.res2"), STAGE_CHANNELS[2])),
                Some(ResBlock::build(p, rng, &format!("{prefix}.res4"), STAGE_CHANNELS[4])),
            )
        } else {
            (None, None)
        };
        Encoder { stages, res2, res4 }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: Binder<T>, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(5);
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(g, bind, cur);
            if i == 2 {
                if let Some(r) = &self.res2 {
                    cur = r.forward(g, bind, cur);
                }
            }
            if i == 4 {
                if let Some(r) = &self.res4 {
                    cur = r.forward(g, bind, cur);
                }
            }
            levels.push(cur);
        }
        levels
    }
}

// ── Mask prediction network ─────────────────────────────────────────────

/// U-Net over (descriptor ++ garment) producing soft clothes and skin
/// masks in [0, 1].
pub struct MaskPredictor {
    enc: Encoder,
    merge: Vec<ConvBlock>,
    up: Vec<Deconv>,
    head: ConvBlock,
}

impl MaskPredictor {
    fn build<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let enc = Encoder::build(p, rng, &format!("{prefix}.enc"), 10, false);
        // Stage input widths: 512, then skip-concatenated 1024/512/256/128.
        let ins = [512, 1024, 512, 256, 128];
        let outs = [512, 256, 128, 64, 64];
        let mut merge = Vec::new();
        let mut up = Vec::new();
        for i in 0..5 {
            merge.push(ConvBlock::build(
                p,
                rng,
                &format!("{prefix}.d{i}"),
                ins[i],
                outs[i],
                1,
                true,
                Act::Relu,
            ));
            up.push(Deconv::build(p, rng, &format!("{prefix}.u{i}"), outs[i]));
        }
        let head = ConvBlock::build(p, rng, &format!("{prefix}.head"), 64, 2, 1, false, Act::Sigmoid);
        MaskPredictor { enc, merge, up, head }
    }

    /// Returns (clothes mask, skin mask), each (N, 1, H, W).
    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: Binder<T>,
        descriptor: Var,
        clothes: Var,
    ) -> (Var, Var) {
        let x = g.concat_c(&[descriptor, clothes]);
        let (h, w) = (g.value(x).dim(2), g.value(x).dim(3));
        let sizes = level_sizes(h, w);
        let levels = self.enc.forward(g, bind, x);
        let mut cur = self.merge[0].forward(g, bind, levels[4]);
        cur = self.up[0].forward(g, bind, cur, sizes[3].0, sizes[3].1);
        for i in 1..5 {
            let skip = levels[4 - i];
            let cat = g.concat_c(&[cur, skip]);
            cur = self.merge[i].forward(g, bind, cat);
            let (oh, ow) = if i < 4 { sizes[3 - i] } else { (h, w) };
            cur = self.up[i].forward(g, bind, cur, oh, ow);
        }
        let masks = self.head.forward(g, bind, cur);
        let m_clothes = g.slice_c(masks, 0, 1);
        let m_skin = g.slice_c(masks, 1, 2);
        (m_clothes, m_skin)
    }
}

// ── Spatial transformer ─────────────────────────────────────────────────

/// Predicts TPS destination control points for the garment warp from the
/// clothes mask and the flat garment.
pub struct SpatialTransformer {
    convs: Vec<ConvBlock>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    grid: ControlGrid,
}

/// One spatial-transformer application.
pub struct StnOut {
    /// Predicted destination control points, (N, K, 2).
    pub dst_points: Var,
    /// Dense backward warp field, (N, H, W, 2).
    pub field: Var,
    /// Garment sampled through the field, (N, 3, H, W).
    pub warped: Var,
}

impl SpatialTransformer {
    fn build<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let mut convs = Vec::new();
        let mut c = 4;
        for (i, &oc) in STAGE_CHANNELS.iter().enumerate() {
            convs.push(ConvBlock::build(p, rng, &format!("{prefix}.c{i}"), c, oc, 2, false, Act::Relu));
            c = oc;
        }
        let k = STN_GRID.0 * STN_GRID.1;
        let fc1 = (
            p.add(&format!("{prefix}.fc1.w"), gaussian(rng, &[256, 512], 0.02)),
            p.add(&format!("{prefix}.fc1.b"), Tensor::zeros(&[256])),
        );
        // Zero-initialized head: the initial warp is exactly the identity.
        let fc2 = (
            p.add(&format!("{prefix}.fc2.w"), Tensor::zeros(&[2 * k, 256])),
            p.add(&format!("{prefix}.fc2.b"), Tensor::zeros(&[2 * k])),
        );
        let grid = ControlGrid::regular(STN_GRID.0, STN_GRID.1).expect("static grid");
        SpatialTransformer { convs, fc1, fc2, grid }
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    /// Mask (N,1,H,W) + garment (N,3,H,W) -> warp; `bind` may be frozen.
    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: Binder<T>,
        mask: Var,
        clothes: Var,
    ) -> Result<StnOut> {
        let x = g.concat_c(&[mask, clothes]);
        let (n, _, h, w) = {
            let v = g.value(x);
            (v.dim(0), v.dim(1), v.dim(2), v.dim(3))
        };
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.forward(g, bind, cur);
            cur = g.maxpool2(cur);
        }
        let feat = g.global_avg_pool(cur);
        let (w1, b1) = (bind.var(g, self.fc1.0), bind.var(g, self.fc1.1));
        let hdd = g.linear(feat, w1, b1);
        let hdd = g.relu(hdd);
        let (w2, b2) = (bind.var(g, self.fc2.0), bind.var(g, self.fc2.1));
        let raw = g.linear(hdd, w2, b2);
        let off = g.tanh_op(raw);
        let k = self.grid.len();
        let off = g.reshape(off, &[n, k, 2]);
        let base: Vec<T> = self
            .grid
            .points()
            .iter()
            .flat_map(|p| [T::from_f64(p[0]), T::from_f64(p[1])])
            .collect();
        let base = Tensor::from_vec(&[1, k, 2], base);
        let mut tiled = Vec::with_capacity(n * k * 2);
        for _ in 0..n {
            tiled.extend_from_slice(base.data());
        }
        let base = g.leaf(Tensor::from_vec(&[n, k, 2], tiled));
        let dst_points = g.add(base, off);
        let field = g.tps_grid(dst_points, self.grid.points(), h, w)?;
        let warped = g.grid_sample(clothes, field, 0.0);
        Ok(StnOut { dst_points, field, warped })
    }
}

// ── Decoder ─────────────────────────────────────────────────────────────

/// Merges the three feature pyramids coarse-to-fine and renders the final
/// image through a tanh head.
pub struct Decoder {
    merge: Vec<ConvBlock>,
    up: Vec<Deconv>,
    head: ConvBlock,
}

impl Decoder {
    fn build<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let mut merge = Vec::new();
        let mut up = Vec::new();
        for i in 0..5 {
            merge.push(ConvBlock::build(
                p,
                rng,
                &format!("{prefix}.d{i}"),
                DECODER_INPUTS[i],
                DECODER_OUTPUTS[i],
                1,
                true,
                Act::Relu,
            ));
            up.push(Deconv::build(p, rng, &format!("{prefix}.u{i}"), DECODER_OUTPUTS[i]));
        }
        let head = ConvBlock::build(p, rng, &format!("{prefix}.head"), 64, 3, 1, false, Act::Tanh);
        Decoder { merge, up, head }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: Binder<T>,
        p1: &[Var],
        p2: &[Var],
        p3: &[Var],
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let sizes = level_sizes(out_h, out_w);
        let cat5 = g.concat_c(&[p1[4], p2[4], p3[4]]);
        let mut cur = self.merge[0].forward(g, bind, cat5);
        cur = self.up[0].forward(g, bind, cur, sizes[3].0, sizes[3].1);
        for i in 1..5 {
            let lvl = 4 - i;
            let cat = g.concat_c(&[cur, p1[lvl], p2[lvl], p3[lvl]]);
            cur = self.merge[i].forward(g, bind, cat);
            let (oh, ow) = if i < 4 { sizes[lvl - 1] } else { (out_h, out_w) };
            cur = self.up[i].forward(g, bind, cur, oh, ow);
        }
        self.head.forward(g, bind, cur)
    }
}

// ── Patch discriminator ─────────────────────────────────────────────────

/// Three stride-2 convolutions and a patch head of raw logits.
pub struct PatchDiscriminator {
    c0: ConvBlock,
    c1: ConvBlock,
    c2: ConvBlock,
    head: ConvBlock,
}

impl PatchDiscriminator {
    pub fn build<T: Scalar>(p: &mut Params<T>, seed: u64, prefix: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        PatchDiscriminator {
            c0: ConvBlock::build(p, r, &format!("{prefix}.c0"), 3, 64, 2, false, Act::LeakyRelu),
            c1: ConvBlock::build(p, r, &format!("{prefix}.c1"), 64, 128, 2, true, Act::LeakyRelu),
            c2: ConvBlock::build(p, r, &format!("{prefix}.c2"), 128, 256, 2, true, Act::LeakyRelu),
            head: ConvBlock::build(p, r, &format!("{prefix}.head"), 256, 1, 1, false, Act::None),
        }
    }

    /// Logit map (N, 1, H/8, W/8).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var) -> Var {
        let bind = Binder::new(p, false);
        let y = self.c0.forward(g, bind, x);
        let y = self.c1.forward(g, bind, y);
        let y = self.c2.forward(g, bind, y);
        self.head.forward(g, bind, y)
    }
}

// ── Generator ───────────────────────────────────────────────────────────

/// Structural switches baked into a generator (recorded in checkpoints).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// When false the skin pyramid is replaced by zeros and its encoder is
    /// never built.
    pub skin_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { skin_encoder: true }
    }
}

/// Inputs of one try-on pass, all NCHW with matching extents.
pub struct GenInputs {
    /// Person image (N,3,H,W).
    pub person: Var,
    /// Skin image for the skin pyramid (N,3,H,W).
    pub skin: Var,
    /// Flat garment template to put on (N,3,H,W).
    pub clothes: Var,
    /// Pose descriptor (N,7,H,W).
    pub descriptor: Var,
}

/// Products of one try-on pass.
pub struct GenPass {
    /// Rendered try-on image (N,3,H,W) in [-1,1].
    pub image: Var,
    /// Soft clothes mask from the mask network.
    pub mask_clothes: Var,
    /// Soft skin mask from the mask network.
    pub mask_skin: Var,
    /// Garment after the TPS warp.
    pub warped_clothes: Var,
    /// Predicted destination control points (N,K,2).
    pub dst_points: Var,
}

/// Full try-on generator: mask network, spatial transformer, three
/// encoders and the decoder. Counts forward passes for inference audits.
pub struct Generator {
    pub mpn: MaskPredictor,
    pub stn: SpatialTransformer,
    enc_warp: Encoder,
    enc_skin: Option<Encoder>,
    enc_comp: Encoder,
    dec: Decoder,
    config: ModelConfig,
    passes: u64,
}

impl Generator {
    /// Construct and initialize all generator weights into `params`.
    pub fn build<T: Scalar>(params: &mut Params<T>, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mpn = MaskPredictor::build(params, r, "gen.mpn");
        let stn = SpatialTransformer::build(params, r, "gen.stn");
        let enc_warp = Encoder::build(params, r, "gen.enc_warp", 4, true);
        let enc_skin = if config.skin_encoder {
            Some(Encoder::build(params, r, "gen.enc_skin", 3, true))
        } else {
            None
        };
        let enc_comp = Encoder::build(params, r, "gen.enc_comp", 3, true);
        let dec = Decoder::build(params, r, "gen.dec");
        Generator { mpn, stn, enc_warp, enc_skin, enc_comp, dec, config, passes: 0 }
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    /// Number of completed forward passes since construction.
    pub fn passes(&self) -> u64 {
        self.passes
    }

    /// One try-on pass. With `stn_frozen` the transformer weights enter the
    /// graph as constants and receive no gradient.
    pub fn forward<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        params: &Params<T>,
        inputs: &GenInputs,
        stn_frozen: bool,
    ) -> Result<GenPass> {
        let (n, _, h, w) = {
            let v = g.value(inputs.person);
            (v.dim(0), v.dim(1), v.dim(2), v.dim(3))
        };
        check_extent(h, w)?;
        for (name, var, c) in [
            ("skin", inputs.skin, 3),
            ("clothes", inputs.clothes, 3),
            ("descriptor", inputs.descriptor, crate::data::DESCRIPTOR_CHANNELS),
        ] {
            let v = g.value(var);
            if v.shape() != [n, c, h, w] {
                return Err(Error::InvalidArgument(format!(
                    "{name} shape {:?} does not match person {n}x{c}x{h}x{w}",
                    v.shape()
                )));
            }
        }
        let bind = Binder::new(params, false);
        let stn_bind = Binder::new(params, stn_frozen);
        let (mask_clothes, mask_skin) = self.mpn.forward(g, bind, inputs.descriptor, inputs.clothes);
        let stn_out = self.stn.forward(g, stn_bind, mask_clothes, inputs.clothes)?;
        let warp_in = g.concat_c(&[stn_out.warped, mask_skin]);
        let p1 = self.enc_warp.forward(g, bind, warp_in);
        let p2 = match &self.enc_skin {
            Some(enc) => enc.forward(g, bind, inputs.skin),
            None => level_sizes(h, w)
                .iter()
                .zip(STAGE_CHANNELS)
                .map(|(&(lh, lw), c)| g.leaf(Tensor::zeros(&[n, c, lh, lw])))
                .collect(),
        };
        let p3 = self.enc_comp.forward(g, bind, inputs.person);
        let image = self.dec.forward(g, bind, &p1, &p2, &p3, h, w);
        self.passes += 1;
        Ok(GenPass {
            image,
            mask_clothes,
            mask_skin,
            warped_clothes: stn_out.warped,
            dst_points: stn_out.dst_points,
        })
    }

    /// Run only mask prediction + spatial transformer (the pretraining
    /// path). Gradients flow into the STN; the mask is caller-provided.
    pub fn warp_only<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        mask_clothes: Var,
        clothes: Var,
    ) -> Result<StnOut> {
        let bind = Binder::new(params, false);
        self.stn.forward(g, bind, mask_clothes, clothes)
    }
}

/// True when a parameter name belongs to the spatial transformer.
pub fn is_stn_param(name: &str) -> bool {
    name.starts_with("gen.stn.")
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_VERSION: &str = "dcton-checkpoint v1";

/// Write every parameter plus a config echo into `dir` (one tensor file
/// per parameter and a manifest). Deterministic: names are sorted.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    entries: &[(&str, &Tensor<T>)],
    config: &[(String, String)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<_> = entries.to_vec();
    sorted.sort_by_key(|(name, _)| name.to_string());
    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_VERSION);
    manifest.push_str("\n[config]\n");
    for (k, v) in config {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str("[tensors]\n");
    for (name, t) in &sorted {
        manifest.push_str(name);
        for d in t.shape() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push('\n');
        crate::tfile::write_tensor(&dir.join(format!("{name}.tns")), t)?;
    }
    fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.txt"), e))?;
    Ok(())
}

/// Parse a checkpoint manifest; returns (config pairs, tensor names).
pub fn read_manifest(dir: &Path) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let path = dir.join("manifest.txt");
    if !path.exists() {
        return Err(Error::NotFound { path });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(v) if v == CHECKPOINT_VERSION => {}
        Some(v) => {
            return Err(Error::format(&path, format!("unsupported checkpoint version: {v}")))
        }
        None => return Err(Error::format(&path, "empty manifest")),
    }
    let mut config = Vec::new();
    let mut tensors = Vec::new();
    let mut section = "";
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "[config]" || line == "[tensors]" {
            section = line;
            continue;
        }
        match section {
            "[config]" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(&path, format!("bad config line: {line}")))?;
                config.push((k.to_string(), v.to_string()));
            }
            "[tensors]" => {
                let name = line.split_whitespace().next().unwrap_or_default();
                tensors.push(name.to_string());
            }
            _ => return Err(Error::format(&path, format!("line outside any section: {line}"))),
        }
    }
    Ok((config, tensors))
}

/// Load checkpoint tensors into an existing store by name. Every store
/// entry must be present in the checkpoint and vice versa.
pub fn load_into<T: Scalar>(dir: &Path, params: &mut Params<T>) -> Result<Vec<(String, String)>> {
    let (config, names) = read_manifest(dir)?;
    let mut want: Vec<&str> = params.names.iter().map(String::as_str).collect();
    want.sort_unstable();
    let mut have: Vec<&str> = names.iter().map(String::as_str).collect();
    have.sort_unstable();
    if want != have {
        let missing: Vec<&&str> = want.iter().filter(|n| !have.contains(n)).collect();
        let extra: Vec<&&str> = have.iter().filter(|n| !want.contains(n)).collect();
        return Err(Error::format(
            dir.join("manifest.txt"),
            format!("tensor set mismatch; missing {missing:?}, unexpected {extra:?}"),
        ));
    }
    for name in &names {
        let t = crate::tfile::read_tensor::<T>(&dir.join(format!("{name}.tns")))?;
        let id = params.id_of(name).expect("name checked above");
        if params.get(id).shape() != t.shape() {
            return Err(Error::format(
                dir.join(format!("{name}.tns")),
                format!("shape {:?} does not match model {:?}", t.shape(), params.get(id).shape()),
            ));
        }
        params.set(id, t);
    }
    Ok(config)
}

/// Convenience: config lookup in the pairs returned by checkpoint loads.
pub fn config_value<'a>(config: &'a [(String, String)], key: &str) -> Option<&'a str> {
    config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}
