use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::embed::{class_projection, time_embedding};
use super::ModelError;
use crate::tensor::{Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels_in: usize,
    pub length_in: usize,
    /// Feature maps at the first level.
    pub base_width: usize,
    pub level_mult: [usize; 3],
    /// Temporal kernel length of the two convolutions at each level.
    pub kernel_len: [usize; 3],
    pub emb_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels_in: 64,
            length_in: 1000,
            base_width: 8,
            level_mult: [1, 2, 4],
            kernel_len: [7, 3, 3],
            emb_dim: 32,
            n_classes: 4,
            dropout_p: 0.1,
            groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> [usize; 3] {
        self.level_mult.map(|m| m * self.base_width)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channels_in == 0 || self.base_width == 0 || self.n_classes < 2 {
            return bad(format!(
                "channels_in {}, base_width {}, n_classes {}",
                self.channels_in, self.base_width, self.n_classes
            ));
        }
        if self.length_in == 0 || !self.length_in.is_multiple_of(4) {
            return bad(format!("length_in {} must be a positive multiple of 4", self.length_in));
        }
        if self.groups == 0 || self.widths().iter().any(|w| w % self.groups != 0) {
            return bad(format!("widths {:?} not divisible by {} groups", self.widths(), self.groups));
        }
        if self.level_mult.contains(&0) {
            return bad("zero level multiplier".into());
        }
        if self.kernel_len.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel lengths {:?} must be odd", self.kernel_len));
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return Err(ModelError::OddEmbedding(self.emb_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {}", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIx {
    w: usize,
    b: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinIx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: ConvIx,
    norm: NormIx,
}

#[derive(Clone, Copy, Debug)]
struct EncLevel {
    first: Block,
    second: Block,
    cond: LinIx,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ConvIx {
        let w = self.push(format!("{name}.weight"), vec![cout, cin, k], ParamKind::Weight { fan_in: cin * k });
        let b = self.push(format!("{name}.bias"), vec![cout], ParamKind::Bias);
        ConvIx { w, b, k }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormIx {
        let gamma = self.push(format!("{name}.gamma"), vec![c], ParamKind::NormScale);
        let beta = self.push(format!("{name}.beta"), vec![c], ParamKind::NormShift);
        NormIx { gamma, beta }
    }

    fn block(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Block {
        let conv = self.conv(&format!("{name}.conv"), cout, cin, k);
        let norm = self.norm(&format!("{name}.norm"), cout);
        Block { conv, norm }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinIx {
        let w = self.push(format!("{name}.weight"), vec![out, inp], ParamKind::Weight { fan_in: inp });
        let b = self.push(format!("{name}.bias"), vec![out], ParamKind::Bias);
        LinIx { w, b }
    }
}

/// Declaration-ordered parameter layout of the network for one config.
#[derive(Clone, Debug)]
pub struct Layout {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    time_proj: LinIx,
    class_emb: usize,
    in_proj: ConvIx,
    enc: [EncLevel; 3],
    down: [ConvIx; 2],
    mid: Block,
    // Indexed by level; dec[2] runs at L/4.
    dec: [Block; 3],
    // up[l] maps level l+1 features onto level l.
    up: [ConvIx; 2],
    eps_out: ConvIx,
    rec_up: [Block; 2],
    rec_out: ConvIx,
    classifier: LinIx,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let w = config.widths();
        let k = config.kernel_len;
        let c = config.channels_in;
        let mut b = Builder::default();

        let time_proj = b.linear("time_proj", config.emb_dim, config.emb_dim);
        let class_emb = b.push("class_emb".into(), vec![config.n_classes, config.emb_dim], ParamKind::Embedding);
        let in_proj = b.conv("in_proj", w[0], c, k[0]);
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for l in 0..3 {
            if l > 0 {
                down.push(b.conv(&format!("down{l}"), w[l], w[l - 1], 3));
            }
            let first = b.block(&format!("enc{l}.0"), w[l], w[l], k[l]);
            let second = b.block(&format!("enc{l}.1"), w[l], w[l], k[l]);
            let cond = b.linear(&format!("enc{l}.cond"), w[l], config.emb_dim);
            enc.push(EncLevel { first, second, cond });
        }
        let mid = b.block("mid", w[2], w[2], k[2]);
        let dec2 = b.block("dec2", w[2], 2 * w[2], k[2]);
        let up1 = b.conv("up1", w[1], w[2], 3);
        let dec1 = b.block("dec1", w[1], 2 * w[1], k[1]);
        let up0 = b.conv("up0", w[0], w[1], 3);
        let dec0 = b.block("dec0", w[0], 2 * w[0], k[0]);
        let eps_out = b.conv("eps_out", c, w[0], 3);
        let rec1 = b.block("rec1", w[1], w[2], 3);
        let rec0 = b.block("rec0", w[0], w[1], 3);
        let rec_out = b.conv("rec_out", c, w[0], 3);
        let classifier = b.linear("classifier", config.n_classes, w[2]);

        Ok(Layout {
            config: config.clone(),
            specs: b.specs,
            time_proj,
            class_emb,
            in_proj,
            enc: [enc[0], enc[1], enc[2]],
            down: [down[0], down[1]],
            mid,
            dec: [dec0, dec1, dec2],
            up: [up0, up1],
            eps_out,
            rec_up: [rec0, rec1],
            rec_out,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

/// Exact trainable-parameter count for a config.
pub fn count_params(config: &ModelConfig) -> Result<usize, ModelError> {
    Ok(Layout::new(config)?.num_params())
}

/// Flat, declaration-ordered parameter store.
#[derive(Clone, Debug)]
pub struct ModelParams {
    layout: Layout,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layout.config == other.layout.config && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// Seeded initialisation: weights `U(±1/√fan_in)`, zero biases, unit norm
    /// scales, standard-normal class embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<f64> = match spec.kind {
                    ParamKind::Weight { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let dist = Uniform::new(-bound, bound).expect("finite bound");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    ParamKind::Bias | ParamKind::NormShift => vec![0.0; n],
                    ParamKind::NormScale => vec![1.0; n],
                    ParamKind::Embedding => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
                };
                Tensor::new(spec.shape.clone(), data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams { layout, tensors })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let layout = Layout::new(config)?;
        if tensors.len() != layout.specs.len() {
            return Err(ModelError::Shape(format!("{} tensors for {} parameters", tensors.len(), layout.specs.len())));
        }
        for (t, s) in tensors.iter().zip(&layout.specs) {
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::Shape(format!("{}: {:?} vs {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(ModelParams { layout, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layout.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    /// All values concatenated in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds from a flat vector produced by [`ModelParams::flat`].
    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        let layout = Layout::new(config)?;
        let expected = layout.num_params();
        if flat.len() != expected {
            return Err(ModelError::ParamCount { expected, got: flat.len() });
        }
        let mut offset = 0;
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let t = Tensor::new(s.shape.clone(), flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams { layout, tensors })
    }

    /// Little-endian `f32` encoding in declaration order.
    pub fn to_f32_le(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params() * 4);
        for v in self.tensors.iter().flat_map(|t| t.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_le(config: &ModelConfig, bytes: &[u8]) -> Result<Self, ModelError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(ModelError::Shape(format!("{} bytes is not a whole number of f32", bytes.len())));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        ModelParams::from_flat(config, &flat)
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Places every parameter on the graph, as trainable leaves or constants.
    pub fn add_to_graph(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Which outputs the forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// Bottleneck, noise prediction and reconstruction.
    All,
    /// Bottleneck only; enough for classification.
    EncoderOnly,
}

/// Diffusion timestep and optional class label fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conditioning {
    pub timestep: usize,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct UNetOutput {
    /// Bottleneck features, `w3 × L/4`.
    pub z: Var,
    pub eps_hat: Option<Var>,
    pub x0_hat: Option<Var>,
}

fn conv(g: &mut Graph, p: &[Var], x: Var, c: ConvIx, stride: usize) -> Result<Var, ModelError> {
    Ok(g.conv1d(x, p[c.w], p[c.b], stride, c.k / 2)?)
}

fn block(g: &mut Graph, p: &[Var], x: Var, b: Block, groups: usize) -> Result<Var, ModelError> {
    let h = conv(g, p, x, b.conv, 1)?;
    let h = g.group_norm(h, groups, p[b.norm.gamma], p[b.norm.beta], NORM_EPS)?;
    Ok(g.silu(h)?)
}

/// Three-level U-Net forward pass.
///
/// Encoder levels run at lengths L, L/2, L/4 (stride-2 convolutions between
/// them). After each level the conditioning vector is projected to the level
/// width and added at every time step. The decoder upsamples by nearest
/// neighbour followed by a convolution and concatenates the matching encoder
/// output before each block.
#[allow(clippy::too_many_arguments)]
pub fn unet_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    layout: &Layout,
    p: &[Var],
    x: Var,
    cond: Conditioning,
    training: bool,
    rng: &mut R,
    heads: Heads,
) -> Result<UNetOutput, ModelError> {
    let cfg = &layout.config;
    let shape = g.value(x).shape();
    if shape != [cfg.channels_in, cfg.length_in] {
        return Err(ModelError::Shape(format!(
            "input {:?}, expected [{}, {}]",
            shape, cfg.channels_in, cfg.length_in
        )));
    }
    if p.len() != layout.specs.len() {
        return Err(ModelError::Shape(format!("{} parameter vars for {} parameters", p.len(), layout.specs.len())));
    }
    let groups = cfg.groups;

    let t_sin = g.constant(Tensor::from_vec(time_embedding(cond.timestep, cfg.emb_dim)?));
    let mut e = g.linear(t_sin, p[layout.time_proj.w], p[layout.time_proj.b])?;
    if let Some(c) = class_projection(g, p[layout.class_emb], cond.label)? {
        e = g.add(e, c)?;
    }
    let e = g.silu(e)?;

    let mut h = conv(g, p, x, layout.in_proj, 1)?;
    let mut skips = Vec::with_capacity(3);
    for (l, level) in layout.enc.iter().enumerate() {
        if l > 0 {
            h = conv(g, p, h, layout.down[l - 1], 2)?;
        }
        h = block(g, p, h, level.first, groups)?;
        h = block(g, p, h, level.second, groups)?;
        let v = g.linear(e, p[level.cond.w], p[level.cond.b])?;
        h = g.add_channel(h, v)?;
        h = g.dropout(h, cfg.dropout_p, rng, training)?;
        skips.push(h);
    }
    let z = block(g, p, skips[2], layout.mid, groups)?;

    if heads == Heads::EncoderOnly {
        return Ok(UNetOutput { z, eps_hat: None, x0_hat: None });
    }

    let cat = g.concat(z, skips[2])?;
    let mut d = block(g, p, cat, layout.dec[2], groups)?;
    for l in (0..2).rev() {
        let u = g.upsample(d, 2)?;
        let u = conv(g, p, u, layout.up[l], 1)?;
        let cat = g.concat(u, skips[l])?;
        d = block(g, p, cat, layout.dec[l], groups)?;
    }
    let eps_hat = conv(g, p, d, layout.eps_out, 1)?;

    let mut r = z;
    for l in (0..2).rev() {
        let u = g.upsample(r, 2)?;
        r = block(g, p, u, layout.rec_up[l], groups)?;
    }
    let x0_hat = conv(g, p, r, layout.rec_out, 1)?;

    Ok(UNetOutput { z, eps_hat: Some(eps_hat), x0_hat: Some(x0_hat) })
}

/// Global average pool over time, dropout, then the linear class head.
pub fn classify<R: Rng + ?Sized>(
    g: &mut Graph,
    layout: &Layout,
    p: &[Var],
    z: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let pooled = g.mean_time(z)?;
    let pooled = g.dropout(pooled, layout.config.dropout_p, rng, training)?;
    Ok(g.linear(pooled, p[layout.classifier.w], p[layout.classifier.b])?)
}
