//! The four-stage backbone: convolution stem, stages of Mixing Blocks with
//! stride-2 downsampling in between, a per-position projection layer and a
//! linear classifier.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, ParamStore, Session, Var};
use crate::block::{BlockMode, MixingBlock, MixingBlockConfig};
use crate::error::{Error, Result};
use crate::interaction::{hidden_width, DEFAULT_REDUCTION};
use crate::nn::{BatchNorm2d, Conv2d, Conv2dSpec, Linear};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
pub const VARIANTS: [&str; 7] = ["b0", "b1", "b2", "b3", "b4", "b5", "b6"];

/// Settings shared by every Mixing Block of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockTemplate {
    /// Fraction of each stage's channels given to the attention branch.
    pub attn_split: f64,
    pub window_size: usize,
    pub conv_kernel: usize,
    pub ffn_ratio: usize,
    pub mode: BlockMode,
    pub channel_interaction: bool,
    pub spatial_interaction: bool,
    /// Shift the windows of every odd-indexed block in a stage.
    pub shifted_windows: bool,
    pub dwconv_in_ffn: bool,
    pub relative_position_bias: bool,
    pub reduction: usize,
}

impl Default for BlockTemplate {
    fn default() -> Self {
        BlockTemplate {
            attn_split: 0.5,
            window_size: 7,
            conv_kernel: 3,
            ffn_ratio: 4,
            mode: BlockMode::Parallel,
            channel_interaction: true,
            spatial_interaction: true,
            shifted_windows: false,
            dwconv_in_ffn: false,
            relative_position_bias: true,
            reduction: DEFAULT_REDUCTION,
        }
    }
}

fn default_classes() -> usize {
    1000
}
fn default_image() -> usize {
    224
}
fn default_in_channels() -> usize {
    3
}
fn default_projection() -> usize {
    1280
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub base_channels: usize,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    /// Per-stage widths; `C·2^i` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_dims: Option<Vec<usize>>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_projection")]
    pub projection_dim: usize,
    /// Successive-mode widths per stage, used when loading weights whose
    /// widths were chosen differently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successive_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub block: BlockTemplate,
}

impl ModelConfig {
    pub fn new(name: &str, base_channels: usize, blocks: [usize; 4], heads: [usize; 4]) -> Self {
        ModelConfig {
            name: name.to_string(),
            base_channels,
            blocks: blocks.to_vec(),
            heads: heads.to_vec(),
            stage_dims: None,
            num_classes: default_classes(),
            image_size: default_image(),
            in_channels: default_in_channels(),
            projection_dim: default_projection(),
            successive_dims: None,
            block: BlockTemplate::default(),
        }
    }

    /// Named architecture variant, `b0` to `b6` (case-insensitive).
    pub fn variant(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (c, blocks, heads) = match lower.as_str() {
            "b0" => (24, [1, 2, 6, 6], [3, 6, 12, 24]),
            "b1" => (32, [1, 2, 6, 6], [2, 4, 8, 16]),
            "b2" => (32, [2, 2, 8, 8], [2, 4, 8, 16]),
            "b3" => (48, [2, 2, 8, 6], [3, 6, 12, 24]),
            "b4" => (64, [2, 2, 8, 8], [4, 8, 16, 32]),
            "b5" => (96, [1, 2, 8, 6], [6, 12, 24, 48]),
            "b6" => (96, [2, 4, 16, 12], [6, 12, 24, 48]),
            _ => {
                return Err(Error::UnknownVariant {
                    name: name.to_string(),
                    known: VARIANTS.iter().map(|s| s.to_string()).collect(),
                })
            }
        };
        Ok(ModelConfig::new(&lower, c, blocks, heads))
    }

    /// Small model used for the toy training run and end-to-end checks.
    pub fn micro() -> Self {
        ModelConfig {
            num_classes: 4,
            image_size: 56,
            ..ModelConfig::new("micro", 16, [1, 1, 2, 1], [1, 2, 4, 8])
        }
    }

    pub fn stage_dims(&self) -> Vec<usize> {
        match &self.stage_dims {
            Some(d) => d.clone(),
            None => (0..NUM_STAGES).map(|i| self.base_channels << i).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, len) in [("blocks", self.blocks.len()), ("heads", self.heads.len())] {
            if len != NUM_STAGES {
                return Err(Error::Config(format!("{what} must list {NUM_STAGES} stages, got {len}")));
            }
        }
        if let Some(d) = &self.stage_dims {
            if d.len() != NUM_STAGES {
                return Err(Error::Config(format!("stage_dims must list {NUM_STAGES} stages, got {}", d.len())));
            }
        }
        if let Some(d) = &self.successive_dims {
            if d.len() != NUM_STAGES {
                return Err(Error::Config(format!(
                    "successive_dims must list {NUM_STAGES} stages, got {}",
                    d.len()
                )));
            }
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!("base channels must be even and >= 2, got {}", self.base_channels)));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.projection_dim == 0 {
            return Err(Error::Config("classes, input channels and projection width must be positive".into()));
        }
        if !(self.block.attn_split > 0.0 && self.block.attn_split < 1.0) {
            return Err(Error::Config(format!("attn_split must be in (0, 1), got {}", self.block.attn_split)));
        }
        for i in 0..NUM_STAGES {
            self.block_config(i, 0).validate()?;
            if self.blocks[i] > 1 {
                self.block_config(i, 1).validate()?;
            }
        }
        Ok(())
    }

    /// Configuration of block `j` in stage `i`.
    pub fn block_config(&self, stage: usize, index: usize) -> MixingBlockConfig {
        let dim = self.stage_dims()[stage];
        let heads = self.heads[stage];
        let t = &self.block;
        let attn_dim = split_channels(dim, heads, t.attn_split);
        MixingBlockConfig {
            dim,
            attn_dim,
            conv_dim: dim - attn_dim,
            num_heads: heads,
            window_size: t.window_size,
            conv_kernel: t.conv_kernel,
            ffn_ratio: t.ffn_ratio,
            mode: t.mode,
            channel_interaction: t.channel_interaction,
            spatial_interaction: t.spatial_interaction,
            shifted_window: t.shifted_windows && index % 2 == 1,
            dwconv_in_ffn: t.dwconv_in_ffn,
            relative_position_bias: t.relative_position_bias,
            reduction: t.reduction,
            successive_dim: self.successive_dims.as_ref().map(|d| d[stage]),
        }
    }

    /// Stage widths of the stem: `(in, C/2, C)`.
    pub fn stem_widths(&self) -> (usize, usize, usize) {
        let c = self.stage_dims()[0];
        (self.in_channels, self.base_channels / 2, c)
    }

    /// Reconstructs the configuration from parameter names and shapes.
    /// The shift flag leaves no trace in the weights and is assumed off.
    pub fn infer_from(store: &ParamStore) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            store
                .by_name(name)
                .map(|p| p.value.shape().to_vec())
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        let has = |name: &str| store.id(name).is_some();
        let conv1 = shape("stem.conv1.weight")?;
        let (in_channels, base_channels) = (conv1[1], conv1[0] * 2);
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut dims = Vec::new();
        let mut succ = Vec::new();
        for i in 0..NUM_STAGES {
            let count = (0..)
                .take_while(|j| has(&format!("stages.{i}.blocks.{j}.norm1.weight")))
                .count();
            if count == 0 {
                return Err(Error::MissingParameter(format!("stages.{i}.blocks.0.norm1.weight")));
            }
            blocks.push(count);
            let prefix = format!("stages.{i}.blocks.0");
            dims.push(shape(&format!("{prefix}.norm1.weight"))?[0]);
            let table = shape(&format!("{prefix}.mix.attn.relative_position_bias_table")).map_err(|_| {
                Error::Format(format!(
                    "cannot infer heads of stage {i} without a position bias table; pass a config"
                ))
            })?;
            heads.push(table[1]);
            succ.push(shape(&format!("{prefix}.mix.attn_in.weight"))?[1]);
        }
        let p = "stages.0.blocks.0";
        let rows = shape(&format!("{p}.mix.attn.relative_position_bias_table"))?[0];
        let span = (rows as f64).sqrt().round() as usize;
        if span * span != rows || span.is_multiple_of(2) {
            return Err(Error::Format(format!("position bias table with {rows} rows")));
        }
        let parallel = has(&format!("{p}.mix.conv_in.weight"));
        let dim0 = dims[0];
        let attn0 = succ[0];
        let ci = format!("{p}.mix.channel_interaction.conv1.weight");
        // (input width, hidden width) of every channel gate's first conv
        let gates: Vec<(usize, usize)> = (0..NUM_STAGES)
            .filter_map(|i| store.by_name(&format!("stages.{i}.blocks.0.mix.channel_interaction.conv1.weight")))
            .map(|w| (w.value.shape()[1], w.value.shape()[0]))
            .collect();
        let reduction = if gates.is_empty() {
            DEFAULT_REDUCTION
        } else {
            let widest = gates.iter().map(|g| g.0).max().unwrap_or(1);
            (1..=widest)
                .find(|&r| gates.iter().all(|&(c, h)| hidden_width(c, r) == h))
                .ok_or_else(|| Error::Format("inconsistent channel gate widths".into()))?
        };
        let head = shape("head.weight")?;
        let block = BlockTemplate {
            attn_split: if parallel { attn0 as f64 / dim0 as f64 } else { 0.5 },
            window_size: span.div_ceil(2),
            conv_kernel: shape(&format!("{p}.mix.dwconv.weight"))?[2],
            ffn_ratio: shape(&format!("{p}.ffn.fc1.weight"))?[1] / dim0,
            mode: if parallel { BlockMode::Parallel } else { BlockMode::Successive },
            channel_interaction: has(&ci),
            spatial_interaction: has(&format!("{p}.mix.spatial_interaction.conv1.weight")),
            shifted_windows: false,
            dwconv_in_ffn: has(&format!("{p}.ffn.dwconv.weight")),
            relative_position_bias: true,
            reduction,
        };
        let doubling: Vec<usize> = (0..NUM_STAGES).map(|i| base_channels << i).collect();
        let cfg = ModelConfig {
            name: String::new(),
            base_channels,
            blocks,
            heads,
            stage_dims: (dims != doubling).then_some(dims),
            num_classes: head[1],
            image_size: default_image(),
            in_channels,
            projection_dim: head[0],
            successive_dims: (!parallel).then_some(succ),
            block,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attention share of `dim`, rounded to a multiple of `heads` and kept
/// strictly inside `(0, dim)` when possible.
pub fn split_channels(dim: usize, heads: usize, fraction: f64) -> usize {
    let heads = heads.max(1);
    let units = ((dim as f64 * fraction) / heads as f64).round().max(1.0) as usize;
    let mut a = units * heads;
    while a >= dim && a > heads {
        a -= heads;
    }
    a
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(b: &mut ParamBuilder<'_>, conv: &str, bn: &str, spec: Conv2dSpec) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(b, conv, spec, false)?,
            bn: BatchNorm2d::new(b, bn, spec.out_channels)?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    layers: [ConvBn; 3],
}

impl Stem {
    fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (cin, mid, out) = cfg.stem_widths();
        Ok(Stem {
            layers: [
                ConvBn::new(b, "stem.conv1", "stem.bn1", Conv2dSpec::same(cin, mid, 3, 2))?,
                ConvBn::new(b, "stem.conv2", "stem.bn2", Conv2dSpec::same(mid, mid, 3, 1))?,
                ConvBn::new(b, "stem.conv3", "stem.bn3", Conv2dSpec::same(mid, out, 3, 2))?,
            ],
        })
    }

    /// `(N, 3, H, W) -> (N, C, ⌈H/4⌉, ⌈W/4⌉)`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.len() != 4 || shape[2] < 4 || shape[3] < 4 {
            return Err(Error::invalid("stem", format!("need (N, C, H>=4, W>=4), got {shape:?}")));
        }
        let y = self.layers[0].forward(s, x)?;
        let y = s.gelu(y);
        let y = self.layers[1].forward(s, y)?;
        let y = s.gelu(y);
        self.layers[2].forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    downsample: Option<ConvBn>,
    pub blocks: Vec<MixingBlock>,
}

impl Stage {
    /// Tokens in, tokens out; `(h, w)` is updated when the stage downsamples.
    fn forward(&self, s: &mut Session<'_>, mut x: Var, h: &mut usize, w: &mut usize) -> Result<Var> {
        if let Some(ds) = &self.downsample {
            let map = s.tokens_to_nchw(x, *h, *w)?;
            let map = ds.forward(s, map)?;
            let shape = s.shape(map);
            (*h, *w) = (shape[2], shape[3]);
            x = s.nchw_to_tokens(map)?;
        }
        for block in &self.blocks {
            x = block.forward(s, x, *h, *w)?;
        }
        Ok(x)
    }
}

/// Layers of a built model. Parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    pub stages: Vec<Stage>,
    projection: Linear,
    head: Linear,
}

/// Output of [`Backbone::forward`].
pub struct Forward {
    /// Per-stage feature maps, NCHW.
    pub features: Vec<Var>,
    pub logits: Var,
}

impl Backbone {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.stage_dims();
        let stem = Stem::new(b, cfg)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let downsample = if i > 0 {
                Some(ConvBn::new(
                    b,
                    &format!("stages.{i}.downsample.conv"),
                    &format!("stages.{i}.downsample.bn"),
                    Conv2dSpec::same(dims[i - 1], dims[i], 3, 2),
                )?)
            } else {
                None
            };
            let blocks = (0..cfg.blocks[i])
                .map(|j| MixingBlock::new(b, &format!("stages.{i}.blocks.{j}"), cfg.block_config(i, j)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let projection = Linear::new(b, "projection", dims[NUM_STAGES - 1], cfg.projection_dim, true)?;
        let head = Linear::new(b, "head", cfg.projection_dim, cfg.num_classes, true)?;
        Ok(Backbone {
            stem,
            stages,
            projection,
            head,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Forward> {
        let shape = s.shape(x);
        if shape.len() == 4 && (shape[2] < 32 || shape[3] < 32) {
            return Err(Error::invalid(
                "classify",
                format!("input {}x{} is too small for four stride-2 stages (need >= 32)", shape[2], shape[3]),
            ));
        }
        let map = self.stem.forward(s, x)?;
        let shape = s.shape(map);
        let (mut h, mut w) = (shape[2], shape[3]);
        let mut tokens = s.nchw_to_tokens(map)?;
        let mut features = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            tokens = stage.forward(s, tokens, &mut h, &mut w)?;
            features.push(s.tokens_to_nchw(tokens, h, w)?);
        }
        let y = self.projection.forward(s, tokens)?;
        let y = s.gelu(y);
        let pooled = s.mean_axis(y, 1)?;
        let logits = self.head.forward(s, pooled)?;
        Ok(Forward { features, logits })
    }

    /// `(N, 3, H, W) -> (N, num_classes)`.
    pub fn classify(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.forward(s, x)?.logits)
    }
}

/// A backbone together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = {
            let mut b = ParamBuilder::new(&mut store, seed);
            Backbone::build(&mut b, &config)?
        };
        Ok(Model {
            config,
            store,
            backbone,
        })
    }

    pub fn variant(name: &str, seed: u64) -> Result<Self> {
        Model::build(ModelConfig::variant(name)?, seed)
    }

    /// Builds the layers for `config` and takes parameter values from
    /// `store`, which must hold exactly the expected names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        let expected: BTreeSet<&str> = model.store.iter().map(|(_, p)| p.name.as_str()).collect();
        let given: BTreeSet<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        if let Some(missing) = expected.difference(&given).next() {
            return Err(Error::MissingParameter((*missing).to_string()));
        }
        if let Some(extra) = given.difference(&expected).next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        for (_, p) in model.store.iter() {
            let src = store.by_name(&p.name).expect("checked above");
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load", src.value.shape(), p.value.shape()));
            }
        }
        model.store.copy_matching_from(&store);
        Ok(model)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Split borrow for running sessions.
    pub fn parts(&mut self) -> (&Backbone, &mut ParamStore) {
        (&self.backbone, &mut self.store)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let (net, store) = self.parts();
        let mut s = Session::inference(store, false);
        let xv = s.input(x.clone());
        let y = net.classify(&mut s, xv)?;
        Ok((*s.value(y)).clone())
    }

    /// Eval-mode per-stage feature maps.
    pub fn features(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (net, store) = self.parts();
        let mut s = Session::inference(store, false);
        let xv = s.input(x.clone());
        let out = net.forward(&mut s, xv)?;
        Ok(out.features.iter().map(|&f| (*s.value(f)).clone()).collect())
    }
}
