//! The Mixing Block: window attention and depth-wise convolution side by side
//! (or stacked, in successive mode), linked by the interaction gates, followed
//! by a feed-forward network. Both halves are residual.

use serde::{Deserialize, Serialize};

use crate::attention::{WindowAttention, WmsaConfig};
use crate::autodiff::{ParamBuilder, Session, Var};
use crate::error::{Error, Result};
use crate::interaction::{hidden_width, ChannelInteraction, GateShape, SpatialInteraction, DEFAULT_REDUCTION};
use crate::nn::{BatchNorm2d, Conv2d, Conv2dSpec, LayerNorm, Linear};
use crate::window::WindowLayout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    #[default]
    Parallel,
    Successive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingBlockConfig {
    pub dim: usize,
    /// Channels of the attention branch (parallel mode).
    pub attn_dim: usize,
    /// Channels of the convolution branch (parallel mode).
    pub conv_dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub conv_kernel: usize,
    pub ffn_ratio: usize,
    pub mode: BlockMode,
    pub channel_interaction: bool,
    pub spatial_interaction: bool,
    /// Roll the window grid by `⌊K/2⌋` in this block.
    pub shifted_window: bool,
    pub dwconv_in_ffn: bool,
    pub relative_position_bias: bool,
    pub reduction: usize,
    /// Width of the stacked attention/conv path in successive mode. `None`
    /// picks the multiple of `num_heads` whose parameter count is closest to
    /// the parallel block of the same `dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successive_dim: Option<usize>,
}

impl MixingBlockConfig {
    /// Even channel split, 7×7 windows, 3×3 dwconv, both interactions on.
    pub fn new(dim: usize, num_heads: usize) -> Self {
        let attn_dim = dim / 2;
        MixingBlockConfig {
            dim,
            attn_dim,
            conv_dim: dim - attn_dim,
            num_heads,
            window_size: 7,
            conv_kernel: 3,
            ffn_ratio: 4,
            mode: BlockMode::Parallel,
            channel_interaction: true,
            spatial_interaction: true,
            shifted_window: false,
            dwconv_in_ffn: false,
            relative_position_bias: true,
            reduction: DEFAULT_REDUCTION,
            successive_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attn_dim + self.conv_dim != self.dim {
            return Err(Error::Config(format!(
                "attn_dim {} + conv_dim {} != dim {}",
                self.attn_dim, self.conv_dim, self.dim
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn ratio must be at least 1".into()));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        match self.mode {
            BlockMode::Parallel => {
                if self.attn_dim == 0 || self.conv_dim == 0 {
                    return Err(Error::Config(format!("empty branch in split {}/{}", self.attn_dim, self.conv_dim)));
                }
                self.wmsa(self.attn_dim).validate()
            }
            BlockMode::Successive => self.wmsa(self.mixing_width()).validate(),
        }
    }

    pub fn shift(&self) -> usize {
        if self.shifted_window {
            self.window_size / 2
        } else {
            0
        }
    }

    fn wmsa(&self, dim: usize) -> WmsaConfig {
        WmsaConfig {
            relative_position_bias: self.relative_position_bias,
            ..WmsaConfig::new(dim, self.num_heads, self.window_size)
        }
    }

    /// Attention width: `attn_dim` in parallel mode, the stacked width in
    /// successive mode.
    pub fn attention_width(&self) -> usize {
        match self.mode {
            BlockMode::Parallel => self.attn_dim,
            BlockMode::Successive => self.mixing_width(),
        }
    }

    /// Width of the stacked path in successive mode.
    pub fn mixing_width(&self) -> usize {
        if let Some(d) = self.successive_dim {
            return d;
        }
        let target = self.mix_params_parallel() as i64;
        let h = self.num_heads.max(1);
        (1..=self.dim.div_ceil(h).max(1) * 2)
            .map(|m| m * h)
            .min_by_key(|&d| (self.mix_params_successive(d) as i64 - target).abs())
            .unwrap_or(h)
    }

    fn gate(&self, in_channels: usize, out_channels: usize) -> GateShape {
        GateShape {
            in_channels,
            out_channels,
            hidden: hidden_width(in_channels, self.reduction),
        }
    }

    fn interactions_params(&self, conv_in: usize, attn: usize) -> usize {
        let mut n = 0;
        if self.channel_interaction {
            n += self.gate(conv_in, attn).num_params();
        }
        if self.spatial_interaction {
            n += self.gate(attn, 1).num_params();
        }
        n
    }

    fn mix_params_parallel(&self) -> usize {
        let (d, da, dc, k) = (self.dim, self.attn_dim, self.conv_dim, self.conv_kernel);
        let attn_in = d * da + da;
        let conv_in = d * dc;
        let dw = dc * k * k + 2 * dc;
        let attn = self.wmsa(da).num_params() + 2 * da;
        attn_in + conv_in + dw + attn + self.interactions_params(dc, da) + d * d + d
    }

    fn mix_params_successive(&self, ds: usize) -> usize {
        let (d, k) = (self.dim, self.conv_kernel);
        let attn_in = d * ds + ds;
        let attn = self.wmsa(ds).num_params() + 2 * ds;
        let dw = ds * k * k + 2 * ds;
        attn_in + attn + dw + self.interactions_params(ds, ds) + ds * d + d
    }

    fn ffn_params(&self) -> usize {
        let (d, e) = (self.dim, self.dim * self.ffn_ratio);
        let dw = if self.dwconv_in_ffn { e * 9 + e } else { 0 };
        d * e + e + dw + e * d + d
    }

    /// Trainable parameters of one block.
    pub fn num_params(&self) -> usize {
        let mix = match self.mode {
            BlockMode::Parallel => self.mix_params_parallel(),
            BlockMode::Successive => self.mix_params_successive(self.mixing_width()),
        };
        2 * self.dim + mix + 2 * self.dim + self.ffn_params()
    }
}

/// Replacement gates, mainly for tests: when set they are used instead of
/// (or in addition to, if the interaction is disabled) the computed gates.
#[derive(Clone, Copy, Debug, Default)]
pub struct GateOverride {
    /// `(N, attention width)`.
    pub channel: Option<Var>,
    /// `(N, 1, H, W)`.
    pub spatial: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub dim: usize,
    pub hidden: usize,
    fc1: Linear,
    dwconv: Option<Conv2d>,
    fc2: Linear,
}

impl Ffn {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, ratio: usize, dwconv: bool) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("ffn ratio must be at least 1".into()));
        }
        let hidden = dim * ratio;
        Ok(Ffn {
            dim,
            hidden,
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, true)?,
            dwconv: if dwconv {
                Some(Conv2d::new(b, &format!("{name}.dwconv"), Conv2dSpec::depthwise(hidden, 3, 1), true)?)
            } else {
                None
            },
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    /// `(N, L, D) -> (N, L, D)`; `h·w` must equal `L` when the dwconv is on.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.fc1.forward(s, x)?;
        let mut y = s.gelu(y);
        if let Some(dw) = &self.dwconv {
            let l = s.shape(x)[1];
            if l != h * w {
                return Err(Error::invalid("ffn", format!("sequence length {l} != {h}x{w}")));
            }
            let map = s.tokens_to_nchw(y, h, w)?;
            let map = dw.forward(s, map)?;
            y = s.nchw_to_tokens(map)?;
        }
        self.fc2.forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct MixingBlock {
    pub cfg: MixingBlockConfig,
    norm1: LayerNorm,
    attn_in: Linear,
    conv_in: Option<Conv2d>,
    dwconv: Conv2d,
    conv_bn: BatchNorm2d,
    attn: WindowAttention,
    attn_norm: LayerNorm,
    channel: Option<ChannelInteraction>,
    spatial: Option<SpatialInteraction>,
    proj: Linear,
    norm2: LayerNorm,
    ffn: Ffn,
}

impl MixingBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: MixingBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mix = format!("{name}.mix");
        let (width_a, width_c) = match cfg.mode {
            BlockMode::Parallel => (cfg.attn_dim, cfg.conv_dim),
            BlockMode::Successive => {
                let ds = cfg.mixing_width();
                (ds, ds)
            }
        };
        let norm1 = LayerNorm::new(b, &format!("{name}.norm1"), d)?;
        let attn_in = Linear::new(b, &format!("{mix}.attn_in"), d, width_a, true)?;
        let conv_in = match cfg.mode {
            BlockMode::Parallel => Some(Conv2d::new(b, &format!("{mix}.conv_in"), Conv2dSpec::pointwise(d, width_c), false)?),
            BlockMode::Successive => None,
        };
        let dwconv = Conv2d::new(
            b,
            &format!("{mix}.dwconv"),
            Conv2dSpec::depthwise(width_c, cfg.conv_kernel, 1),
            false,
        )?;
        let conv_bn = BatchNorm2d::new(b, &format!("{mix}.conv_bn"), width_c)?;
        let attn = WindowAttention::new(b, &format!("{mix}.attn"), cfg.wmsa(width_a))?;
        let attn_norm = LayerNorm::new(b, &format!("{mix}.attn_norm"), width_a)?;
        // In successive mode there is no conv output before attention, so the
        // channel gate reads the projected input instead.
        let channel = if cfg.channel_interaction {
            Some(ChannelInteraction::new(
                b,
                &format!("{mix}.channel_interaction"),
                width_c,
                width_a,
                cfg.reduction,
            )?)
        } else {
            None
        };
        let spatial = if cfg.spatial_interaction {
            Some(SpatialInteraction::new(b, &format!("{mix}.spatial_interaction"), width_a, cfg.reduction)?)
        } else {
            None
        };
        let proj_in = match cfg.mode {
            BlockMode::Parallel => width_a + width_c,
            BlockMode::Successive => width_c,
        };
        let proj = Linear::new(b, &format!("{mix}.proj"), proj_in, d, true)?;
        let norm2 = LayerNorm::new(b, &format!("{name}.norm2"), d)?;
        let ffn = Ffn::new(b, &format!("{name}.ffn"), d, cfg.ffn_ratio, cfg.dwconv_in_ffn)?;
        Ok(MixingBlock {
            cfg,
            norm1,
            attn_in,
            conv_in,
            dwconv,
            conv_bn,
            attn,
            attn_norm,
            channel,
            spatial,
            proj,
            norm2,
            ffn,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        self.forward_with(s, x, h, w, GateOverride::default())
    }

    /// `(N, H·W, D) -> (N, H·W, D)`.
    pub fn forward_with(&self, s: &mut Session<'_>, x: Var, h: usize, w: usize, gates: GateOverride) -> Result<Var> {
        let shape = s.shape(x);
        if shape.len() != 3 || shape[1] != h * w || shape[2] != self.cfg.dim {
            return Err(Error::invalid(
                "mixing_block",
                format!("expected (N, {}, {}), got {shape:?}", h * w, self.cfg.dim),
            ));
        }
        let y = self.norm1.forward(s, x)?;
        let mixed = match self.cfg.mode {
            BlockMode::Parallel => self.mix_parallel(s, y, h, w, gates)?,
            BlockMode::Successive => self.mix_successive(s, y, h, w, gates)?,
        };
        let x = s.add(x, mixed)?;
        let y = self.norm2.forward(s, x)?;
        let y = self.ffn.forward(s, y, h, w)?;
        s.add(x, y)
    }

    fn layout(&self, h: usize, w: usize) -> Result<WindowLayout> {
        WindowLayout::new(h, w, self.cfg.window_size, self.cfg.shift())
    }

    fn channel_gate(&self, s: &mut Session<'_>, feat: Var, gates: GateOverride) -> Result<Option<Var>> {
        if let Some(g) = gates.channel {
            return Ok(Some(g));
        }
        match &self.channel {
            Some(ci) => Ok(Some(ci.forward(s, feat)?)),
            None => Ok(None),
        }
    }

    /// Multiplies `conv (N, C, H, W)` by the spatial gate computed from the
    /// attention output `attn (N, H·W, C_a)`.
    fn apply_spatial(&self, s: &mut Session<'_>, conv: Var, attn: Var, h: usize, w: usize, gates: GateOverride) -> Result<Var> {
        let gate = match (gates.spatial, &self.spatial) {
            (Some(g), _) => g,
            (None, Some(si)) => {
                let map = s.tokens_to_nchw(attn, h, w)?;
                si.forward(s, map)?
            }
            (None, None) => return Ok(conv),
        };
        s.mul(conv, gate)
    }

    fn mix_parallel(&self, s: &mut Session<'_>, y: Var, h: usize, w: usize, gates: GateOverride) -> Result<Var> {
        let conv_in = self.conv_in.as_ref().expect("parallel block has a conv input projection");
        let map = s.tokens_to_nchw(y, h, w)?;
        let c = conv_in.forward(s, map)?;
        let c = self.dwconv.forward(s, c)?;
        let c = self.conv_bn.forward(s, c)?;

        let v_gate = self.channel_gate(s, c, gates)?;
        let a = self.attn_in.forward(s, y)?;
        let layout = self.layout(h, w)?;
        let a = self.attn.forward_tokens(s, a, &layout, v_gate)?;

        let c = self.apply_spatial(s, c, a, h, w, gates)?;
        let a = self.attn_norm.forward(s, a)?;
        let c = s.nchw_to_tokens(c)?;
        let merged = s.concat(&[a, c], 2)?;
        self.proj.forward(s, merged)
    }

    fn mix_successive(&self, s: &mut Session<'_>, y: Var, h: usize, w: usize, gates: GateOverride) -> Result<Var> {
        let p = self.attn_in.forward(s, y)?;
        let v_gate = if gates.channel.is_some() || self.channel.is_some() {
            let map = s.tokens_to_nchw(p, h, w)?;
            self.channel_gate(s, map, gates)?
        } else {
            None
        };
        let layout = self.layout(h, w)?;
        let a = self.attn.forward_tokens(s, p, &layout, v_gate)?;
        let an = self.attn_norm.forward(s, a)?;
        let map = s.tokens_to_nchw(an, h, w)?;
        let c = self.dwconv.forward(s, map)?;
        let c = self.conv_bn.forward(s, c)?;
        let c = self.apply_spatial(s, c, a, h, w, gates)?;
        let c = s.nchw_to_tokens(c)?;
        self.proj.forward(s, c)
    }

    pub fn num_params(&self) -> usize {
        self.cfg.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::tensor::Tensor;

    fn build(cfg: MixingBlockConfig) -> (ParamStore, MixingBlock) {
        let mut store = ParamStore::new();
        let block = {
            let mut b = ParamBuilder::new(&mut store, 7);
            MixingBlock::new(&mut b, "blk", cfg).unwrap()
        };
        (store, block)
    }

    #[test]
    fn output_shape_matches_input() {
        let (mut store, block) = build(MixingBlockConfig::new(32, 2));
        let x = Tensor::from_fn(vec![2, 196, 32], |i| (i as f64 * 0.01).sin()).unwrap();
        let mut s = Session::inference(&mut store, false);
        let xv = s.input(x);
        let y = block.forward(&mut s, xv, 14, 14).unwrap();
        assert_eq!(s.shape(y), vec![2, 196, 32]);
    }

    #[test]
    fn param_formula_matches_store() {
        for mode in [BlockMode::Parallel, BlockMode::Successive] {
            for flags in 0..16u8 {
                let cfg = MixingBlockConfig {
                    mode,
                    channel_interaction: flags & 1 != 0,
                    spatial_interaction: flags & 2 != 0,
                    shifted_window: flags & 4 != 0,
                    dwconv_in_ffn: flags & 8 != 0,
                    ..MixingBlockConfig::new(24, 3)
                };
                let (store, block) = build(cfg);
                assert_eq!(block.num_params(), store.num_trainable(), "{mode:?} flags {flags}");
            }
        }
    }

    #[test]
    fn successive_width_is_head_multiple() {
        let cfg = MixingBlockConfig {
            mode: BlockMode::Successive,
            ..MixingBlockConfig::new(64, 4)
        };
        let ds = cfg.mixing_width();
        assert_eq!(ds % 4, 0);
        assert!(ds > 32 && ds < 64, "{ds}");
    }

    #[test]
    fn invalid_split_is_rejected() {
        let cfg = MixingBlockConfig {
            attn_dim: 10,
            ..MixingBlockConfig::new(32, 2)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = MixingBlockConfig {
            conv_kernel: 4,
            ..MixingBlockConfig::new(32, 2)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequence_length_mismatch_is_rejected() {
        let (mut store, block) = build(MixingBlockConfig::new(8, 1));
        let mut s = Session::inference(&mut store, false);
        let x = s.input(Tensor::zeros(vec![1, 15, 8]).unwrap());
        assert!(block.forward(&mut s, x, 4, 4).is_err());
    }

    #[test]
    fn ffn_with_zero_weights_is_zero() {
        let mut store = ParamStore::new();
        let ffn = {
            let mut b = ParamBuilder::new(&mut store, 0);
            Ffn::new(&mut b, "ffn", 4, 2, true).unwrap()
        };
        store.zero_init();
        let mut s = Session::inference(&mut store, false);
        let x = s.input(Tensor::ones(vec![1, 4, 4]).unwrap());
        let y = ffn.forward(&mut s, x, 2, 2).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_cancels_pointwise_depthwise_scale() {
        // With a 1x1 kernel the dwconv only rescales channels, which a
        // train-mode batch norm undoes: its weight gradient is tiny.
        let cfg = MixingBlockConfig {
            conv_kernel: 1,
            channel_interaction: false,
            spatial_interaction: false,
            ..MixingBlockConfig::new(8, 2)
        };
        let (mut store, block) = build(cfg);
        let x = Tensor::from_fn(vec![2, 12, 8], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0).unwrap();
        let r = Tensor::from_fn(vec![2, 12, 8], |i| ((i * 53) % 7) as f64 / 3.0 - 1.0).unwrap();
        let grad_norm = |store: &mut ParamStore, train: bool| {
            store.zero_grad();
            let mut s = Session::new(store, train);
            let xv = s.input(x.clone());
            let y = block.forward(&mut s, xv, 3, 4).unwrap();
            let rv = s.constant(r.clone());
            let p = s.mul(y, rv).unwrap();
            let root = s.sum(p);
            s.backward(root).unwrap();
            let g = &store.by_name("blk.mix.dwconv.weight").unwrap().gradient;
            g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let train = grad_norm(&mut store, true);
        let eval = grad_norm(&mut store, false);
        assert!(train < 1e-3 * eval, "train {train:e} eval {eval:e}");
    }

    #[test]
    fn gradcheck_both_modes_with_padding_and_shift() {
        use crate::autodiff::{finite_difference_check, GradCheckOptions};
        use rand::{Rng, SeedableRng};
        for mode in [BlockMode::Parallel, BlockMode::Successive] {
            let cfg = MixingBlockConfig {
                mode,
                window_size: 3,
                shifted_window: true,
                dwconv_in_ffn: true,
                ffn_ratio: 2,
                ..MixingBlockConfig::new(8, 2)
            };
            let (mut store, block) = build(cfg);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            for p in store.iter_mut() {
                if p.role.is_trainable() {
                    p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
                }
            }
            let x = Tensor::from_fn(vec![3, 20, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
            let r = Tensor::from_fn(vec![3, 20, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
            let opts = GradCheckOptions {
                max_entries_per_tensor: Some(6),
                ..Default::default()
            };
            let report = finite_difference_check(&mut store, &[x], &opts, |s, inputs| {
                let y = block.forward(s, inputs[0], 4, 5)?;
                let rv = s.constant(r.clone());
                let p = s.mul(y, rv)?;
                Ok(s.sum(p))
            })
            .unwrap();
            assert!(report.pass, "{mode:?}\n{report}");
        }
    }
}
