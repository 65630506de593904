//! Ready-made finite-difference checks over ops, blocks and a whole model.
//!
//! Every check reduces the output to a scalar with a fixed random
//! projection `Σ y ⊙ R`, so all output entries contribute. Parameters are
//! perturbed away from their initial values first: zero-initialised
//! tensors would otherwise hide errors behind exact zeros.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{WindowAttention, WmsaConfig};
use crate::autodiff::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamBuilder, ParamStore, Session, Var};
use crate::block::{BlockMode, MixingBlock, MixingBlockConfig};
use crate::error::{Error, Result};
use crate::interaction::{ChannelInteraction, SpatialInteraction};
use crate::model::{Backbone, ModelConfig};
use crate::nn::{BatchNorm2d, Conv2d, Conv2dSpec, LayerNorm, Linear};
use crate::tensor::Tensor;
use crate::window::WindowLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown scope `{s}` (expected op, block or model)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

impl fmt::Display for NamedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<44} max rel. error {:>10.3e}  {}",
            self.name,
            self.report.max_error(),
            if self.report.pass { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Entries probed per tensor in block and model checks.
    pub max_entries: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tol: 1e-4,
            epsilon: 1e-5,
            seed: 0,
            max_entries: 6,
        }
    }
}

impl SuiteOptions {
    fn grad_opts(&self, train: bool, limit: Option<usize>) -> GradCheckOptions {
        GradCheckOptions {
            epsilon: self.epsilon,
            tol: self.tol,
            max_entries_per_tensor: limit,
            train,
            seed: self.seed,
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// Adds uniform noise in `±amount` to every trainable tensor.
pub fn perturb(store: &mut ParamStore, amount: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut().filter(|p| p.role.is_trainable()) {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amount..amount));
    }
}

/// `Σ y ⊙ R` with `R` fixed by `seed` and the size of `y`.
pub fn project(s: &Session<'_>, y: Var, seed: u64) -> Result<Var> {
    let n = s.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let flat = s.reshape(y, &[n])?;
    let r = s.constant(random_tensor(&[n], &mut rng));
    let prod = s.mul(flat, r)?;
    Ok(s.sum(prod))
}

type Forward<'f> = Box<dyn Fn(&mut Session<'_>, &[Var]) -> Result<Var> + 'f>;

struct Case<'f> {
    name: String,
    store: ParamStore,
    inputs: Vec<Tensor>,
    train: bool,
    forward: Forward<'f>,
}

fn run_case(mut case: Case<'_>, opts: &SuiteOptions, limit: Option<usize>) -> Result<NamedReport> {
    perturb(&mut case.store, 0.3, opts.seed ^ 0x51);
    let seed = opts.seed;
    let forward = &case.forward;
    let report = finite_difference_check(&mut case.store, &case.inputs, &opts.grad_opts(case.train, limit), |s, v| {
        let y = forward(s, v)?;
        project(s, y, seed)
    })?;
    Ok(NamedReport { name: case.name, report })
}

fn with_params<'f, L: 'f>(
    name: &str,
    build: impl FnOnce(&mut ParamBuilder<'_>) -> Result<L>,
    inputs: Vec<Tensor>,
    train: bool,
    forward: impl Fn(&L, &mut Session<'_>, &[Var]) -> Result<Var> + 'f,
) -> Result<Case<'f>> {
    let mut store = ParamStore::new();
    let layer = {
        let mut b = ParamBuilder::new(&mut store, 7);
        build(&mut b)?
    };
    Ok(Case {
        name: name.to_string(),
        store,
        inputs,
        train,
        forward: Box::new(move |s, v| forward(&layer, s, v)),
    })
}

fn stateless<'f>(name: &str, inputs: Vec<Tensor>, forward: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var> + 'f) -> Case<'f> {
    Case {
        name: name.to_string(),
        store: ParamStore::new(),
        inputs,
        train: false,
        forward: Box::new(forward),
    }
}

/// Every primitive op, every layer type and both interaction gates.
pub fn op_suite(opts: &SuiteOptions) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut rng);
    let mut cases: Vec<Case<'_>> = vec![
        stateless("add (broadcast)", vec![t(&[2, 3, 4]), t(&[1, 3, 1])], |s, v| s.add(v[0], v[1])),
        stateless("mul (broadcast)", vec![t(&[2, 3, 4]), t(&[3, 1])], |s, v| s.mul(v[0], v[1])),
        stateless("matmul (batched)", vec![t(&[2, 3, 4]), t(&[2, 4, 5])], |s, v| s.matmul(v[0], v[1])),
        stateless("gelu", vec![t(&[3, 7])], |s, v| Ok(s.gelu(v[0]))),
        stateless("sigmoid", vec![t(&[3, 7])], |s, v| Ok(s.sigmoid(v[0]))),
        stateless("softmax", vec![t(&[3, 7])], |s, v| Ok(s.softmax(v[0]))),
        stateless("mean over axis", vec![t(&[2, 5, 3])], |s, v| s.mean_axis(v[0], 1)),
        stateless("permute", vec![t(&[2, 3, 4])], |s, v| s.permute(v[0], &[2, 0, 1])),
        stateless("global average pool", vec![t(&[2, 3, 4, 5])], |s, v| s.global_avg_pool(v[0])),
        stateless("cross entropy", vec![t(&[5, 4])], |s, v| s.cross_entropy(v[0], &[0, 3, 1, 2, 3])),
        stateless("window partition (shifted, padded)", vec![t(&[2, 3, 7, 8])], |s, v| {
            let layout = WindowLayout::new(7, 8, 3, 1)?;
            let w = s.window_partition(v[0], &layout)?;
            let y = s.gelu(w);
            s.window_reverse(y, &layout)
        }),
        with_params("linear", |b| Linear::new(b, "fc", 5, 4, true), vec![t(&[2, 3, 5])], false, |l, s, v| l.forward(s, v[0]))?,
        with_params(
            "conv 3x3",
            |b| Conv2d::new(b, "conv", Conv2dSpec::same(3, 4, 3, 1), true),
            vec![t(&[2, 3, 6, 5])],
            false,
            |l, s, v| l.forward(s, v[0]),
        )?,
        with_params(
            "conv 3x3 stride 2",
            |b| Conv2d::new(b, "conv", Conv2dSpec::same(3, 4, 3, 2), false),
            vec![t(&[2, 3, 7, 6])],
            false,
            |l, s, v| l.forward(s, v[0]),
        )?,
        with_params(
            "dwconv 3x3",
            |b| Conv2d::new(b, "dw", Conv2dSpec::depthwise(4, 3, 1), true),
            vec![t(&[2, 4, 5, 6])],
            false,
            |l, s, v| l.forward(s, v[0]),
        )?,
        with_params(
            "dwconv 5x5 stride 2",
            |b| Conv2d::new(b, "dw", Conv2dSpec::depthwise(3, 5, 2), false),
            vec![t(&[2, 3, 7, 7])],
            false,
            |l, s, v| l.forward(s, v[0]),
        )?,
        with_params("batch norm (train)", |b| BatchNorm2d::new(b, "bn", 3), vec![t(&[3, 3, 2, 3])], true, |l, s, v| {
            l.forward(s, v[0])
        })?,
        with_params("batch norm (eval)", |b| BatchNorm2d::new(b, "bn", 3), vec![t(&[2, 3, 2, 3])], false, |l, s, v| {
            l.forward(s, v[0])
        })?,
        with_params("layer norm", |b| LayerNorm::new(b, "ln", 6), vec![t(&[2, 3, 6])], false, |l, s, v| l.forward(s, v[0]))?,
        with_params(
            "channel interaction",
            |b| ChannelInteraction::new(b, "ci", 8, 6, 4),
            vec![t(&[3, 8, 3, 4])],
            true,
            |l, s, v| l.forward(s, v[0]),
        )?,
        with_params(
            "spatial interaction",
            |b| SpatialInteraction::new(b, "si", 6, 4),
            vec![t(&[2, 6, 3, 4])],
            true,
            |l, s, v| l.forward(s, v[0]),
        )?,
    ];
    for (shift, gate) in [(0, false), (1, true)] {
        let cfg = WmsaConfig::new(8, 2, 3);
        let name = format!("window attention (shift {shift}, value gate {gate})");
        let mut inputs = vec![t(&[2, 20, 8])];
        if gate {
            inputs.push(t(&[2, 8]));
        }
        cases.push(with_params(&name, |b| WindowAttention::new(b, "attn", cfg), inputs, false, move |l, s, v| {
            let layout = WindowLayout::new(4, 5, 3, shift)?;
            let gate = v.get(1).map(|&g| s.sigmoid(g));
            l.forward_tokens(s, v[0], &layout, gate)
        })?);
    }
    cases.into_iter().map(|c| run_case(c, opts, None)).collect()
}

/// Gradcheck of one block on a small padded map, `(batch 3, 4×5, dim 8)`,
/// with batch norms in train mode.
pub fn check_block(cfg: MixingBlockConfig, opts: &SuiteOptions) -> Result<GradCheckReport> {
    check_block_in(cfg, opts, true)
}

/// As [`check_block`], choosing the batch-norm mode.
pub fn check_block_in(cfg: MixingBlockConfig, opts: &SuiteOptions, train: bool) -> Result<GradCheckReport> {
    let (h, w) = (4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb1);
    let x = random_tensor(&[3, h * w, cfg.dim], &mut rng);
    let case = with_params("block", |b| MixingBlock::new(b, "block", cfg), vec![x], train, move |l, s, v| {
        l.forward(s, v[0], h, w)
    })?;
    Ok(run_case(case, opts, Some(opts.max_entries))?.report)
}

/// Small block configuration used by the block checks.
pub fn small_block(mode: BlockMode) -> MixingBlockConfig {
    MixingBlockConfig {
        mode,
        window_size: 3,
        ffn_ratio: 2,
        ..MixingBlockConfig::new(8, 2)
    }
}

/// Both modes with every combination of the five block flags.
pub fn block_suite(opts: &SuiteOptions) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for mode in [BlockMode::Parallel, BlockMode::Successive] {
        for flags in 0..32u32 {
            let cfg = MixingBlockConfig {
                channel_interaction: flags & 1 != 0,
                spatial_interaction: flags & 2 != 0,
                shifted_window: flags & 4 != 0,
                dwconv_in_ffn: flags & 8 != 0,
                relative_position_bias: flags & 16 != 0,
                ..small_block(mode)
            };
            let name = format!(
                "block {:?} ci={} si={} shift={} ffn_dw={} rpb={}",
                mode,
                cfg.channel_interaction as u8,
                cfg.spatial_interaction as u8,
                cfg.shifted_window as u8,
                cfg.dwconv_in_ffn as u8,
                cfg.relative_position_bias as u8
            )
            .to_lowercase();
            out.push(NamedReport {
                name,
                report: check_block(cfg, opts)?,
            });
        }
    }
    Ok(out)
}

/// Input side for model checks. Every stage map stays at least 2×2: on a
/// 1×1 map a train-mode batch norm cancels per-channel shifts exactly and
/// the affected gradients are identically zero.
pub const MODEL_CHECK_SIZE: usize = 48;

/// Micro backbone narrowed for speed.
pub fn gradcheck_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::micro();
    cfg.name = "gradcheck".into();
    cfg.base_channels = 8;
    cfg.heads = vec![1, 1, 2, 2];
    cfg.projection_dim = 16;
    cfg.block.shifted_windows = true;
    cfg.block.dwconv_in_ffn = true;
    cfg
}

pub fn check_model(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3d);
    let x = random_tensor(&[3, cfg.in_channels, MODEL_CHECK_SIZE, MODEL_CHECK_SIZE], &mut rng);
    let model_cfg = cfg.clone();
    let case = with_params("model", move |b| Backbone::build(b, &model_cfg), vec![x], true, |net, s, v| {
        net.classify(s, v[0])
    })?;
    Ok(run_case(case, opts, Some(opts.max_entries))?.report)
}

pub fn model_suite(opts: &SuiteOptions) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for mode in [BlockMode::Parallel, BlockMode::Successive] {
        let mut cfg = gradcheck_model_config();
        cfg.block.mode = mode;
        out.push(NamedReport {
            name: format!("micro model ({mode:?})").to_lowercase(),
            report: check_model(&cfg, opts)?,
        });
    }
    Ok(out)
}

pub fn run_scope(scope: Scope, opts: &SuiteOptions) -> Result<Vec<NamedReport>> {
    match scope {
        Scope::Op => op_suite(opts),
        Scope::Block => block_suite(opts),
        Scope::Model => model_suite(opts),
    }
}
