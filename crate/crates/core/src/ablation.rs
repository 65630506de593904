//! Design-space grid: block mode × interaction subsets, plus single-knob
//! variations of the default block (conv kernel, shifted windows, dwconv in
//! the FFN, window size).
//!
//! Each case is costed on a full-size variant, smoke-tested as a micro
//! model and optionally gradient-checked as a single small block.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::block::{BlockMode, MixingBlockConfig};
use crate::checks::{check_block_in, small_block, SuiteOptions};
use crate::complexity::model_report;
use crate::error::{Error, Result};
use crate::model::{BlockTemplate, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Interactions {
    None,
    Channel,
    Spatial,
    Both,
}

impl Interactions {
    pub const ALL: [Interactions; 4] = [Interactions::None, Interactions::Channel, Interactions::Spatial, Interactions::Both];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Interactions::None => (false, false),
            Interactions::Channel => (true, false),
            Interactions::Spatial => (false, true),
            Interactions::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Interactions::None => "none",
            Interactions::Channel => "channel",
            Interactions::Spatial => "spatial",
            Interactions::Both => "both",
        }
    }
}

impl FromStr for Interactions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Interactions::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown interaction setting `{s}` (expected none, channel, spatial or both)")))
    }
}

impl fmt::Display for Interactions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn parse_mode(s: &str) -> Result<BlockMode> {
    match s {
        "parallel" => Ok(BlockMode::Parallel),
        "successive" => Ok(BlockMode::Successive),
        _ => Err(Error::Config(format!("unknown mode `{s}` (expected parallel or successive)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCase {
    pub label: String,
    pub template: BlockTemplate,
}

impl AblationCase {
    pub fn interactions(mode: BlockMode, interactions: Interactions) -> Self {
        let (channel, spatial) = interactions.flags();
        AblationCase {
            label: format!("{} / {}", format!("{mode:?}").to_lowercase(), interactions),
            template: BlockTemplate {
                mode,
                channel_interaction: channel,
                spatial_interaction: spatial,
                ..BlockTemplate::default()
            },
        }
    }
}

/// Both modes with each of the four interaction settings.
pub fn interaction_grid() -> Vec<AblationCase> {
    [BlockMode::Parallel, BlockMode::Successive]
        .into_iter()
        .flat_map(|m| Interactions::ALL.into_iter().map(move |i| AblationCase::interactions(m, i)))
        .collect()
}

/// One knob at a time away from the default parallel block.
pub fn knob_grid() -> Vec<AblationCase> {
    let base = BlockTemplate::default();
    let mut out = Vec::new();
    for k in [1, 3, 5] {
        out.push(AblationCase {
            label: format!("dwconv {k}x{k}"),
            template: BlockTemplate {
                conv_kernel: k,
                ..base.clone()
            },
        });
    }
    for shift in [false, true] {
        out.push(AblationCase {
            label: format!("shifted windows {}", if shift { "on" } else { "off" }),
            template: BlockTemplate {
                shifted_windows: shift,
                ..base.clone()
            },
        });
    }
    for dw in [false, true] {
        out.push(AblationCase {
            label: format!("dwconv in ffn {}", if dw { "on" } else { "off" }),
            template: BlockTemplate {
                dwconv_in_ffn: dw,
                ..base.clone()
            },
        });
    }
    for window in [7, 12] {
        out.push(AblationCase {
            label: format!("window {window}"),
            template: BlockTemplate {
                window_size: window,
                ..base.clone()
            },
        });
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub params: u64,
    pub flops: u64,
    pub forward_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck_max_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck_pass: Option<bool>,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.forward_ok && self.gradcheck_pass.unwrap_or(true)
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>8.2}M params {:>7.3}G FLOPs  forward {}",
            self.label,
            self.params as f64 / 1e6,
            self.flops as f64 / 1e9,
            if self.forward_ok { "ok" } else { "FAIL" }
        )?;
        if let (Some(err), Some(pass)) = (self.gradcheck_max_error, self.gradcheck_pass) {
            write!(f, "  gradcheck {err:.2e} {}", if pass { "ok" } else { "FAIL" })?;
        }
        Ok(())
    }
}

/// Small block carrying the case's knobs, for gradient checks.
pub fn small_case_block(t: &BlockTemplate) -> MixingBlockConfig {
    MixingBlockConfig {
        window_size: t.window_size,
        conv_kernel: t.conv_kernel,
        channel_interaction: t.channel_interaction,
        spatial_interaction: t.spatial_interaction,
        shifted_window: t.shifted_windows,
        dwconv_in_ffn: t.dwconv_in_ffn,
        relative_position_bias: t.relative_position_bias,
        ..small_block(t.mode)
    }
}

/// Costs `case` on `base` at `resolution`, runs a micro-model forward pass
/// and, with `check`, gradient-checks a small block.
///
/// The block is checked with batch norms in eval mode. In train mode a 1×1
/// depth-wise conv feeding a batch norm is normalised away: its weight and
/// any per-channel shift before it get gradients that are zero or of the
/// order of the norm's epsilon, which finite differences cannot resolve.
pub fn run_case(case: &AblationCase, base: &ModelConfig, resolution: (u64, u64), check: Option<&SuiteOptions>) -> Result<AblationRow> {
    let cfg = ModelConfig {
        block: case.template.clone(),
        successive_dims: None,
        ..base.clone()
    };
    let report = model_report(&cfg, 1, resolution.0, resolution.1)?;

    let micro = ModelConfig {
        block: case.template.clone(),
        ..ModelConfig::micro()
    };
    let mut model = Model::build(micro, 0)?;
    let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| ((i * 7919) % 256) as f64 / 128.0 - 1.0)?;
    let logits = model.predict(&x)?;
    let forward_ok = logits.shape() == [2, model.config.num_classes] && logits.is_finite();

    let (gradcheck_max_error, gradcheck_pass) = match check {
        Some(opts) => {
            let r = check_block_in(small_case_block(&case.template), opts, false)?;
            (Some(r.max_error()), Some(r.pass))
        }
        None => (None, None),
    };
    Ok(AblationRow {
        label: case.label.clone(),
        params: report.total_params,
        flops: report.total_flops,
        forward_ok,
        gradcheck_max_error,
        gradcheck_pass,
    })
}
