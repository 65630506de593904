//! Static parameter and FLOPs accounting.
//!
//! Every count is a multiply-accumulate count, the convention of the four
//! reference formulas (attention, window attention, convolution, depth-wise
//! convolution): a linear layer costs `N·L·D_in·D_out`. Element-wise work is
//! charged with the per-element constants below. Reports are computed from a
//! [`ModelConfig`] alone, so nothing is allocated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{BlockMode, MixingBlockConfig};
use crate::error::{Error, Result};
use crate::interaction::hidden_width;
use crate::model::{ModelConfig, NUM_STAGES};

pub const SOFTMAX_PER_ELEMENT: u64 = 5;
pub const NORM_PER_ELEMENT: u64 = 4;
pub const GELU_PER_ELEMENT: u64 = 8;
pub const SIGMOID_PER_ELEMENT: u64 = 4;
/// Residual additions, gate multiplications and pooling sums.
pub const ELEMENTWISE: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Global self-attention: `2·N·C·(H·W)²`.
    Attention,
    /// Window self-attention: `2·N·C·H·W·K²`.
    WAttention,
    /// Dense convolution, same width in and out: `N·C²·H·W·K²`.
    Conv,
    /// Depth-wise convolution: `N·C·H·W·K²`.
    DwConv,
    /// Per-token linear `C -> c_out`: `N·H·W·C·c_out`.
    Linear,
    Norm,
    /// Channel gate from a `C`-channel map to `c_out` channels.
    Interaction,
    /// Spatial gate from a `C`-channel map to one channel.
    SpatialInteraction,
    /// Feed-forward network with expansion `K`.
    Ffn,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Attention,
        OpKind::WAttention,
        OpKind::Conv,
        OpKind::DwConv,
        OpKind::Linear,
        OpKind::Norm,
        OpKind::Interaction,
        OpKind::SpatialInteraction,
        OpKind::Ffn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Attention => "attention",
            OpKind::WAttention => "w_attention",
            OpKind::Conv => "conv",
            OpKind::DwConv => "dwconv",
            OpKind::Linear => "linear",
            OpKind::Norm => "norm",
            OpKind::Interaction => "interaction",
            OpKind::SpatialInteraction => "spatial_interaction",
            OpKind::Ffn => "ffn",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOpKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityQuery {
    pub kind: OpKind,
    pub n: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
    /// Kernel or window size; expansion ratio for [`OpKind::Ffn`].
    pub k: u64,
    /// Output width for [`OpKind::Linear`] and [`OpKind::Interaction`];
    /// defaults to `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<u64>,
}

impl ComplexityQuery {
    pub fn new(kind: OpKind, n: u64, c: u64, h: u64, w: u64, k: u64) -> Self {
        ComplexityQuery {
            kind,
            n,
            c,
            h,
            w,
            k,
            c_out: None,
        }
    }

    pub fn with_out(self, c_out: u64) -> Self {
        ComplexityQuery {
            c_out: Some(c_out),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n, self.c, self.h, self.w, self.k, self.c_out.unwrap_or(1)];
        if dims.contains(&0) {
            return Err(Error::Precondition(format!("all query dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Reduction ratio assumed by [`op_flops`] for the gate kinds.
pub const QUERY_REDUCTION: u64 = 4;

/// FLOPs of one op. The first four kinds follow their reference formulas
/// exactly; the rest are sums of linear terms and element-wise constants.
pub fn op_flops(q: &ComplexityQuery) -> Result<u64> {
    q.validate()?;
    let ComplexityQuery { n, c, h, w, k, .. } = *q;
    let hw = h * w;
    let out = q.c_out.unwrap_or(c);
    Ok(match q.kind {
        OpKind::Attention => 2 * n * c * hw * hw,
        OpKind::WAttention => 2 * n * c * hw * k * k,
        OpKind::Conv => n * c * c * hw * k * k,
        OpKind::DwConv => n * c * hw * k * k,
        OpKind::Linear => n * hw * c * out,
        OpKind::Norm => NORM_PER_ELEMENT * n * c * hw,
        OpKind::Interaction => {
            let hid = (c / QUERY_REDUCTION).max(1);
            ELEMENTWISE * n * c * hw
                + n * c * hid
                + (NORM_PER_ELEMENT + GELU_PER_ELEMENT) * n * hid
                + n * hid * out
                + SIGMOID_PER_ELEMENT * n * out
        }
        OpKind::SpatialInteraction => {
            let hid = (c / QUERY_REDUCTION).max(1);
            n * hw * (c * hid + (NORM_PER_ELEMENT + GELU_PER_ELEMENT) * hid + hid + SIGMOID_PER_ELEMENT)
        }
        OpKind::Ffn => {
            let e = c * k;
            n * hw * (2 * c * e + GELU_PER_ELEMENT * e)
        }
    })
}

/// One row of a report. Internal rows hold the sums of their children.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportNode {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ReportNode>,
}

impl ReportNode {
    pub fn leaf(name: impl Into<String>, params: u64, flops: u64) -> Self {
        ReportNode {
            name: name.into(),
            params,
            flops,
            children: Vec::new(),
        }
    }

    pub fn group(name: impl Into<String>, children: Vec<ReportNode>) -> Self {
        ReportNode {
            name: name.into(),
            params: children.iter().map(|c| c.params).sum(),
            flops: children.iter().map(|c| c.flops).sum(),
            children,
        }
    }

    pub fn leaves(&self) -> Vec<&ReportNode> {
        if self.children.is_empty() {
            return vec![self];
        }
        self.children.iter().flat_map(|c| c.leaves()).collect()
    }

    pub fn find(&self, name: &str) -> Option<&ReportNode> {
        if self.name == name {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(name))
    }

    /// Whether every internal row equals the sum of its children.
    pub fn is_consistent(&self) -> bool {
        self.children.is_empty()
            || (self.params == self.children.iter().map(|c| c.params).sum::<u64>()
                && self.flops == self.children.iter().map(|c| c.flops).sum::<u64>()
                && self.children.iter().all(ReportNode::is_consistent))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub batch: u64,
    pub height: u64,
    pub width: u64,
    pub total_params: u64,
    pub total_flops: u64,
    pub root: ReportNode,
}

impl ComplexityReport {
    pub fn new(model: impl Into<String>, batch: u64, height: u64, width: u64, root: ReportNode) -> Self {
        ComplexityReport {
            model: model.into(),
            batch,
            height,
            width,
            total_params: root.params,
            total_flops: root.flops,
            root,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table down to `max_depth` levels below the root.
    pub fn render_text(&self, max_depth: usize) -> String {
        let mut rows = Vec::new();
        collect_rows(&self.root, 0, max_depth, &mut rows);
        let width = rows.iter().map(|(name, _, _)| name.chars().count()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{} @ {}x{} (batch {})\n{:<width$}  {:>14}  {:>18}\n",
            self.model, self.height, self.width, self.batch, "layer", "params", "FLOPs"
        );
        for (name, params, flops) in rows {
            out += &format!("{name:<width$}  {params:>14}  {flops:>18}\n");
        }
        out += &format!(
            "total: {} params ({}), {} FLOPs ({})",
            self.total_params,
            human(self.total_params),
            self.total_flops,
            human(self.total_flops)
        );
        out
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_text(2))
    }
}

fn collect_rows(node: &ReportNode, depth: usize, max_depth: usize, rows: &mut Vec<(String, u64, u64)>) {
    rows.push((format!("{}{}", "  ".repeat(depth), node.name), node.params, node.flops));
    if depth < max_depth {
        for c in &node.children {
            collect_rows(c, depth + 1, max_depth, rows);
        }
    }
}

/// `1234567 -> "1.23M"`.
pub fn human(v: u64) -> String {
    let v = v as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

// ---------------------------------------------------------------------------
// Layer formulas. All sizes are u64 to keep large models exact.

fn u(v: usize) -> u64 {
    v as u64
}

/// Strided "same"-padded conv output size.
fn conv_out(len: u64, k: u64, stride: u64) -> u64 {
    (len + 2 * ((k - 1) / 2) - k) / stride + 1
}

fn linear(name: &str, n: u64, l: u64, din: u64, dout: u64, bias: bool) -> ReportNode {
    ReportNode::leaf(name, din * dout + if bias { dout } else { 0 }, n * l * din * dout)
}

fn conv(name: &str, n: u64, cin: u64, cout: u64, k: u64, out_hw: u64, bias: bool) -> ReportNode {
    ReportNode::leaf(name, cout * cin * k * k + if bias { cout } else { 0 }, n * cin * cout * out_hw * k * k)
}

fn dwconv(name: &str, n: u64, c: u64, k: u64, hw: u64, bias: bool) -> ReportNode {
    ReportNode::leaf(name, c * k * k + if bias { c } else { 0 }, n * c * hw * k * k)
}

fn norm(name: &str, n: u64, c: u64, positions: u64) -> ReportNode {
    ReportNode::leaf(name, 2 * c, NORM_PER_ELEMENT * n * c * positions)
}

fn elementwise(name: &str, count: u64) -> ReportNode {
    ReportNode::leaf(name, 0, count)
}

fn gate_mlp(name: &str, n: u64, positions: u64, cin: u64, cout: u64, reduction: usize) -> Vec<ReportNode> {
    let hid = u(hidden_width(cin as usize, reduction));
    let _ = name;
    vec![
        conv("conv1", n, cin, hid, 1, positions, false),
        norm("bn", n, hid, positions),
        elementwise("gelu", GELU_PER_ELEMENT * n * hid * positions),
        conv("conv2", n, hid, cout, 1, positions, true),
        elementwise("sigmoid", SIGMOID_PER_ELEMENT * n * cout * positions),
    ]
}

fn channel_gate(n: u64, hw: u64, cin: u64, cout: u64, reduction: usize) -> ReportNode {
    let mut parts = vec![elementwise("pool", ELEMENTWISE * n * cin * hw)];
    parts.extend(gate_mlp("channel_interaction", n, 1, cin, cout, reduction));
    ReportNode::group("channel_interaction", parts)
}

fn spatial_gate(n: u64, hw: u64, cin: u64, reduction: usize) -> ReportNode {
    ReportNode::group("spatial_interaction", gate_mlp("spatial_interaction", n, hw, cin, 1, reduction))
}

/// W-MSA on a `dim`-wide token map; attention runs on the padded grid.
fn wmsa(cfg: &MixingBlockConfig, n: u64, h: u64, w: u64, dim: u64) -> ReportNode {
    let k = u(cfg.window_size);
    let (hp, wp) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    let heads = u(cfg.num_heads);
    let l = h * w;
    let core = op_flops(&ComplexityQuery::new(OpKind::WAttention, n, dim, hp, wp, k)).expect("positive dims");
    let table = if cfg.relative_position_bias {
        (2 * k - 1) * (2 * k - 1) * heads
    } else {
        0
    };
    let qkv_bias = 2 * dim;
    ReportNode::group(
        "attn",
        vec![
            ReportNode::leaf("qkv", dim * 3 * dim + qkv_bias, n * l * dim * 3 * dim),
            ReportNode::leaf("attention", table, core),
            elementwise("softmax", SOFTMAX_PER_ELEMENT * n * heads * hp * wp * k * k),
            linear("proj", n, l, dim, dim, true),
        ],
    )
}

fn ffn(cfg: &MixingBlockConfig, n: u64, h: u64, w: u64) -> ReportNode {
    let d = u(cfg.dim);
    let e = d * u(cfg.ffn_ratio);
    let l = h * w;
    let mut parts = vec![
        linear("fc1", n, l, d, e, true),
        elementwise("gelu", GELU_PER_ELEMENT * n * l * e),
    ];
    if cfg.dwconv_in_ffn {
        parts.push(dwconv("dwconv", n, e, 3, l, true));
    }
    parts.push(linear("fc2", n, l, e, d, true));
    ReportNode::group("ffn", parts)
}

/// Report for one Mixing Block on an `h×w` map.
pub fn block_report(name: &str, cfg: &MixingBlockConfig, n: u64, h: u64, w: u64) -> ReportNode {
    let d = u(cfg.dim);
    let l = h * w;
    let kc = u(cfg.conv_kernel);
    let mut mix = Vec::new();
    match cfg.mode {
        BlockMode::Parallel => {
            let (da, dc) = (u(cfg.attn_dim), u(cfg.conv_dim));
            mix.push(linear("attn_in", n, l, d, da, true));
            mix.push(conv("conv_in", n, d, dc, 1, l, false));
            mix.push(dwconv("dwconv", n, dc, kc, l, false));
            mix.push(norm("conv_bn", n, dc, l));
            if cfg.channel_interaction {
                mix.push(channel_gate(n, l, dc, da, cfg.reduction));
                mix.push(elementwise("value_gate", ELEMENTWISE * n * l * da));
            }
            mix.push(wmsa(cfg, n, h, w, da));
            if cfg.spatial_interaction {
                mix.push(spatial_gate(n, l, da, cfg.reduction));
                mix.push(elementwise("spatial_gate", ELEMENTWISE * n * l * dc));
            }
            mix.push(norm("attn_norm", n, da, l));
            mix.push(linear("proj", n, l, da + dc, d, true));
        }
        BlockMode::Successive => {
            let ds = u(cfg.mixing_width());
            mix.push(linear("attn_in", n, l, d, ds, true));
            if cfg.channel_interaction {
                mix.push(channel_gate(n, l, ds, ds, cfg.reduction));
                mix.push(elementwise("value_gate", ELEMENTWISE * n * l * ds));
            }
            mix.push(wmsa(cfg, n, h, w, ds));
            mix.push(norm("attn_norm", n, ds, l));
            mix.push(dwconv("dwconv", n, ds, kc, l, false));
            mix.push(norm("conv_bn", n, ds, l));
            if cfg.spatial_interaction {
                mix.push(spatial_gate(n, l, ds, cfg.reduction));
                mix.push(elementwise("spatial_gate", ELEMENTWISE * n * l * ds));
            }
            mix.push(linear("proj", n, l, ds, d, true));
        }
    }
    ReportNode::group(
        name,
        vec![
            norm("norm1", n, d, l),
            ReportNode::group("mix", mix),
            elementwise("residual1", ELEMENTWISE * n * l * d),
            norm("norm2", n, d, l),
            ffn(cfg, n, h, w),
            elementwise("residual2", ELEMENTWISE * n * l * d),
        ],
    )
}

/// Whole-model report for an `n×3×h×w` input.
pub fn model_report(cfg: &ModelConfig, n: u64, h: u64, w: u64) -> Result<ComplexityReport> {
    cfg.validate()?;
    if n == 0 || h < 32 || w < 32 {
        return Err(Error::Precondition(format!("need batch >= 1 and input >= 32x32, got {n}x{h}x{w}")));
    }
    let dims: Vec<u64> = cfg.stage_dims().into_iter().map(u).collect();
    let (cin, mid, c) = cfg.stem_widths();
    let (cin, mid, c) = (u(cin), u(mid), u(c));

    let (h1, w1) = (conv_out(h, 3, 2), conv_out(w, 3, 2));
    let (h2, w2) = (conv_out(h1, 3, 2), conv_out(w1, 3, 2));
    let stem = ReportNode::group(
        "stem",
        vec![
            conv("conv1", n, cin, mid, 3, h1 * w1, false),
            norm("bn1", n, mid, h1 * w1),
            elementwise("gelu1", GELU_PER_ELEMENT * n * mid * h1 * w1),
            conv("conv2", n, mid, mid, 3, h1 * w1, false),
            norm("bn2", n, mid, h1 * w1),
            elementwise("gelu2", GELU_PER_ELEMENT * n * mid * h1 * w1),
            conv("conv3", n, mid, c, 3, h2 * w2, false),
            norm("bn3", n, c, h2 * w2),
        ],
    );

    let mut top = vec![stem];
    let (mut hh, mut ww) = (h2, w2);
    for i in 0..NUM_STAGES {
        let mut parts = Vec::new();
        if i > 0 {
            let (nh, nw) = (conv_out(hh, 3, 2), conv_out(ww, 3, 2));
            parts.push(ReportNode::group(
                "downsample",
                vec![
                    conv("conv", n, dims[i - 1], dims[i], 3, nh * nw, false),
                    norm("bn", n, dims[i], nh * nw),
                ],
            ));
            (hh, ww) = (nh, nw);
        }
        for j in 0..cfg.blocks[i] {
            parts.push(block_report(&format!("blocks.{j}"), &cfg.block_config(i, j), n, hh, ww));
        }
        top.push(ReportNode::group(format!("stages.{i}"), parts));
    }
    let l = hh * ww;
    let last = dims[NUM_STAGES - 1];
    let p = u(cfg.projection_dim);
    top.push(ReportNode::group(
        "projection",
        vec![
            linear("linear", n, l, last, p, true),
            elementwise("gelu", GELU_PER_ELEMENT * n * l * p),
            elementwise("pool", ELEMENTWISE * n * l * p),
        ],
    ));
    top.push(linear("head", n, 1, p, u(cfg.num_classes), true));
    let name = if cfg.name.is_empty() { "model".to_string() } else { cfg.name.clone() };
    Ok(ComplexityReport::new(name, n, h, w, ReportNode::group(cfg.name.clone(), top)))
}
