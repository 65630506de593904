//! Cross-branch gates: a per-channel gate computed from the convolution
//! branch for the attention values, and a per-position gate computed from the
//! attention branch for the convolution output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Conv2dSpec};

pub const DEFAULT_REDUCTION: usize = 4;

/// Width of the bottleneck between the two 1×1 convolutions.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
}

impl GateShape {
    /// 1×1 conv (no bias, a BN follows) + BN + 1×1 conv with bias.
    pub fn num_params(&self) -> usize {
        self.in_channels * self.hidden + 2 * self.hidden + self.hidden * self.out_channels + self.out_channels
    }
}

/// Two 1×1 convolutions with BN and GELU between them, ending in a sigmoid.
#[derive(Clone, Debug)]
struct GateMlp {
    conv1: Conv2d,
    bn: BatchNorm2d,
    conv2: Conv2d,
}

impl GateMlp {
    fn new(b: &mut ParamBuilder<'_>, name: &str, shape: GateShape) -> Result<Self> {
        if shape.in_channels == 0 || shape.out_channels == 0 {
            return Err(Error::Config(format!("gate with zero channels: {shape:?}")));
        }
        Ok(GateMlp {
            conv1: Conv2d::new(b, &format!("{name}.conv1"), Conv2dSpec::pointwise(shape.in_channels, shape.hidden), false)?,
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), shape.hidden)?,
            conv2: Conv2d::new(b, &format!("{name}.conv2"), Conv2dSpec::pointwise(shape.hidden, shape.out_channels), true)?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn.forward(s, h)?;
        let h = s.gelu(h);
        let h = self.conv2.forward(s, h)?;
        Ok(s.sigmoid(h))
    }
}

/// Global context of the convolution branch, turned into a gate `(N, C_a)`
/// for the attention values.
#[derive(Clone, Debug)]
pub struct ChannelInteraction {
    pub shape: GateShape,
    mlp: GateMlp,
}

impl ChannelInteraction {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_channels: usize, out_channels: usize, reduction: usize) -> Result<Self> {
        let shape = GateShape {
            in_channels,
            out_channels,
            hidden: hidden_width(in_channels, reduction),
        };
        Ok(ChannelInteraction {
            shape,
            mlp: GateMlp::new(b, name, shape)?,
        })
    }

    /// `(N, C_c, H, W) -> (N, C_a)`.
    pub fn forward(&self, s: &mut Session<'_>, conv_feat: Var) -> Result<Var> {
        let shape = s.shape(conv_feat);
        if shape.len() != 4 || shape[1] != self.shape.in_channels {
            return Err(Error::invalid(
                "channel_interaction",
                format!("expected (N, {}, H, W), got {shape:?}", self.shape.in_channels),
            ));
        }
        let n = shape[0];
        let pooled = s.global_avg_pool(conv_feat)?;
        let pooled = s.reshape(pooled, &[n, self.shape.in_channels, 1, 1])?;
        let gate = self.mlp.forward(s, pooled)?;
        s.reshape(gate, &[n, self.shape.out_channels])
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }
}

/// Per-position gate `(N, 1, H, W)` computed from the attention branch.
#[derive(Clone, Debug)]
pub struct SpatialInteraction {
    pub shape: GateShape,
    mlp: GateMlp,
}

impl SpatialInteraction {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_channels: usize, reduction: usize) -> Result<Self> {
        let shape = GateShape {
            in_channels,
            out_channels: 1,
            hidden: hidden_width(in_channels, reduction),
        };
        Ok(SpatialInteraction {
            shape,
            mlp: GateMlp::new(b, name, shape)?,
        })
    }

    /// `(N, C_a, H, W) -> (N, 1, H, W)`.
    pub fn forward(&self, s: &mut Session<'_>, attn_feat: Var) -> Result<Var> {
        let shape = s.shape(attn_feat);
        if shape.len() != 4 || shape[1] != self.shape.in_channels {
            return Err(Error::invalid(
                "spatial_interaction",
                format!("expected (N, {}, H, W), got {shape:?}", self.shape.in_channels),
            ));
        }
        self.mlp.forward(s, attn_feat)
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn zero_parameters_give_half() {
        let mut store = ParamStore::new();
        let (ci, si) = {
            let mut b = ParamBuilder::new(&mut store, 0);
            (
                ChannelInteraction::new(&mut b, "ci", 8, 6, 4).unwrap(),
                SpatialInteraction::new(&mut b, "si", 6, 4).unwrap(),
            )
        };
        store.zero_init();
        let x = Tensor::from_fn(vec![2, 8, 3, 3], |i| (i as f64).cos()).unwrap();
        let a = Tensor::from_fn(vec![2, 6, 3, 3], |i| (i as f64).sin()).unwrap();
        let mut s = Session::inference(&mut store, true);
        let (xv, av) = (s.input(x), s.input(a));
        let g = ci.forward(&mut s, xv).unwrap();
        assert_eq!(s.shape(g), vec![2, 6]);
        assert!(s.value(g).data().iter().all(|&v| v == 0.5));
        let m = si.forward(&mut s, av).unwrap();
        assert_eq!(s.shape(m), vec![2, 1, 3, 3]);
        assert!(s.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hidden_width_floors_at_one() {
        assert_eq!(hidden_width(3, 4), 1);
        assert_eq!(hidden_width(16, 4), 4);
    }

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::new();
        let ci = {
            let mut b = ParamBuilder::new(&mut store, 0);
            ChannelInteraction::new(&mut b, "ci", 16, 16, 4).unwrap()
        };
        assert_eq!(ci.num_params(), store.num_trainable());
        // 16*4 + 2*4 + 4*16 + 16
        assert_eq!(ci.num_params(), 152);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut store = ParamStore::new();
        let si = {
            let mut b = ParamBuilder::new(&mut store, 0);
            SpatialInteraction::new(&mut b, "si", 4, 4).unwrap()
        };
        let mut s = Session::inference(&mut store, false);
        let x = s.input(Tensor::zeros(vec![1, 3, 2, 2]).unwrap());
        assert!(si.forward(&mut s, x).is_err());
    }
}
