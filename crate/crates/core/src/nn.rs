//! Building blocks: linear, convolution, depth-wise convolution, batch and
//! layer normalisation, plus global average pooling.
//!
//! Each op is a single fused tape node with a hand-written backward pass.
//! The layer structs at the bottom own [`ParamId`]s and know how to register
//! their tensors and count them.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, ParamId, ParamRole, Session, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Layout, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Shape of a 2-D convolution. Kernels are square and odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv2dSpec {
    /// Dense convolution with "same" padding `(K - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel.saturating_sub(1)) / 2,
            depthwise: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2dSpec {
            depthwise: true,
            ..Conv2dSpec::same(channels, channels, kernel, stride)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec::same(in_channels, out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(Error::Config(format!(
                "depth-wise convolution needs in == out channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let per_group = if self.depthwise { 1 } else { self.in_channels };
        [self.out_channels, per_group, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        ConvGeom::new(self.in_channels, h, w, self.kernel, self.stride, self.padding).map(|g| (g.out_h, g.out_w))
    }

    /// Weights plus bias.
    pub fn num_params(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected an NCHW tensor, got {shape:?}"))),
    }
}

fn geometry(op: &'static str, spec: &Conv2dSpec, x: &[usize]) -> Result<ConvGeom> {
    spec.validate()?;
    let [_, c, h, w] = nchw(op, x)?;
    if c != spec.in_channels {
        return Err(Error::invalid(op, format!("input has {c} channels, spec expects {}", spec.in_channels)));
    }
    ConvGeom::new(c, h, w, spec.kernel, spec.stride, spec.padding).ok_or_else(|| {
        Error::invalid(
            op,
            format!("kernel {} larger than padded input {h}x{w} (padding {})", spec.kernel, spec.padding),
        )
    })
}

fn check_param(op: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::shape(op, t.shape(), expected));
    }
    Ok(())
}

/// Statistics of one train-mode batch-norm call, per channel.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalisation).
    pub var: Vec<f64>,
    /// Number of values each channel was reduced over.
    pub count: usize,
}

impl Tape {
    /// `x · W + b` over the last axis of `x`. `W` is `(D_in, D_out)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [d_in, d_out] = match *wv.shape() {
            [a, b] => [a, b],
            _ => return Err(Error::invalid("linear", format!("weight must be 2-D, got {:?}", wv.shape()))),
        };
        let x_shape = xv.shape().to_vec();
        if x_shape.last() != Some(&d_in) {
            return Err(Error::shape("linear", &x_shape, wv.shape()));
        }
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            check_param("linear", bv, &[d_out])?;
        }
        let rows = xv.numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(bv) = &bv {
            for r in out.chunks_mut(d_out) {
                r.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(rows, d_in, d_out, xv.data(), wv.data(), &mut out);
        let mut out_shape = x_shape.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let mut parents = vec![x, w];
        parents.extend(b);
        let value = Tensor::from_parts(out_shape, out).with_layout(xv.layout());
        Ok(self.push(
            value,
            &parents,
            Box::new(move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut d = vec![0.0; rows * d_in];
                    kernels::gemm_a_bt(rows, d_out, d_in, gd, wv.data(), &mut d);
                    Tensor::from_parts(x_shape.clone(), d)
                });
                let dw = need[1].then(|| {
                    let mut d = vec![0.0; d_in * d_out];
                    kernels::gemm_at_b(d_in, rows, d_out, xv.data(), gd, &mut d);
                    Tensor::from_parts(vec![d_in, d_out], d)
                });
                let mut grads = vec![dx, dw];
                if need.len() > 2 {
                    let mut d = vec![0.0; d_out];
                    for r in gd.chunks(d_out) {
                        d.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    grads.push(Some(Tensor::from_parts(vec![d_out], d)));
                }
                grads
            }),
        ))
    }

    /// Cross-correlation of an NCHW input. Dispatches to [`Tape::dwconv2d`]
    /// when `spec.depthwise` is set.
    pub fn conv2d(&self, x: Var, spec: &Conv2dSpec, w: Var, b: Option<Var>) -> Result<Var> {
        if spec.depthwise {
            return self.dwconv2d(x, spec.kernel, spec.stride, spec.padding, w, b);
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let g = geometry("conv2d", spec, xv.shape())?;
        check_param("conv2d", &wv, &spec.weight_shape())?;
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            check_param("conv2d", bv, &[spec.out_channels])?;
        }
        let n = xv.shape()[0];
        let co = spec.out_channels;
        let ckk = g.channels * g.k * g.k;
        let ohw = g.out_h * g.out_w;
        let in_img = g.channels * g.h * g.w;
        let mut out = vec![0.0; n * co * ohw];
        let mut cols = vec![0.0; ckk * ohw];
        for i in 0..n {
            kernels::im2col(&g, &xv.data()[i * in_img..(i + 1) * in_img], &mut cols);
            let dst = &mut out[i * co * ohw..(i + 1) * co * ohw];
            if let Some(bv) = &bv {
                for (c, plane) in dst.chunks_mut(ohw).enumerate() {
                    plane.fill(bv.data()[c]);
                }
            }
            kernels::gemm(co, ckk, ohw, wv.data(), &cols, dst);
        }
        let out = Tensor::from_parts(vec![n, co, g.out_h, g.out_w], out).with_layout(Layout::Nchw);
        let mut parents = vec![x, w];
        parents.extend(b);
        let x_shape = xv.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut dx = need[0].then(|| vec![0.0; n * in_img]);
                let mut dw = need[1].then(|| vec![0.0; co * ckk]);
                let mut cols = vec![0.0; ckk * ohw];
                let mut dcols = vec![0.0; ckk * ohw];
                for i in 0..n {
                    let g_i = &gd[i * co * ohw..(i + 1) * co * ohw];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&g, &xv.data()[i * in_img..(i + 1) * in_img], &mut cols);
                        kernels::gemm_a_bt(co, ohw, ckk, g_i, &cols, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.fill(0.0);
                        kernels::gemm_at_b(ckk, co, ohw, wv.data(), g_i, &mut dcols);
                        kernels::col2im(&g, &dcols, &mut dx[i * in_img..(i + 1) * in_img]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_parts(x_shape.clone(), d)),
                    dw.map(|d| Tensor::from_parts(w_shape.clone(), d)),
                ];
                if need.len() > 2 {
                    grads.push(Some(Tensor::from_parts(vec![co], channel_sums(gd, n, co, ohw))));
                }
                grads
            }),
        ))
    }

    /// Depth-wise convolution: one `K×K` filter per channel, weights `(C, 1, K, K)`.
    pub fn dwconv2d(&self, x: Var, k: usize, stride: usize, padding: usize, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, _, _] = nchw("dwconv2d", xv.shape())?;
        let spec = Conv2dSpec {
            in_channels: c,
            out_channels: c,
            kernel: k,
            stride,
            padding,
            depthwise: true,
        };
        let g = geometry("dwconv2d", &spec, xv.shape())?;
        let wv = self.value(w);
        check_param("dwconv2d", &wv, &spec.weight_shape())?;
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            check_param("dwconv2d", bv, &[c])?;
        }
        let (hw, ohw, kk) = (g.h * g.w, g.out_h * g.out_w, k * k);
        let mut out = vec![0.0; n * c * ohw];
        for i in 0..n {
            for ch in 0..c {
                let plane = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let bias = bv.as_ref().map_or(0.0, |b| b.data()[ch]);
                kernels::dw_plane_forward(
                    &g,
                    plane,
                    &wv.data()[ch * kk..(ch + 1) * kk],
                    bias,
                    &mut out[(i * c + ch) * ohw..(i * c + ch + 1) * ohw],
                );
            }
        }
        let out = Tensor::from_parts(vec![n, c, g.out_h, g.out_w], out).with_layout(Layout::Nchw);
        let mut parents = vec![x, w];
        parents.extend(b);
        let x_shape = xv.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut dx = vec![0.0; n * c * hw];
                let mut dw = vec![0.0; c * kk];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let p = i * c + ch;
                        db[ch] += kernels::dw_plane_backward(
                            &g,
                            &xv.data()[p * hw..(p + 1) * hw],
                            &wv.data()[ch * kk..(ch + 1) * kk],
                            &gd[p * ohw..(p + 1) * ohw],
                            &mut dx[p * hw..(p + 1) * hw],
                            &mut dw[ch * kk..(ch + 1) * kk],
                        );
                    }
                }
                let mut grads = vec![
                    need[0].then(|| Tensor::from_parts(x_shape.clone(), dx)),
                    need[1].then(|| Tensor::from_parts(w_shape.clone(), dw)),
                ];
                if need.len() > 2 {
                    grads.push(Some(Tensor::from_parts(vec![c], db)));
                }
                grads
            }),
        ))
    }

    /// Train-mode batch norm over every axis except axis 1 (channels).
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout("batch_norm", xv.shape())?;
        let gv = self.value(gamma);
        check_param("batch_norm", &gv, &[c])?;
        check_param("batch_norm", &self.value(beta), &[c])?;
        let bv = self.value(beta);
        let count = n * inner;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let (m, v) = channel_moments(xv.data(), n, c, inner, ch);
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for_each_channel(n, c, inner, |ch, idx| {
            let h = (xv.data()[idx] - mean[ch]) * inv_std[ch];
            xhat[idx] = h;
            out[idx] = gv.data()[ch] * h + bv.data()[ch];
        });
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out).with_layout(xv.layout());
        let y = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for_each_channel(n, c, inner, |ch, idx| {
                    sum_g[ch] += gd[idx];
                    sum_gx[ch] += gd[idx] * xhat[idx];
                });
                let dx = need[0].then(|| {
                    let m = count as f64;
                    let mut d = vec![0.0; gd.len()];
                    for_each_channel(n, c, inner, |ch, idx| {
                        d[idx] = gv.data()[ch] * inv_std[ch] / m * (m * gd[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                    });
                    Tensor::from_parts(shape.clone(), d)
                });
                vec![
                    dx,
                    Some(Tensor::from_parts(vec![c], sum_gx)),
                    Some(Tensor::from_parts(vec![c], sum_g)),
                ]
            }),
        );
        Ok((y, stats))
    }

    /// Eval-mode batch norm: a fixed per-channel affine map.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout("batch_norm", xv.shape())?;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        for t in [&*gv, &*bv, running_mean, running_var] {
            check_param("batch_norm", t, &[c])?;
        }
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.data().to_vec();
        let mut out = vec![0.0; xv.numel()];
        for_each_channel(n, c, inner, |ch, idx| {
            out[idx] = gv.data()[ch] * ((xv.data()[idx] - rm[ch]) * inv_std[ch]) + bv.data()[ch];
        });
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out).with_layout(xv.layout());
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for_each_channel(n, c, inner, |ch, idx| {
                    dgamma[ch] += gd[idx] * (xv.data()[idx] - rm[ch]) * inv_std[ch];
                    dbeta[ch] += gd[idx];
                    dx[idx] = gd[idx] * gv.data()[ch] * inv_std[ch];
                });
                vec![
                    need[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        ))
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = match xv.shape().last() {
            Some(&d) => d,
            None => return Err(Error::invalid("layer_norm", "cannot normalise a rank-0 tensor")),
        };
        let gv = self.value(gamma);
        let bv = self.value(beta);
        check_param("layer_norm", &gv, &[d])?;
        check_param("layer_norm", &bv, &[d])?;
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out).with_layout(xv.layout());
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = need[0].then(|| vec![0.0; gd.len()]);
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let g_row = &gd[r * d..(r + 1) * d];
                    let h_row = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgamma[j] += g_row[j] * h_row[j];
                        dbeta[j] += g_row[j];
                        dxhat[j] = g_row[j] * gv.data()[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * h_row[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = scale * (d as f64 * dxhat[j] - s1 - h_row[j] * s2);
                        }
                    }
                }
                vec![
                    dx.map(|v| Tensor::from_parts(shape.clone(), v)),
                    Some(Tensor::from_parts(vec![d], dgamma)),
                    Some(Tensor::from_parts(vec![d], dbeta)),
                ]
            }),
        ))
    }

    /// `(N, C, H, W) -> (N, C)`, averaging over `H·W`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("global_avg_pool", &self.shape(x))?;
        let flat = self.reshape(x, &[n, c, h * w])?;
        self.mean_axis(flat, 2)
    }

    /// NCHW feature map to `(N, H·W, C)` tokens.
    pub fn nchw_to_tokens(&self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("nchw_to_tokens", &self.shape(x))?;
        let flat = self.reshape(x, &[n, c, h * w])?;
        self.permute(flat, &[0, 2, 1])
    }

    /// `(N, H·W, C)` tokens back to an NCHW feature map.
    pub fn tokens_to_nchw(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x);
        let [n, l, c] = match *shape {
            [n, l, c] => [n, l, c],
            _ => return Err(Error::invalid("tokens_to_nchw", format!("expected (N, L, C), got {shape:?}"))),
        };
        if l != h * w {
            return Err(Error::invalid("tokens_to_nchw", format!("sequence length {l} != {h}x{w}")));
        }
        let t = self.permute(x, &[0, 2, 1])?;
        self.reshape(t, &[n, c, h, w])
    }
}

fn channel_sums(gd: &[f64], n: usize, c: usize, inner: usize) -> Vec<f64> {
    let mut d = vec![0.0; c];
    for_each_channel(n, c, inner, |ch, idx| d[ch] += gd[idx]);
    d
}

/// `(N, C, rest...)` viewed as `(N, C, inner)`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("need at least (N, C), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

#[inline]
fn for_each_channel(n: usize, c: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                f(ch, base + j);
            }
        }
    }
}

fn channel_moments(data: &[f64], n: usize, c: usize, inner: usize, ch: usize) -> (f64, f64) {
    let count = (n * inner) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let base = (i * c + ch) * inner;
        sum += data[base..base + inner].iter().sum::<f64>();
    }
    let mean = sum / count;
    let mut sq = 0.0;
    for i in 0..n {
        let base = (i * c + ch) * inner;
        sq += data[base..base + inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    (mean, sq / count)
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Debug)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = b.normal(format!("{name}.weight"), &[d_in, d_out], 0.02)?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), &[d_out], 0.0, ParamRole::Bias)?)
        } else {
            None
        };
        Ok(Linear {
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, spec: Conv2dSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let weight = b.normal(format!("{name}.weight"), &shape, (2.0 / fan_in).sqrt())?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), &[spec.out_channels], 0.0, ParamRole::Bias)?)
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.conv2d(x, &self.spec, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.spec.weight_shape().iter().product::<usize>() + if self.bias.is_some() { self.spec.out_channels } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    /// Running statistics start at mean 0, variance 1, so eval mode is usable
    /// before any training step.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            gamma: b.constant(format!("{name}.weight"), &[channels], 1.0, ParamRole::NormScale)?,
            beta: b.constant(format!("{name}.bias"), &[channels], 0.0, ParamRole::NormShift)?,
            running_mean: b.constant(format!("{name}.running_mean"), &[channels], 0.0, ParamRole::RunningMean)?,
            running_var: b.constant(format!("{name}.running_var"), &[channels], 1.0, ParamRole::RunningVar)?,
        })
    }

    /// Normalises with batch statistics and updates the running averages in
    /// train mode; uses the running averages in eval mode.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_train() {
            let (y, stats) = s.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let store = s.store_mut();
            for (rm, mean) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
                *rm = (1.0 - m) * *rm + m * mean;
            }
            for (rv, var) in store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&stats.var) {
                *rv = (1.0 - m) * *rv + m * var * unbias;
            }
            Ok(y)
        } else {
            let rm = s.store().get(self.running_mean).value.clone();
            let rv = s.store().get(self.running_var).value.clone();
            s.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            dim,
            eps: LN_EPS,
            gamma: b.constant(format!("{name}.weight"), &[dim], 1.0, ParamRole::NormScale)?,
            beta: b.constant(format!("{name}.bias"), &[dim], 0.0, ParamRole::NormShift)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Plain-tensor convolution for callers outside a tape.
pub fn conv2d(x: &Tensor, spec: &Conv2dSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, spec, wv, bv)?;
    Ok(Rc::unwrap_or_clone(tape.value(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], vec![1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], vec![5.0, 5.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 6.0]);
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 0);
        let l = Linear::new(&mut b, "fc", 8, 16, true).unwrap();
        assert_eq!(l.num_params(), 144);
        assert_eq!(store.num_trainable(), 144);
    }

    #[test]
    fn linear_dim_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], vec![1.0; 3]));
        let w = tape.constant(t(&[2, 2], vec![1.0; 4]));
        assert!(matches!(tape.linear(x, w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let x = Tensor::ones(vec![1, 1, 3, 3]).unwrap();
        let w = Tensor::ones(vec![1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &Conv2dSpec::same(1, 1, 3, 1), &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.get(&[0, 0, 1, 1]).unwrap(), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]).unwrap(), 4.0);
    }

    #[test]
    fn pointwise_identity_conv() {
        let x = Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f64 * 0.1).unwrap();
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let y = conv2d(&x, &Conv2dSpec::pointwise(3, 3), &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let x = Tensor::ones(vec![1, 1, 2, 2]).unwrap();
        let w = Tensor::ones(vec![1, 1, 7, 7]).unwrap();
        let spec = Conv2dSpec {
            padding: 1,
            ..Conv2dSpec::same(1, 1, 7, 1)
        };
        assert!(conv2d(&x, &spec, &w, None).is_err());
    }

    #[test]
    fn batch_norm_train_standardises() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 2, 3, 3], |i| ((i * 7) % 11) as f64).unwrap());
        let g = tape.constant(Tensor::ones(vec![2]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let (y, stats) = tape.batch_norm_train(x, g, b, 0.0).unwrap();
        assert_eq!(stats.count, 18);
        let y = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..9).map(move |j| (n, j)))
                .map(|(n, j)| y.data()[(n * 2 + ch) * 9 + j])
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_mean_update_after_one_batch() {
        let mut store = ParamStore::new();
        let bn = {
            let mut b = ParamBuilder::new(&mut store, 0);
            BatchNorm2d::new(&mut b, "bn", 1).unwrap()
        };
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        {
            let mut s = Session::new(&mut store, true);
            let xv = s.input(x);
            bn.forward(&mut s, xv).unwrap();
        }
        // batch mean 3, momentum 0.1: 0.9 * 0 + 0.1 * 3
        let rm = store.by_name("bn.running_mean").unwrap().value.data()[0];
        assert!((rm - 0.3).abs() < 1e-15);
        // unbiased batch var = (4 + 1 + 0 + 9) / 3
        let rv = store.by_name("bn.running_var").unwrap().value.data()[0];
        assert!((rv - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], vec![3.0; 4]));
        let g = tape.constant(Tensor::ones(vec![4]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardised_row() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], vec![1.0, -1.0]));
        let g = tape.constant(Tensor::ones(vec![2]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let y = tape.value(y);
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_of_constant_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 2, 3, 3], |i| if i < 9 { 2.5 } else { -1.0 }).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, -1.0]);
    }

    #[test]
    fn depthwise_spec_invariants() {
        let bad = Conv2dSpec {
            out_channels: 4,
            ..Conv2dSpec::depthwise(3, 3, 1)
        };
        assert!(bad.validate().is_err());
        assert!(Conv2dSpec::same(3, 3, 4, 1).validate().is_err());
        assert_eq!(Conv2dSpec::same(3, 8, 5, 1).padding, 2);
    }

    fn check(build: impl Fn(&mut ParamBuilder<'_>) -> Box<dyn Fn(&mut Session<'_>, Var) -> Result<Var>>, x: Tensor, train: bool) {
        use crate::autodiff::{finite_difference_check, GradCheckOptions};
        let mut store = ParamStore::new();
        let f = {
            let mut b = ParamBuilder::new(&mut store, 3);
            build(&mut b)
        };
        let r = sample(&[64]);
        let opts = GradCheckOptions {
            train,
            ..Default::default()
        };
        let report = finite_difference_check(&mut store, &[x], &opts, |s, inputs| {
            let y = f(s, inputs[0])?;
            let n = s.value(y).numel();
            let flat = s.reshape(y, &[n])?;
            let w = s.constant(Tensor::new(vec![n], r.data()[..n].to_vec()).unwrap());
            let prod = s.mul(flat, w)?;
            Ok(s.sum(prod))
        })
        .unwrap();
        assert!(report.max_error() < 1e-5, "{report}");
    }

    fn sample(shape: &[usize]) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5)).unwrap()
    }

    #[test]
    fn gradcheck_strided_conv() {
        check(
            |b| {
                let c = Conv2d::new(b, "c", Conv2dSpec::same(2, 3, 3, 2), true).unwrap();
                Box::new(move |s, x| c.forward(s, x))
            },
            sample(&[1, 2, 5, 4]),
            true,
        );
    }

    #[test]
    fn gradcheck_depthwise_conv() {
        check(
            |b| {
                let c = Conv2d::new(b, "c", Conv2dSpec::depthwise(2, 3, 1), true).unwrap();
                Box::new(move |s, x| c.forward(s, x))
            },
            sample(&[2, 2, 3, 4]),
            true,
        );
    }

    #[test]
    fn gradcheck_batch_norm_both_modes() {
        for train in [true, false] {
            check(
                |b| {
                    let bn = BatchNorm2d::new(b, "bn", 2).unwrap();
                    Box::new(move |s, x| bn.forward(s, x))
                },
                sample(&[2, 2, 2, 3]),
                train,
            );
        }
    }

    #[test]
    fn gradcheck_layer_norm_and_linear() {
        check(
            |b| {
                let ln = LayerNorm::new(b, "ln", 4).unwrap();
                let fc = Linear::new(b, "fc", 4, 3, true).unwrap();
                Box::new(move |s, x| {
                    let y = ln.forward(s, x)?;
                    fc.forward(s, y)
                })
            },
            sample(&[2, 3, 4]),
            true,
        );
    }
}
