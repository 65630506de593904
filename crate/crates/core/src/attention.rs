//! Windowed multi-head self-attention with a learned relative position bias.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, ParamId, ParamRole, Session, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::Linear;
use crate::tensor::Tensor;
use crate::window::WindowLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmsaConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    /// Query and value biases on the fused qkv projection.
    pub qkv_bias: bool,
    pub relative_position_bias: bool,
}

impl WmsaConfig {
    pub fn new(dim: usize, num_heads: usize, window_size: usize) -> Self {
        WmsaConfig {
            dim,
            num_heads,
            window_size,
            qkv_bias: true,
            relative_position_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "attention dim {} must be a positive multiple of num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// `head_dim^(-1/2)`.
    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).powf(-0.5)
    }

    pub fn table_rows(&self) -> usize {
        (2 * self.window_size - 1).pow(2)
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim;
        let qkv = 3 * d * d + if self.qkv_bias { 2 * d } else { 0 };
        let table = if self.relative_position_bias {
            self.table_rows() * self.num_heads
        } else {
            0
        };
        qkv + d * d + d + table
    }
}

/// Row of the bias table for every `(query, key)` slot pair of a `K×K`
/// window, flattened `(K², K²)`.
pub fn relative_position_index(k: usize) -> Vec<usize> {
    let t = k * k;
    let span = 2 * k - 1;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        let (iy, ix) = (i / k, i % k);
        for j in 0..t {
            let (jy, jx) = (j / k, j % k);
            index.push((iy + k - 1 - jy) * span + (ix + k - 1 - jx));
        }
    }
    index
}

impl Tape {
    /// Expands a `((2K-1)², h)` table into the per-head bias `(h, K², K²)`.
    pub fn relative_position_bias(&self, table: Var, k: usize, heads: usize) -> Result<Var> {
        let expected = [(2 * k - 1).pow(2), heads];
        if self.shape(table) != expected {
            return Err(Error::shape("relative_position_bias", &self.shape(table), &expected));
        }
        let rel = relative_position_index(k);
        let t = k * k;
        let mut index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            index.extend(rel.iter().map(|&r| r * heads + h));
        }
        self.gather(table, Rc::new(index), &[heads, t, t])
    }

    /// Scaled dot-product attention inside each window.
    ///
    /// `qkv` is `(B, T, 3D)` with queries, keys and values packed along the
    /// last axis and heads contiguous inside each. `bias` is `(h, T, T)`,
    /// `mask` is `(nW, T, T)` and window `b` uses mask `b mod nW`. Returns the
    /// concatenated heads `(B, T, D)` before any output projection.
    pub fn windowed_attention(
        &self,
        qkv: Var,
        heads: usize,
        scale: f64,
        bias: Option<Var>,
        mask: Option<Rc<Tensor>>,
    ) -> Result<Var> {
        let qv = self.value(qkv);
        let [b, t, d3] = match *qv.shape() {
            [b, t, d3] => [b, t, d3],
            _ => return Err(Error::invalid("attention", format!("expected (B, T, 3D), got {:?}", qv.shape()))),
        };
        if heads == 0 || d3 % (3 * heads) != 0 {
            return Err(Error::invalid("attention", format!("width {d3} does not split into q/k/v x {heads} heads")));
        }
        let d = d3 / 3;
        let hd = d / heads;
        let bv = bias.map(|v| self.value(v));
        if let Some(bv) = &bv {
            if bv.shape() != [heads, t, t] {
                return Err(Error::shape("attention", bv.shape(), &[heads, t, t]));
            }
        }
        let nw = match &mask {
            Some(m) => {
                let nw = m.shape()[0];
                if m.shape() != [nw, t, t] || nw == 0 || b % nw != 0 {
                    return Err(Error::invalid(
                        "attention",
                        format!("mask {:?} does not fit {b} windows of {t} tokens", m.shape()),
                    ));
                }
                nw
            }
            None => 1,
        };

        let tt = t * t;
        let mut probs = vec![0.0; b * heads * tt];
        let mut out = vec![0.0; b * t * d];
        let mut q = vec![0.0; t * hd];
        let mut k = vec![0.0; t * hd];
        let mut v = vec![0.0; t * hd];
        let mut o = vec![0.0; t * hd];
        let src = qv.data();
        for w in 0..b {
            let rows = &src[w * t * d3..(w + 1) * t * d3];
            for h in 0..heads {
                extract_head(rows, d3, h * hd, hd, &mut q);
                extract_head(rows, d3, d + h * hd, hd, &mut k);
                extract_head(rows, d3, 2 * d + h * hd, hd, &mut v);
                let p = &mut probs[(w * heads + h) * tt..(w * heads + h + 1) * tt];
                kernels::gemm_a_bt(t, hd, t, &q, &k, p);
                p.iter_mut().for_each(|s| *s *= scale);
                if let Some(bv) = &bv {
                    p.iter_mut().zip(&bv.data()[h * tt..(h + 1) * tt]).for_each(|(s, b)| *s += b);
                }
                if let Some(m) = &mask {
                    let mw = (w % nw) * tt;
                    p.iter_mut().zip(&m.data()[mw..mw + tt]).for_each(|(s, m)| *s += m);
                }
                softmax_rows(p, t);
                o.fill(0.0);
                kernels::gemm(t, t, hd, p, &v, &mut o);
                insert_head(&o, &mut out[w * t * d..(w + 1) * t * d], d, h * hd, hd);
            }
        }

        let mut parents = vec![qkv];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![b, t, d], out);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |g, need| {
                let gd = g.data();
                let src = qv.data();
                let mut dqkv = vec![0.0; src.len()];
                let mut dbias = need.get(1).copied().unwrap_or(false).then(|| vec![0.0; heads * tt]);
                let mut q = vec![0.0; t * hd];
                let mut k = vec![0.0; t * hd];
                let mut v = vec![0.0; t * hd];
                let mut go = vec![0.0; t * hd];
                let mut dp = vec![0.0; tt];
                let mut dx = vec![0.0; t * hd];
                for w in 0..b {
                    let rows = &src[w * t * d3..(w + 1) * t * d3];
                    for h in 0..heads {
                        let p = &probs[(w * heads + h) * tt..(w * heads + h + 1) * tt];
                        extract_head(rows, d3, h * hd, hd, &mut q);
                        extract_head(rows, d3, d + h * hd, hd, &mut k);
                        extract_head(rows, d3, 2 * d + h * hd, hd, &mut v);
                        extract_head(&gd[w * t * d..(w + 1) * t * d], d, h * hd, hd, &mut go);
                        let drows = &mut dqkv[w * t * d3..(w + 1) * t * d3];

                        // values
                        dx.fill(0.0);
                        kernels::gemm_at_b(t, t, hd, p, &go, &mut dx);
                        add_head(&dx, drows, d3, 2 * d + h * hd, hd);

                        // scores
                        dp.fill(0.0);
                        kernels::gemm_a_bt(t, hd, t, &go, &v, &mut dp);
                        for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            dr.iter_mut().zip(pr).for_each(|(dv, pv)| *dv = pv * (*dv - dot));
                        }
                        if let Some(db) = dbias.as_mut() {
                            db[h * tt..(h + 1) * tt].iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
                        }
                        dp.iter_mut().for_each(|s| *s *= scale);

                        dx.fill(0.0);
                        kernels::gemm(t, t, hd, &dp, &k, &mut dx);
                        add_head(&dx, drows, d3, h * hd, hd);
                        dx.fill(0.0);
                        kernels::gemm_at_b(t, t, hd, &dp, &q, &mut dx);
                        add_head(&dx, drows, d3, d + h * hd, hd);
                    }
                }
                let mut grads = vec![need[0].then(|| Tensor::from_parts(vec![b, t, d3], dqkv))];
                if need.len() > 1 {
                    grads.push(dbias.map(|v| Tensor::from_parts(vec![heads, t, t], v)));
                }
                grads
            }),
        ))
    }
}

fn extract_head(rows: &[f64], stride: usize, offset: usize, hd: usize, dst: &mut [f64]) {
    for (r, chunk) in dst.chunks_mut(hd).enumerate() {
        chunk.copy_from_slice(&rows[r * stride + offset..r * stride + offset + hd]);
    }
}

fn insert_head(src: &[f64], rows: &mut [f64], stride: usize, offset: usize, hd: usize) {
    for (r, chunk) in src.chunks(hd).enumerate() {
        rows[r * stride + offset..r * stride + offset + hd].copy_from_slice(chunk);
    }
}

fn add_head(src: &[f64], rows: &mut [f64], stride: usize, offset: usize, hd: usize) {
    for (r, chunk) in src.chunks(hd).enumerate() {
        rows[r * stride + offset..r * stride + offset + hd]
            .iter_mut()
            .zip(chunk)
            .for_each(|(a, b)| *a += b);
    }
}

fn softmax_rows(p: &mut [f64], t: usize) {
    for row in p.chunks_mut(t) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Plain-tensor version of [`Tape::relative_position_bias`].
pub fn relative_position_bias(k: usize, heads: usize, table: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tape.constant(table.clone());
    let out = tape.relative_position_bias(v, k, heads)?;
    Ok(Rc::unwrap_or_clone(tape.value(out)))
}

/// W-MSA layer: fused qkv projection, per-window attention, output projection.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub cfg: WmsaConfig,
    qkv: ParamId,
    q_bias: Option<ParamId>,
    v_bias: Option<ParamId>,
    proj: Linear,
    table: Option<ParamId>,
}

impl WindowAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: WmsaConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let qkv = b.normal(format!("{name}.qkv.weight"), &[d, 3 * d], 0.02)?;
        let (q_bias, v_bias) = if cfg.qkv_bias {
            (
                Some(b.constant(format!("{name}.q_bias"), &[d], 0.0, ParamRole::Bias)?),
                Some(b.constant(format!("{name}.v_bias"), &[d], 0.0, ParamRole::Bias)?),
            )
        } else {
            (None, None)
        };
        let proj = Linear::new(b, &format!("{name}.proj"), d, d, true)?;
        let table = if cfg.relative_position_bias {
            Some(b.constant(
                format!("{name}.relative_position_bias_table"),
                &[cfg.table_rows(), cfg.num_heads],
                0.0,
                ParamRole::Table,
            )?)
        } else {
            None
        };
        Ok(WindowAttention {
            cfg,
            qkv,
            q_bias,
            v_bias,
            proj,
            table,
        })
    }

    /// Fused `(…, D) -> (…, 3D)` projection.
    pub fn qkv(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.qkv);
        let bias = match (self.q_bias, self.v_bias) {
            (Some(q), Some(v)) => {
                let q = s.param(q);
                let v = s.param(v);
                let zeros = s.constant(Tensor::zeros(vec![self.cfg.dim])?);
                Some(s.concat(&[q, zeros, v], 0)?)
            }
            _ => None,
        };
        s.linear(x, w, bias)
    }

    /// Multiplies the value third of `qkv (N, T, 3D)` by a per-image,
    /// per-channel gate `(N, D)`.
    pub fn gate_values(&self, s: &Session<'_>, qkv: Var, gate: Var) -> Result<Var> {
        let shape = s.shape(qkv);
        let d = self.cfg.dim;
        let n = shape[0];
        if s.shape(gate) != [n, d] {
            return Err(Error::shape("v_gate", &s.shape(gate), &[n, d]));
        }
        let qk = s.narrow(qkv, 2, 0, 2 * d)?;
        let v = s.narrow(qkv, 2, 2 * d, d)?;
        let g = s.reshape(gate, &[n, 1, d])?;
        let v = s.mul(v, g)?;
        s.concat(&[qk, v], 2)
    }

    fn bias(&self, s: &mut Session<'_>) -> Result<Option<Var>> {
        match self.table {
            Some(id) => {
                let table = s.param(id);
                Ok(Some(s.relative_position_bias(table, self.cfg.window_size, self.cfg.num_heads)?))
            }
            None => Ok(None),
        }
    }

    fn attend(&self, s: &mut Session<'_>, qkv_windows: Var, mask: Option<&Tensor>) -> Result<Var> {
        let bias = self.bias(s)?;
        let mask = mask.map(|m| Rc::new(m.clone()));
        s.windowed_attention(qkv_windows, self.cfg.num_heads, self.cfg.scale(), bias, mask)
    }

    /// Attention over already-partitioned windows `(N·nW, K², D)`.
    ///
    /// `v_gate (N, D)` scales the values of every window of image `n`.
    pub fn forward_windows(
        &self,
        s: &mut Session<'_>,
        windows: Var,
        mask: Option<&Tensor>,
        v_gate: Option<Var>,
    ) -> Result<Var> {
        let shape = s.shape(windows);
        let [b, t, d] = match *shape {
            [b, t, d] => [b, t, d],
            _ => return Err(Error::invalid("wmsa", format!("expected (B, K², D), got {shape:?}"))),
        };
        let k = self.cfg.window_size;
        if t != k * k || d != self.cfg.dim {
            return Err(Error::shape("wmsa", &shape, &[b, k * k, self.cfg.dim]));
        }
        let mut qkv = self.qkv(s, windows)?;
        if let Some(gate) = v_gate {
            let n = s.shape(gate)[0];
            if n == 0 || b % n != 0 {
                return Err(Error::invalid("wmsa", format!("{b} windows do not split over {n} images")));
            }
            let per_image = s.reshape(qkv, &[n, (b / n) * t, 3 * d])?;
            let gated = self.gate_values(s, per_image, gate)?;
            qkv = s.reshape(gated, &[b, t, 3 * d])?;
        }
        let heads = self.attend(s, qkv, mask)?;
        self.proj.forward(s, heads)
    }

    /// Attention over a token map `(N, H·W, D)`: projects before windowing
    /// and after un-windowing so padded slots never reach the linears.
    pub fn forward_tokens(
        &self,
        s: &mut Session<'_>,
        x: Var,
        layout: &WindowLayout,
        v_gate: Option<Var>,
    ) -> Result<Var> {
        if layout.window_size != self.cfg.window_size {
            return Err(Error::Config(format!(
                "layout window {} != attention window {}",
                layout.window_size, self.cfg.window_size
            )));
        }
        let mut qkv = self.qkv(s, x)?;
        if let Some(gate) = v_gate {
            qkv = self.gate_values(s, qkv, gate)?;
        }
        let windows = s.partition_tokens(qkv, layout)?;
        let mask = layout.needs_mask().then(|| layout.mask());
        let heads = self.attend(s, windows, mask.as_ref())?;
        let tokens = s.reverse_tokens(heads, layout)?;
        self.proj.forward(s, tokens)
    }

    pub fn num_params(&self) -> usize {
        self.cfg.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn k1_index_is_single_cell() {
        assert_eq!(relative_position_index(1), vec![0]);
        let table = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let bias = relative_position_bias(1, 3, &table).unwrap();
        assert_eq!(bias.shape(), &[3, 1, 1]);
        assert_eq!(bias.data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn k2_index_by_hand() {
        // slots (0,0) (0,1) (1,0) (1,1); offsets (dy+1)*3 + (dx+1)
        let expected = vec![
            4, 3, 1, 0, //
            5, 4, 2, 1, //
            7, 6, 4, 3, //
            8, 7, 5, 4,
        ];
        assert_eq!(relative_position_index(2), expected);
        let distinct: std::collections::BTreeSet<_> = expected.into_iter().collect();
        assert_eq!(distinct.len(), 9);
    }

    #[test]
    fn symmetric_table_gives_symmetric_bias() {
        let k = 3;
        let rows = 25;
        // symmetric under offset negation: row r and row rows-1-r agree
        let table = Tensor::from_fn(vec![rows, 1], |r| (r.min(rows - 1 - r)) as f64).unwrap();
        let bias = relative_position_bias(k, 1, &table).unwrap();
        let t = 9;
        for i in 0..t {
            for j in 0..t {
                assert_eq!(bias.data()[i * t + j], bias.data()[j * t + i]);
            }
        }
    }

    #[test]
    fn table_shape_is_checked() {
        let table = Tensor::zeros(vec![8, 2]).unwrap();
        assert!(relative_position_bias(2, 2, &table).is_err());
    }

    #[test]
    fn single_token_window_returns_projected_values() {
        let mut store = ParamStore::new();
        let attn = {
            let mut b = ParamBuilder::new(&mut store, 1);
            WindowAttention::new(&mut b, "attn", WmsaConfig::new(4, 1, 1)).unwrap()
        };
        let x = Tensor::from_fn(vec![3, 1, 4], |i| i as f64 * 0.25 - 1.0).unwrap();
        let mut s = Session::inference(&mut store, false);
        let xv = s.input(x);
        let y = attn.forward_windows(&mut s, xv, None, None).unwrap();
        let qkv = attn.qkv(&mut s, xv).unwrap();
        let v = s.narrow(qkv, 2, 8, 4).unwrap();
        let expected = attn.proj.forward(&mut s, v).unwrap();
        assert!(s.value(y).max_abs_diff(&s.value(expected)).unwrap() < 1e-15);
    }

    #[test]
    fn masked_pairs_get_no_weight() {
        // Two-token windows with the second token masked out: output equals v of token 0 for query 0.
        let tape = Tape::new();
        let qkv = Tensor::from_fn(vec![1, 2, 3], |i| [0.3, -0.2, 1.5, 2.0, 0.7, -4.0][i]).unwrap();
        let mask = Tensor::new(vec![1, 2, 2], vec![0.0, -1e9, -1e9, 0.0]).unwrap();
        let q = tape.constant(qkv);
        let out = tape.windowed_attention(q, 1, 1.0, None, Some(Rc::new(mask))).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -4.0]);
    }
}
