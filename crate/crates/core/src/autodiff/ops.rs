//! Differentiable tensor ops recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{numel, permute_index, Broadcast, MatmulPlan, Tensor};

use super::tape::{Tape, Var};

/// Marks a padded (zero) position in a gather index.
pub const GATHER_PAD: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn reduce_to(plan: &Broadcast, grad: &[f64], b_numel: usize, scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; b_numel];
    plan.for_each(|ai, bi| out[bi] += grad[ai] * scale(ai));
    out
}

impl Tape {
    /// Elementwise `a ∘ b` where `b` broadcasts onto `a` (trailing rule).
    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let plan = Rc::new(Broadcast::new(name, av.shape(), bv.shape())?);
        let out = match op {
            BinaryOp::Add => av.add(&bv)?,
            BinaryOp::Sub => av.sub(&bv)?,
            BinaryOp::Mul => av.mul(&bv)?,
        };
        let a_shape = av.shape().to_vec();
        let b_shape = bv.shape().to_vec();
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => {
                        let mut d = vec![0.0; gd.len()];
                        plan.for_each(|ai, bi| d[ai] = gd[ai] * bv.data()[bi]);
                        Tensor::from_parts(a_shape.clone(), d)
                    }
                });
                let gb = need[1].then(|| {
                    let n = numel(&b_shape);
                    let d = match op {
                        BinaryOp::Add => reduce_to(&plan, gd, n, |_| 1.0),
                        BinaryOp::Sub => reduce_to(&plan, gd, n, |_| -1.0),
                        BinaryOp::Mul => reduce_to(&plan, gd, n, |ai| av.data()[ai]),
                    };
                    Tensor::from_parts(b_shape.clone(), d)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    /// Applies a smooth scalar function with known derivative elementwise.
    pub fn unary(&self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let out = av.map(f);
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let d = g.data().iter().zip(av.data()).map(|(gv, &x)| gv * df(x)).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    /// Batched matrix product, see [`Tensor::matmul`].
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let plan = MatmulPlan::new(av.shape(), bv.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(av.data(), bv.data(), &mut out);
        let out = Tensor::from_parts(plan.out_shape.clone(), out);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, need| {
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; av.numel()];
                    for bi in 0..plan.batch {
                        let bj = plan.b_batch[bi];
                        kernels::gemm_a_bt(
                            m,
                            p,
                            k,
                            &gd[bi * m * p..(bi + 1) * m * p],
                            &bv.data()[bj * k * p..(bj + 1) * k * p],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    Tensor::from_parts(av.shape().to_vec(), d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; bv.numel()];
                    for bi in 0..plan.batch {
                        let bj = plan.b_batch[bi];
                        kernels::gemm_at_b(
                            k,
                            m,
                            p,
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * p..(bi + 1) * m * p],
                            &mut d[bj * k * p..(bj + 1) * k * p],
                        );
                    }
                    Tensor::from_parts(bv.shape().to_vec(), d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.push(
            Tensor::scalar(av.sum()),
            &[a],
            Box::new(move |g, _| {
                let gv = g.data()[0];
                vec![Some(Tensor::from_parts(shape.clone(), vec![gv; numel(&shape)]))]
            }),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / len as f64;
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        for (dst, v) in d[(o * len + l) * inner..(o * len + l + 1) * inner].iter_mut().zip(src) {
                            *dst = v * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av.reshape(shape.to_vec())?;
        let in_shape = av.shape().to_vec();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]),
        ))
    }

    /// Output element `i` is input element `index[i]`, or zero for [`GATHER_PAD`].
    ///
    /// The backward pass scatter-adds, so repeated indices accumulate.
    pub fn gather(&self, a: Var, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if numel(out_shape) != index.len() || out_shape.contains(&0) {
            return Err(Error::invalid(
                "gather",
                format!("index of length {} does not fill {out_shape:?}", index.len()),
            ));
        }
        let src = av.data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_PAD && i >= src.len()) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_PAD { 0.0 } else { src[i] })
            .collect();
        let in_shape = av.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(out_shape.to_vec(), data),
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![0.0; numel(&in_shape)];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != GATHER_PAD {
                        d[i] += gv;
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }),
        ))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let index = permute_index(&shape, perm)?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(a, Rc::new(index), &out_shape)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total / inner;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            parts,
            Box::new(move |g, need| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for ((&w, shape), &nd) in widths.iter().zip(&shapes).zip(need) {
                    if nd {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&gd[start..start + w]);
                        }
                        grads.push(Some(Tensor::from_parts(shape.clone(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} of axis {axis} invalid for {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(a, Rc::new(index), &out_shape)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, kernels::gelu, kernels::gelu_grad)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(kernels::sigmoid);
        let y = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let d = g.data().iter().zip(y.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().unwrap_or(&1);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let y = Rc::new(Tensor::from_parts(av.shape().to_vec(), out));
        let result = (*y).clone();
        self.push(
            result,
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![0.0; g.numel()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }
}

/// Softmax over the last axis of a plain tensor.
pub fn softmax(t: &Tensor) -> Tensor {
    let tape = Tape::new();
    let v = tape.constant(t.clone());
    let s = tape.softmax(v);
    (*tape.value(s)).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Precondition(_))));
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[1, 3], &[1., 10., 100.]));
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(g.get(a).unwrap().data(), &[1., 10., 100., 1., 10., 100.]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let back = tape.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn permute_matches_transpose() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.permute(&[1, 0]).unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
