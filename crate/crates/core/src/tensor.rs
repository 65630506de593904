//! Dense row-major tensors of `f64`.
//!
//! [`Tensor`] is a plain value: every operation returns a new tensor and
//! leaves its inputs untouched. Differentiable versions of these operations
//! live on [`crate::autodiff::Tape`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;

/// Interpretation tag for the axes of a tensor. Purely descriptive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Images: batch, channels, height, width.
    Nchw,
    /// Token sequences: batch, length, channels.
    Nlc,
    #[default]
    Flat,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    layout: Layout,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}, {:?}", self.shape, self.layout)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::invalid(
            op,
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} holds {} elements but {} were given",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            layout: Layout::Flat,
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            data,
            layout: Layout::Flat,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape)?;
        let n = numel(&shape);
        Ok(Tensor::from_parts(shape, vec![value; n]))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape)?;
        let data = (0..numel(&shape)).map(&mut f).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
            layout: other.layout,
        }
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![1.0; other.data.len()],
            layout: other.layout,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected one element, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape("reshape", &shape)?;
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            layout: Layout::Flat,
        })
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::invalid(
                "get",
                format!("index {index:?} out of bounds for {:?}", self.shape),
            ));
        }
        let flat = index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i);
        Ok(self.data[flat])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            layout: self.layout,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn zip_broadcast(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let plan = Broadcast::new(op, &self.shape, &other.shape)?;
        let mut out = self.data.clone();
        plan.for_each(|ai, bi| out[ai] = f(self.data[ai], other.data[bi]));
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
            layout: self.layout,
        })
    }

    /// Batched matrix product `(..., M, K) x (..., K, P) -> (..., M, P)`.
    ///
    /// The batch dims of `b` broadcast onto those of `self` with the same
    /// trailing rule as the elementwise ops.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &b.shape)?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(&self.data, &b.data, &mut out);
        Ok(Tensor::from_parts(plan.out_shape.clone(), out))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let index = permute_index(&self.shape, perm)?;
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let data = index.iter().map(|&i| self.data[i]).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Round-trips every element through `f32`.
    pub fn to_f32_precision(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}

/// For each output position of `x.permute(perm)`, the source flat index.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(
            "permute",
            format!("{perm:?} is not a permutation of {rank} axes"),
        ));
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        index.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    Ok(index)
}

/// How the elements of `b` line up with the elements of `a` under the
/// trailing broadcast rule: `b` is right-aligned against `a` and each of
/// its dims equals the matching dim of `a` or is 1.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    len: usize,
    kind: BroadcastKind,
}

#[derive(Clone, Debug)]
enum BroadcastKind {
    Same,
    /// `b` repeats with period `m` along the flat index of `a`.
    Suffix(usize),
    /// Explicit `b` index for every element of `a`.
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let len = numel(a);
        if a == b {
            return Ok(Broadcast {
                len,
                kind: BroadcastKind::Same,
            });
        }
        if b.len() > a.len() {
            return Err(Error::shape(op, a, b));
        }
        let offset = a.len() - b.len();
        for (i, &bd) in b.iter().enumerate() {
            if bd != 1 && bd != a[offset + i] {
                return Err(Error::shape(op, a, b));
            }
        }
        // Leading 1s of b do not matter; if the rest matches a's suffix, b is periodic.
        let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
        let core = &b[first..];
        if core == &a[a.len() - core.len()..] {
            return Ok(Broadcast {
                len,
                kind: BroadcastKind::Suffix(numel(core)),
            });
        }
        let rank = a.len();
        let mut b_strides = vec![0usize; rank];
        let mut stride = 1usize;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                b_strides[offset + i] = stride;
            }
            stride *= b[i];
        }
        let mut map = Vec::with_capacity(len);
        let mut counter = vec![0usize; rank];
        let mut bi = 0usize;
        for _ in 0..len {
            map.push(bi);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                bi += b_strides[ax];
                if counter[ax] < a[ax] {
                    break;
                }
                bi -= b_strides[ax] * a[ax];
                counter[ax] = 0;
            }
        }
        Ok(Broadcast {
            len,
            kind: BroadcastKind::Map(map),
        })
    }

    /// Calls `f(a_index, b_index)` for every element of `a`, in order.
    #[inline]
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match &self.kind {
            BroadcastKind::Same => (0..self.len).for_each(|i| f(i, i)),
            BroadcastKind::Suffix(m) => {
                let m = *m;
                for start in (0..self.len).step_by(m) {
                    for j in 0..m {
                        f(start + j, j);
                    }
                }
            }
            BroadcastKind::Map(map) => {
                for (ai, &bi) in map.iter().enumerate() {
                    f(ai, bi);
                }
            }
        }
    }
}

/// Shapes and batch mapping for a batched matmul.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub(crate) m: usize,
    pub(crate) k: usize,
    pub(crate) p: usize,
    pub(crate) batch: usize,
    /// Batch index of `b` for every batch index of `a`.
    pub(crate) b_batch: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::invalid(
                "matmul",
                format!("operands need rank >= 2, got {a:?} and {b:?}"),
            ));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch_shape = &b[..b.len() - 2];
        let batch = numel(a_batch);
        let bc = Broadcast::new("matmul", a_batch, b_batch_shape)
            .map_err(|_| Error::shape("matmul", a, b))?;
        let mut b_batch = vec![0usize; batch];
        bc.for_each(|ai, bi| b_batch[ai] = bi);
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, p]);
        Ok(MatmulPlan {
            m,
            k,
            p,
            batch,
            b_batch,
            out_shape,
        })
    }

    pub(crate) fn out_numel(&self) -> usize {
        self.batch * self.m * self.p
    }

    pub(crate) fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, p) = (self.m, self.k, self.p);
        for bi in 0..self.batch {
            let bj = self.b_batch[bi];
            kernels::gemm(
                m,
                k,
                p,
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bj * k * p..(bj + 1) * k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
            );
        }
    }
}
