//! Shared inputs for the kernel benchmarks.

use mixformer::autodiff::{ParamBuilder, ParamStore};
use mixformer::block::{MixingBlock, MixingBlockConfig};
use mixformer::Tensor;

/// Deterministic values in `[-1, 1)`.
pub fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let x = (i as u64 ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
    .expect("valid shape")
}

/// A default block with its parameter store.
pub fn block(dim: usize, heads: usize) -> (ParamStore, MixingBlock) {
    let mut store = ParamStore::new();
    let block = {
        let mut b = ParamBuilder::new(&mut store, 0);
        MixingBlock::new(&mut b, "block", MixingBlockConfig::new(dim, heads)).expect("valid block")
    };
    (store, block)
}
