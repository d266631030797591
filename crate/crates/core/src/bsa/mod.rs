//! 3D block-sparse attention.
//!
//! Typical flow: rearrange Q, K, V into block order with
//! [`rearrange_to_blocks`], pool each block, score pooled queries against
//! pooled keys, pick key blocks per query block ([`select_topr`] or
//! [`select_cdf`]), then run [`sparse_attention_forward`]. Outputs come back
//! in block order; [`inverse_rearrange`] restores raster order.

pub mod attention;
pub mod causal;
pub mod flops;
pub mod layout;
pub mod mask;

pub use attention::{
    dense_attention, dense_attention_backward, dense_attention_masked, sparse_attention_backward,
    sparse_attention_forward, AttentionStats, BlockSizes,
};
pub use causal::{
    attend_with_cache, block_causal_attention, build_kv_cache, noisy_attention_cached,
    CausalOutput, KvCache, ProjectionWeights, UnifiedSequence,
};
pub use flops::{flop_estimate, FlopEstimate};
pub use layout::{inverse_rearrange, rearrange_to_blocks, BlockLayout, BlockSpec, GridSpec};
pub use mask::{pool_blocks, pooled_scores, select_cdf, select_topr, SelectionMask, SelectionMode};

use crate::error::Result;
use crate::tensor::Tensor;

/// Pooled top-r mask for Q, K already in block order.
pub fn topr_mask(q: &Tensor, k: &Tensor, blocks: BlockSizes, r: usize) -> Result<SelectionMask> {
    let d = q.last_dim();
    select_topr(&pooled_scores(&pool_blocks(q, blocks.query)?, &pool_blocks(k, blocks.key)?, d)?, r)
}

/// Pooled CDF-p mask for Q, K already in block order.
pub fn cdf_mask(q: &Tensor, k: &Tensor, blocks: BlockSizes, p: f64) -> Result<SelectionMask> {
    let d = q.last_dim();
    select_cdf(&pooled_scores(&pool_blocks(q, blocks.query)?, &pool_blocks(k, blocks.key)?, d)?, p)
}
