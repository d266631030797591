//! Work accounting for a selection mask.

use serde::{Deserialize, Serialize};

use super::attention::BlockSizes;
use super::mask::SelectionMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    /// Selected (query block, key block) pairs over all pairs.
    pub selected_fraction: f64,
    /// Multiply-adds for `Q K^T` plus `P V` restricted to selected blocks.
    pub sparse_macs: u64,
    pub dense_macs: u64,
}

/// Work scales linearly with the number of selected key blocks.
pub fn flop_estimate(mask: &SelectionMask, blocks: BlockSizes, head_dim: usize) -> FlopEstimate {
    let per_pair = (blocks.query * blocks.key * head_dim * 2) as u64;
    let pairs = (mask.batch() * mask.heads() * mask.q_blocks() * mask.k_blocks()) as u64;
    let selected = mask.total_selected() as u64;
    FlopEstimate {
        selected_fraction: selected as f64 / pairs as f64,
        sparse_macs: selected * per_pair,
        dense_macs: pairs * per_pair,
    }
}
