//! 3D block rearrangement of a `T x H x W` token grid.
//!
//! Blocks are laid out in `[N_T, N_H, N_W]` order and tokens inside a block
//! in `[t, h, w]` order, so each block occupies a contiguous run of
//! `n = t * h * w` positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token-grid extents plus attention sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub batch: usize,
}

impl GridSpec {
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Extents of one 3D block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self { t: 4, h: 4, w: 4 }
    }
}

impl BlockSpec {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Block counts `(N_T, N_H, N_W)`; grids must divide exactly (no padding).
    pub fn counts(&self, grid: &GridSpec) -> Result<(usize, usize, usize)> {
        let check = |axis, extent: usize, block: usize| {
            if block == 0 || extent % block != 0 {
                Err(Error::IndivisibleGrid {
                    axis,
                    extent,
                    block,
                })
            } else {
                Ok(extent / block)
            }
        };
        Ok((
            check('t', grid.t, self.t)?,
            check('h', grid.h, self.h)?,
            check('w', grid.w, self.w)?,
        ))
    }

    pub fn num_blocks(&self, grid: &GridSpec) -> Result<usize> {
        let (a, b, c) = self.counts(grid)?;
        Ok(a * b * c)
    }
}

/// Bijection between raster token order and block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    /// `order[p]` is the raster index of the token stored at block position `p`.
    order: Vec<usize>,
    /// `position[i]` is the block position of raster token `i`.
    position: Vec<usize>,
    block_volume: usize,
}

impl BlockLayout {
    pub fn new(grid: &GridSpec, blocks: &BlockSpec) -> Result<Self> {
        let (_, nh, nw) = blocks.counts(grid)?;
        let n = blocks.volume();
        let mut position = vec![0; grid.tokens()];
        let mut order = vec![0; grid.tokens()];
        for ti in 0..grid.t {
            for hi in 0..grid.h {
                for wi in 0..grid.w {
                    let raster = (ti * grid.h + hi) * grid.w + wi;
                    let block = ((ti / blocks.t) * nh + hi / blocks.h) * nw + wi / blocks.w;
                    let intra = ((ti % blocks.t) * blocks.h + hi % blocks.h) * blocks.w
                        + wi % blocks.w;
                    let p = block * n + intra;
                    position[raster] = p;
                    order[p] = raster;
                }
            }
        }
        Ok(Self {
            order,
            position,
            block_volume: n,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn block_volume(&self) -> usize {
        self.block_volume
    }

    /// Block position of raster token `raster`.
    pub fn position_of(&self, raster: usize) -> usize {
        self.position[raster]
    }

    /// Raster index of the token at block position `pos`.
    pub fn raster_of(&self, pos: usize) -> usize {
        self.order[pos]
    }

    /// `(block index, intra-block offset)` of a raster token.
    pub fn block_of(&self, raster: usize) -> (usize, usize) {
        let p = self.position[raster];
        (p / self.block_volume, p % self.block_volume)
    }

    fn permute(&self, x: &Tensor, src_of: impl Fn(usize) -> usize) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() < 2 || shape[shape.len() - 2] != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected [..., {}, d], got {:?}",
                self.len(),
                shape
            )));
        }
        let d = x.last_dim();
        let s = self.len();
        let mut out = vec![0.0; x.numel()];
        for (dst, src) in out.chunks_mut(s * d).zip(x.data().chunks(s * d)) {
            for p in 0..s {
                let q = src_of(p);
                dst[p * d..(p + 1) * d].copy_from_slice(&src[q * d..(q + 1) * d]);
            }
        }
        Tensor::new(shape.to_vec(), out)
    }

    /// Raster order to block order along the second-to-last axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.permute(x, |p| self.order[p])
    }

    /// Block order back to raster order.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.permute(x, |i| self.position[i])
    }
}

/// Rearranges `x` of shape `[..., T*H*W, d]` (raster order) into block order.
pub fn rearrange_to_blocks(
    x: &Tensor,
    grid: &GridSpec,
    blocks: &BlockSpec,
) -> Result<(Tensor, BlockLayout)> {
    let layout = BlockLayout::new(grid, blocks)?;
    let out = layout.apply(x)?;
    Ok((out, layout))
}

pub fn inverse_rearrange(x: &Tensor, layout: &BlockLayout) -> Result<Tensor> {
    layout.invert(x)
}
