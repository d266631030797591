//! Block pooling, pooled scores and block selection masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// How a mask was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionMode {
    TopR(usize),
    CdfP(f64),
    /// Hand-built pattern, e.g. block-local or full.
    Custom,
}

/// Selected key blocks per `(batch, head, query block)`, stored block-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    batch: usize,
    heads: usize,
    q_blocks: usize,
    k_blocks: usize,
    mode: SelectionMode,
    /// Indexed by `(b * heads + h) * q_blocks + qb`; each list sorted ascending.
    selected: Vec<Vec<usize>>,
}

impl SelectionMask {
    /// Builds a mask from explicit lists; lists are sorted and checked for
    /// range and uniqueness.
    pub fn from_lists(
        batch: usize,
        heads: usize,
        q_blocks: usize,
        k_blocks: usize,
        mode: SelectionMode,
        mut selected: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if selected.len() != batch * heads * q_blocks {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} rows, expected {}",
                selected.len(),
                batch * heads * q_blocks
            )));
        }
        for list in &mut selected {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::DimensionMismatch("duplicate key block".into()));
            }
            if list.last().is_some_and(|&k| k >= k_blocks) {
                return Err(Error::DimensionMismatch(format!(
                    "key block index out of range 0..{k_blocks}"
                )));
            }
        }
        Ok(Self {
            batch,
            heads,
            q_blocks,
            k_blocks,
            mode,
            selected,
        })
    }

    /// Every query block selects every key block.
    pub fn full(batch: usize, heads: usize, q_blocks: usize, k_blocks: usize) -> Self {
        Self {
            batch,
            heads,
            q_blocks,
            k_blocks,
            mode: SelectionMode::TopR(k_blocks),
            selected: vec![(0..k_blocks).collect(); batch * heads * q_blocks],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn q_blocks(&self) -> usize {
        self.q_blocks
    }

    pub fn k_blocks(&self) -> usize {
        self.k_blocks
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    /// Sorted key blocks selected by query block `qb` of batch-head `bh`.
    pub fn selected(&self, bh: usize, qb: usize) -> &[usize] {
        &self.selected[bh * self.q_blocks + qb]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.selected
    }

    pub fn is_selected(&self, bh: usize, qb: usize, kb: usize) -> bool {
        self.selected(bh, qb).binary_search(&kb).is_ok()
    }

    pub fn total_selected(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    /// Fraction of (query block, key block) pairs that are selected.
    pub fn density(&self) -> f64 {
        self.total_selected() as f64 / (self.selected.len() * self.k_blocks) as f64
    }

    /// Query-block slice `[start, start + len)` of every batch-head.
    pub fn query_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.q_blocks || len == 0 {
            return Err(Error::DimensionMismatch(format!(
                "query slice {start}..{} outside 0..{}",
                start + len,
                self.q_blocks
            )));
        }
        let mut selected = Vec::with_capacity(self.batch * self.heads * len);
        for bh in 0..self.batch * self.heads {
            for qb in start..start + len {
                selected.push(self.selected(bh, qb).to_vec());
            }
        }
        Ok(Self {
            q_blocks: len,
            selected,
            ..self.clone()
        })
    }

    /// Joins masks over consecutive query-block ranges (inverse of
    /// [`query_slice`](Self::query_slice)).
    pub fn concat_query_blocks(parts: &[SelectionMask]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::DimensionMismatch("no mask parts".into()))?;
        let bh_count = first.batch * first.heads;
        let mut q_blocks = 0;
        for p in parts {
            if p.batch != first.batch || p.heads != first.heads || p.k_blocks != first.k_blocks {
                return Err(Error::DimensionMismatch("mask parts disagree".into()));
            }
            q_blocks += p.q_blocks;
        }
        let mut selected = Vec::with_capacity(bh_count * q_blocks);
        for bh in 0..bh_count {
            for p in parts {
                for qb in 0..p.q_blocks {
                    selected.push(p.selected(bh, qb).to_vec());
                }
            }
        }
        Ok(Self {
            q_blocks,
            selected,
            ..first.clone()
        })
    }

    /// Dense element mask `[bh][s_q][s_k]`, only for oracles.
    pub fn expand(&self, q_block_size: usize, k_block_size: usize) -> Vec<bool> {
        let s_q = self.q_blocks * q_block_size;
        let s_k = self.k_blocks * k_block_size;
        let mut m = vec![false; self.batch * self.heads * s_q * s_k];
        for bh in 0..self.batch * self.heads {
            for qb in 0..self.q_blocks {
                for &kb in self.selected(bh, qb) {
                    for i in qb * q_block_size..(qb + 1) * q_block_size {
                        let row = (bh * s_q + i) * s_k;
                        m[row + kb * k_block_size..row + (kb + 1) * k_block_size].fill(true);
                    }
                }
            }
        }
        m
    }
}

fn check_rank4(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::DimensionMismatch(format!(
            "{what} must have shape (b, heads, s, d), got {:?}",
            x.shape()
        ))),
    }
}

pub(crate) fn dims4(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    check_rank4(x, what)
}

/// Mean of each consecutive run of `n` tokens along the second-to-last axis.
pub fn pool_blocks(x: &Tensor, n: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "pooling needs [..., s, d], got {shape:?}"
        )));
    }
    let s = shape[shape.len() - 2];
    if n == 0 || s % n != 0 {
        return Err(Error::IndivisibleLength { len: s, block: n });
    }
    let d = x.last_dim();
    let blocks = s / n;
    let mut out = Vec::with_capacity(x.numel() / n);
    for chunk in x.data().chunks(n * d) {
        let mut acc = vec![0.0; d];
        for tok in chunk.chunks(d) {
            for (a, v) in acc.iter_mut().zip(tok) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a / n as f64));
    }
    let mut out_shape = shape.to_vec();
    let len = out_shape.len();
    out_shape[len - 2] = blocks;
    Tensor::new(out_shape, out)
}

/// `S_pool = Q_pool K_pool^T / sqrt(d)`, shape `(b, heads, N_q, N_k)`.
pub fn pooled_scores(q_pool: &Tensor, k_pool: &Tensor, d: usize) -> Result<Tensor> {
    let [b, h, nq, dq] = check_rank4(q_pool, "Q_pool")?;
    let [bk, hk, nk, dk] = check_rank4(k_pool, "K_pool")?;
    if b != bk || h != hk || dq != dk || dq != d {
        return Err(Error::DimensionMismatch(format!(
            "Q_pool {:?}, K_pool {:?}, d = {d}",
            q_pool.shape(),
            k_pool.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(b * h * nq * nk);
    for bh in 0..b * h {
        let qs = &q_pool.data()[bh * nq * d..(bh + 1) * nq * d];
        let ks = &k_pool.data()[bh * nk * d..(bh + 1) * nk * d];
        for qi in qs.chunks(d) {
            out.extend(ks.chunks(d).map(|kj| dot(qi, kj) * scale));
        }
    }
    Tensor::new(vec![b, h, nq, nk], out)
}

/// Key blocks ordered by descending score, ties toward the lower index.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn score_rows(scores: &Tensor) -> Result<([usize; 4], impl Iterator<Item = &[f64]>)> {
    let dims = check_rank4(scores, "S_pool")?;
    Ok((dims, scores.data().chunks(dims[3])))
}

/// The `r` highest-scoring key blocks of every query block.
pub fn select_topr(scores: &Tensor, r: usize) -> Result<SelectionMask> {
    let ([b, h, nq, nk], rows) = score_rows(scores)?;
    if r == 0 || r > nk {
        return Err(Error::RankOutOfRange { r, n_blocks: nk });
    }
    let selected = rows
        .map(|row| {
            let mut top = ranked(row);
            top.truncate(r);
            top
        })
        .collect();
    SelectionMask::from_lists(b, h, nq, nk, SelectionMode::TopR(r), selected)
}

/// Minimal score-descending prefix whose softmax mass reaches `p`.
pub fn select_cdf(scores: &Tensor, p: f64) -> Result<SelectionMask> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::ThresholdOutOfRange { p });
    }
    let ([b, h, nq, nk], rows) = score_rows(scores)?;
    let mut selected = Vec::with_capacity(b * h * nq);
    for row in rows {
        let mut probs = row.to_vec();
        crate::tensor::softmax_in_place(&mut probs).ok_or(Error::AllMaskedRow { row: 0 })?;
        let order = ranked(row);
        let mut mass = 0.0;
        let mut take = order.len();
        for (i, &k) in order.iter().enumerate() {
            mass += probs[k];
            if mass >= p {
                take = i + 1;
                break;
            }
        }
        selected.push(order[..take].to_vec());
    }
    SelectionMask::from_lists(b, h, nq, nk, SelectionMode::CdfP(p), selected)
}
