//! Condition/noisy block-causal attention and the condition KV cache.
//!
//! A unified input is `[X_cond, X_noisy]`. Condition tokens (timestep 0)
//! attend only among themselves; noisy tokens attend to condition and noisy
//! tokens. Since condition keys and values never depend on the noisy part,
//! they are computed once and reused at every sampling step.

use super::attention::dense_attention;
use super::mask::dims4;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Timestep carried by condition tokens.
pub const CONDITION_TIME: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    /// `(b, N_cond, d_model)`, absent when there are no condition tokens.
    pub cond: Option<Tensor>,
    /// `(b, N_noisy, d_model)`.
    pub noisy: Tensor,
    pub t_noisy: f64,
}

impl UnifiedSequence {
    pub fn new(cond: Option<Tensor>, noisy: Tensor, t_noisy: f64) -> Result<Self> {
        let [b, _, dm] = dims3(&noisy, "noisy tokens")?;
        if let Some(c) = &cond {
            let [bc, _, dc] = dims3(c, "condition tokens")?;
            if bc != b || dc != dm {
                return Err(Error::DimensionMismatch(format!(
                    "condition {:?} vs noisy {:?}",
                    c.shape(),
                    noisy.shape()
                )));
            }
        }
        if !(0.0..=1.0).contains(&t_noisy) {
            return Err(Error::Config(format!("t_noisy {t_noisy} outside [0, 1]")));
        }
        Ok(Self {
            cond,
            noisy,
            t_noisy,
        })
    }

    pub fn n_cond(&self) -> usize {
        self.cond.as_ref().map_or(0, |c| c.shape()[1])
    }

    pub fn n_noisy(&self) -> usize {
        self.noisy.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.n_cond() + self.n_noisy()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_cond(&self) -> f64 {
        CONDITION_TIME
    }
}

fn dims3(x: &Tensor, what: &str) -> Result<[usize; 3]> {
    match *x.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::DimensionMismatch(format!(
            "{what} must be (b, n, d_model), got {:?}",
            x.shape()
        ))),
    }
}

/// Q/K/V projections plus an additive timestep embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Each `d_model x (heads * head_dim)`, row-major.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    /// Added as `t * time_embed` to every token before projection.
    pub time_embed: Vec<f64>,
}

impl ProjectionWeights {
    pub fn random(d_model: usize, heads: usize, head_dim: usize, rng: &mut SeededRng) -> Self {
        let width = heads * head_dim;
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal() * scale).collect() };
        Self {
            d_model,
            heads,
            head_dim,
            wq: draw(d_model * width),
            wk: draw(d_model * width),
            wv: draw(d_model * width),
            time_embed: draw(d_model),
        }
    }

    /// Projects `(b, n, d_model)` tokens at timestep `t` to Q, K, V of shape
    /// `(b, heads, n, head_dim)`.
    pub fn project(&self, tokens: &Tensor, t: f64) -> Result<(Tensor, Tensor, Tensor)> {
        let [b, n, dm] = dims3(tokens, "tokens")?;
        if dm != self.d_model {
            return Err(Error::DimensionMismatch(format!(
                "tokens have d_model {dm}, weights expect {}",
                self.d_model
            )));
        }
        let (h, hd) = (self.heads, self.head_dim);
        let width = h * hd;
        let shifted: Vec<f64> = tokens
            .data()
            .chunks(dm)
            .flat_map(|tok| tok.iter().zip(&self.time_embed).map(move |(x, e)| x + t * e))
            .collect();
        let proj = |w: &[f64]| -> Result<Tensor> {
            let flat = crate::tensor::matmul(&shifted, w, b * n, dm, width);
            let mut out = vec![0.0; flat.len()];
            for bi in 0..b {
                for i in 0..n {
                    for hi in 0..h {
                        let src = (bi * n + i) * width + hi * hd;
                        let dst = ((bi * h + hi) * n + i) * hd;
                        out[dst..dst + hd].copy_from_slice(&flat[src..src + hd]);
                    }
                }
            }
            Tensor::new(vec![b, h, n, hd], out)
        };
        Ok((proj(&self.wq)?, proj(&self.wk)?, proj(&self.wv)?))
    }
}

/// Concatenates two `(b, h, n, d)` tensors along the sequence axis.
pub fn concat_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ba, ha, na, da] = dims4(a, "lhs")?;
    let [bb, hb, nb, db] = dims4(b, "rhs")?;
    if (ba, ha, da) != (bb, hb, db) {
        return Err(Error::DimensionMismatch(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for bh in 0..ba * ha {
        out.extend_from_slice(&a.data()[bh * na * da..(bh + 1) * na * da]);
        out.extend_from_slice(&b.data()[bh * nb * db..(bh + 1) * nb * db]);
    }
    Tensor::new(vec![ba, ha, na + nb, da], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalOutput {
    /// `(b, heads, N_cond, head_dim)`.
    pub cond: Option<Tensor>,
    /// `(b, heads, N_noisy, head_dim)`.
    pub noisy: Tensor,
}

/// Condition rows attend to condition keys only; noisy rows attend to
/// `[K_cond, K_noisy]`.
pub fn block_causal_attention(
    seq: &UnifiedSequence,
    weights: &ProjectionWeights,
) -> Result<CausalOutput> {
    let (qn, kn, vn) = weights.project(&seq.noisy, seq.t_noisy)?;
    match &seq.cond {
        None => Ok(CausalOutput {
            cond: None,
            noisy: dense_attention(&qn, &kn, &vn)?,
        }),
        Some(cond) => {
            let (qc, kc, vc) = weights.project(cond, CONDITION_TIME)?;
            let cond_out = dense_attention(&qc, &kc, &vc)?;
            let noisy_out = dense_attention(&qn, &concat_seq(&kc, &kn)?, &concat_seq(&vc, &vn)?)?;
            Ok(CausalOutput {
                cond: Some(cond_out),
                noisy: noisy_out,
            })
        }
    }
}

/// Keys and values of the condition tokens, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn empty() -> Self {
        Self { k: None, v: None }
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_none()
    }

    pub fn keys(&self) -> Option<&Tensor> {
        self.k.as_ref()
    }

    pub fn values(&self) -> Option<&Tensor> {
        self.v.as_ref()
    }

    /// Number of cached condition tokens.
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[2])
    }
}

pub fn build_kv_cache(seq: &UnifiedSequence, weights: &ProjectionWeights) -> Result<KvCache> {
    match &seq.cond {
        None => Ok(KvCache::empty()),
        Some(cond) => {
            let (_, k, v) = weights.project(cond, CONDITION_TIME)?;
            Ok(KvCache {
                k: Some(k),
                v: Some(v),
            })
        }
    }
}

/// Noisy-segment attention against cached condition keys and values.
pub fn attend_with_cache(
    q_noisy: &Tensor,
    cache: &KvCache,
    k_noisy: &Tensor,
    v_noisy: &Tensor,
) -> Result<Tensor> {
    match (&cache.k, &cache.v) {
        (Some(kc), Some(vc)) => {
            let [b, h, _, d] = dims4(q_noisy, "Q_noisy")?;
            let [bc, hc, _, dc] = dims4(kc, "cached K")?;
            if (b, h, d) != (bc, hc, dc) {
                return Err(Error::CacheShapeMismatch(format!(
                    "cache {:?} vs queries {:?}",
                    kc.shape(),
                    q_noisy.shape()
                )));
            }
            let keys = concat_seq(kc, k_noisy)
                .map_err(|e| Error::CacheShapeMismatch(e.to_string()))?;
            let values = concat_seq(vc, v_noisy)
                .map_err(|e| Error::CacheShapeMismatch(e.to_string()))?;
            dense_attention(q_noisy, &keys, &values)
        }
        _ => dense_attention(q_noisy, k_noisy, v_noisy),
    }
}

/// Projects the noisy segment at its timestep and attends through the cache.
pub fn noisy_attention_cached(
    noisy: &Tensor,
    t_noisy: f64,
    weights: &ProjectionWeights,
    cache: &KvCache,
) -> Result<Tensor> {
    let (q, k, v) = weights.project(noisy, t_noisy)?;
    attend_with_cache(&q, cache, &k, &v)
}
