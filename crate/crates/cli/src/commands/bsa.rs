//! `bsa-check`: block-sparse attention equivalence suite.

use std::path::Path;

use blockflow::bsa::{
    cdf_mask, dense_attention, dense_attention_masked, flop_estimate, inverse_rearrange,
    pool_blocks, pooled_scores, rearrange_to_blocks, sparse_attention_backward,
    sparse_attention_forward, topr_mask, BlockLayout, BlockSizes, BlockSpec, GridSpec,
    SelectionMask,
};
use blockflow::gradcheck::{finite_difference_gradient, relative_error};
use blockflow::rng::gaussian_sample;
use blockflow::tensor::softmax_lastdim;
use blockflow::{Error, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::report::{num, Artifacts, Check, Report};

pub const FORWARD_TOL: f64 = 1e-10;
pub const BACKWARD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Topr,
    Cdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsaSettings {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub block_t: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub mode: MaskMode,
    /// Fixed rank for `topr`; drawn per case when absent.
    pub r: Option<usize>,
    /// Fixed threshold for `cdf`; drawn per case when absent.
    pub p: Option<f64>,
    pub cases: usize,
    pub backward_cases: usize,
}

impl Default for BsaSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            t: 8,
            h: 16,
            w: 16,
            head_dim: 8,
            heads: 1,
            batch: 1,
            block_t: 4,
            block_h: 4,
            block_w: 4,
            mode: MaskMode::Topr,
            r: None,
            p: None,
            cases: 20,
            backward_cases: 10,
        }
    }
}

struct Instance {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    qb: Tensor,
    kb: Tensor,
    vb: Tensor,
    layout: BlockLayout,
}

impl Instance {
    fn draw(grid: &GridSpec, blocks: &BlockSpec, rng: &mut SeededRng) -> CliResult<Self> {
        let shape = [grid.batch, grid.heads, grid.tokens(), grid.head_dim];
        let q = gaussian_sample(rng, &shape)?;
        let k = gaussian_sample(rng, &shape)?;
        let v = gaussian_sample(rng, &shape)?;
        let (qb, layout) = rearrange_to_blocks(&q, grid, blocks)?;
        let kb = layout.apply(&k)?;
        let vb = layout.apply(&v)?;
        Ok(Self {
            q,
            k,
            v,
            qb,
            kb,
            vb,
            layout,
        })
    }

    /// Sparse output in raster order.
    fn sparse(&self, mask: &SelectionMask, sizes: BlockSizes) -> CliResult<Tensor> {
        let (out, _) = sparse_attention_forward(&self.qb, &self.kb, &self.vb, mask, sizes)?;
        Ok(inverse_rearrange(&out, &self.layout)?)
    }
}

/// Checks that each row of `mask` is the minimal score-descending prefix
/// with softmax mass at least `p`, against an independently computed
/// softmax.
pub fn cdf_is_minimal(q: &Tensor, k: &Tensor, sizes: BlockSizes, mask: &SelectionMask, p: f64) -> CliResult<bool> {
    let scores = pooled_scores(&pool_blocks(q, sizes.query)?, &pool_blocks(k, sizes.key)?, q.last_dim())?;
    let probs = softmax_lastdim(&scores)?;
    let nk = mask.k_blocks();
    for (row, (s, pr)) in scores.data().chunks(nk).zip(probs.data().chunks(nk)).enumerate() {
        let bh = row / mask.q_blocks();
        let qb = row % mask.q_blocks();
        let sel = mask.selected(bh, qb);
        let min_sel = sel.iter().map(|&j| s[j]).fold(f64::INFINITY, f64::min);
        let max_out = (0..nk)
            .filter(|j| !sel.contains(j))
            .map(|j| s[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max_out > min_sel {
            return Ok(false);
        }
        let mass: f64 = sel.iter().map(|&j| pr[j]).sum();
        if sel.len() < nk && mass < p - 1e-12 {
            return Ok(false);
        }
        let weakest = sel.iter().map(|&j| pr[j]).fold(f64::INFINITY, f64::min);
        if sel.len() > 1 && mass - weakest >= p + 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Max relative error of the sparse backward against central differences of
/// `sum(dO * O)` over one random small instance per case.
fn backward_check(rng: &mut SeededRng, cases: usize) -> CliResult<f64> {
    let grid = GridSpec {
        t: 4,
        h: 4,
        w: 4,
        head_dim: 4,
        heads: 1,
        batch: 1,
    };
    let blocks = BlockSpec::new(2, 2, 2);
    let sizes = BlockSizes::uniform(blocks.volume());
    let nk = blocks.num_blocks(&grid)?;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let inst = Instance::draw(&grid, &blocks, rng)?;
        let d_out = gaussian_sample(rng, inst.qb.shape())?;
        let r = 1 + rng.below(nk);
        let mask = topr_mask(&inst.qb, &inst.kb, sizes, r)?;
        let (out, stats) = sparse_attention_forward(&inst.qb, &inst.kb, &inst.vb, &mask, sizes)?;
        let (dq, dk, dv) =
            sparse_attention_backward(&inst.qb, &inst.kb, &inst.vb, &mask, sizes, &out, &stats, &d_out)?;
        let n = inst.qb.numel();
        let mut flat = inst.qb.data().to_vec();
        flat.extend_from_slice(inst.kb.data());
        flat.extend_from_slice(inst.vb.data());
        let shape = inst.qb.shape().to_vec();
        let fd = finite_difference_gradient(
            |p| {
                let t = |s: &[f64]| Tensor::new(shape.clone(), s.to_vec()).expect("shape");
                let (o, _) = sparse_attention_forward(
                    &t(&p[..n]),
                    &t(&p[n..2 * n]),
                    &t(&p[2 * n..]),
                    &mask,
                    sizes,
                )
                .expect("forward");
                o.dot(&d_out).expect("dot")
            },
            &flat,
            1e-5,
        )?;
        let mut analytic = dq.into_data();
        analytic.extend(dk.into_data());
        analytic.extend(dv.into_data());
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(worst)
}

pub fn run(settings: &BsaSettings, out_dir: &Path) -> CliResult<Report> {
    let grid = GridSpec {
        t: settings.t,
        h: settings.h,
        w: settings.w,
        head_dim: settings.head_dim,
        heads: settings.heads,
        batch: settings.batch,
    };
    let blocks = BlockSpec::new(settings.block_t, settings.block_h, settings.block_w);
    let nk = blocks.num_blocks(&grid)?;
    if let Some(r) = settings.r {
        if r == 0 || r > nk {
            return Err(Error::RankOutOfRange { r, n_blocks: nk }.into());
        }
    }
    if let Some(p) = settings.p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::ThresholdOutOfRange { p }.into());
        }
    }
    let sizes = BlockSizes::uniform(blocks.volume());
    let mut artifacts = Artifacts::create(out_dir)?;
    let mut report = Report::new("bsa-check", settings.seed);
    let mut rng = SeededRng::new(settings.seed);

    let base = Instance::draw(&grid, &blocks, &mut rng)?;
    let full = topr_mask(&base.qb, &base.kb, sizes, nk)?;
    let full_out = base.sparse(&full, sizes)?;
    let dense = dense_attention(&base.q, &base.k, &base.v)?;
    report.check(Check::at_most(
        "dense_equivalence",
        full_out.max_abs_diff(&dense)?,
        FORWARD_TOL,
    ));

    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut masks_ok = true;
    for case in 0..settings.cases {
        let inst = Instance::draw(&grid, &blocks, &mut rng)?;
        let (mask, knob) = match settings.mode {
            MaskMode::Topr => {
                let r = settings.r.unwrap_or_else(|| 1 + rng.below(nk));
                let m = topr_mask(&inst.qb, &inst.kb, sizes, r)?;
                masks_ok &= m.rows().iter().all(|s| s.len() == r);
                (m, r as f64)
            }
            MaskMode::Cdf => {
                let p = settings.p.unwrap_or_else(|| rng.uniform_range(0.5, 1.0));
                let m = cdf_mask(&inst.qb, &inst.kb, sizes, p)?;
                masks_ok &= cdf_is_minimal(&inst.qb, &inst.kb, sizes, &m, p)?;
                (m, p)
            }
        };
        let (sparse, _) = sparse_attention_forward(&inst.qb, &inst.kb, &inst.vb, &mask, sizes)?;
        let expanded = mask.expand(sizes.query, sizes.key);
        let oracle = dense_attention_masked(&inst.qb, &inst.kb, &inst.vb, Some(&expanded))?;
        let diff = sparse.max_abs_diff(&oracle)?;
        worst = worst.max(diff);
        rows.push(vec![
            case.to_string(),
            num(knob),
            num(mask.density()),
            num(diff),
        ]);
    }
    report.check(Check::at_most("mask_oracle", worst, FORWARD_TOL));
    report.check(Check::holds(
        match settings.mode {
            MaskMode::Topr => "topr_counts",
            MaskMode::Cdf => "cdf_minimality",
        },
        masks_ok,
    ));
    artifacts.csv(
        "mask_cases.csv",
        &[
            "case",
            match settings.mode {
                MaskMode::Topr => "r",
                MaskMode::Cdf => "p",
            },
            "density",
            "max_abs_diff",
        ],
        &rows,
    )?;

    let configured = match settings.mode {
        MaskMode::Topr => topr_mask(&base.qb, &base.kb, sizes, settings.r.unwrap_or(nk.div_ceil(16)))?,
        MaskMode::Cdf => cdf_mask(&base.qb, &base.kb, sizes, settings.p.unwrap_or(0.9))?,
    };
    let configured_out = base.sparse(&configured, sizes)?;
    if settings.mode == MaskMode::Cdf && settings.p == Some(1.0) {
        report.check(Check::at_most(
            "cdf_p1_matches_full",
            configured_out.max_abs_diff(&full_out)?,
            FORWARD_TOL,
        ));
    }

    let mut bw_rng = SeededRng::with_stream(settings.seed, 1);
    report.check(Check::at_most(
        "sparse_backward",
        backward_check(&mut bw_rng, settings.backward_cases)?,
        BACKWARD_TOL,
    ));

    if nk >= 16 {
        let r16 = nk / 16;
        let m = topr_mask(&base.qb, &base.kb, sizes, r16)?;
        let est = flop_estimate(&m, sizes, settings.head_dim);
        report.check(Check::at_most("flop_fraction_r_nk_over_16", est.selected_fraction, 0.10));
        report.metric("flop_estimate", est)?;
    }
    report.metric("tokens", grid.tokens())?;
    report.metric("key_blocks", nk)?;
    report.metric("configured_density", configured.density())?;

    artifacts.tensor("q.bin", &base.q)?;
    artifacts.tensor("k.bin", &base.k)?;
    artifacts.tensor("v.bin", &base.v)?;
    artifacts.tensor("dense_out.bin", &dense)?;
    artifacts.tensor("sparse_out.bin", &configured_out)?;
    artifacts.finish(&report, settings)?;
    Ok(report)
}
