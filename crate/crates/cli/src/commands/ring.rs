//! `ring-check`: ring context-parallel attention against a single worker.

use std::path::Path;

use blockflow::bsa::{
    rearrange_to_blocks, sparse_attention_forward, topr_mask, BlockSizes, BlockSpec, GridSpec,
};
use blockflow::ring::{ring_topr_attention, Partition, Schedule};
use blockflow::rng::gaussian_sample;
use blockflow::{Error, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::report::{num, Artifacts, Check, Report};

pub const RING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingSettings {
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
    /// Defaults to a quarter of the key blocks.
    pub r: Option<usize>,
    pub workers: Vec<usize>,
    /// Fill Q, K, V with constants instead of Gaussian draws.
    pub constant: bool,
}

impl Default for RingSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            t: 8,
            h: 16,
            w: 16,
            head_dim: 8,
            heads: 2,
            batch: 1,
            block_t: 4,
            block_h: 4,
            block_w: 4,
            r: None,
            workers: vec![1, 2, 4],
            constant: false,
        }
    }
}

fn schedules(seed: u64) -> [(&'static str, Schedule); 3] {
    [
        ("sequential", Schedule::Sequential),
        ("interleaved", Schedule::Interleaved(seed)),
        ("concurrent", Schedule::Concurrent),
    ]
}

pub fn run(settings: &RingSettings, out_dir: &Path) -> CliResult<Report> {
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
    if settings.workers.is_empty() {
        return Err(Error::Config("at least one worker count is required".into()).into());
    }
    for &n in &settings.workers {
        Partition::new(n, nk, nk)?;
    }
    let r = settings.r.unwrap_or(nk.div_ceil(4));
    if r == 0 || r > nk {
        return Err(Error::RankOutOfRange { r, n_blocks: nk }.into());
    }

    let shape = [grid.batch, grid.heads, grid.tokens(), grid.head_dim];
    let (q, k, v) = if settings.constant {
        (
            Tensor::full(&shape, 0.5)?,
            Tensor::full(&shape, -0.25)?,
            Tensor::full(&shape, 1.5)?,
        )
    } else {
        let mut rng = SeededRng::new(settings.seed);
        (
            gaussian_sample(&mut rng, &shape)?,
            gaussian_sample(&mut rng, &shape)?,
            gaussian_sample(&mut rng, &shape)?,
        )
    };
    let (qb, layout) = rearrange_to_blocks(&q, &grid, &blocks)?;
    let kb = layout.apply(&k)?;
    let vb = layout.apply(&v)?;
    let sizes = BlockSizes::uniform(blocks.volume());

    let mut artifacts = Artifacts::create(out_dir)?;
    let mut report = Report::new("ring-check", settings.seed);
    let tol = if settings.constant { 0.0 } else { RING_TOL };

    let reference = ring_topr_attention(&qb, &kb, &vb, sizes, r, 1, Schedule::Sequential)?;
    let ref_out = reference.output()?;
    let ref_mask = reference.mask()?;
    let direct_mask = topr_mask(&qb, &kb, sizes, r)?;
    let (direct, _) = sparse_attention_forward(&qb, &kb, &vb, &direct_mask, sizes)?;
    report.check(Check::at_most(
        "single_worker_vs_direct",
        ref_out.max_abs_diff(&direct)?,
        tol,
    ));

    let mut rows = Vec::new();
    let mut counters = Vec::new();
    for &n in &settings.workers {
        for (name, schedule) in schedules(settings.seed) {
            let run = ring_topr_attention(&qb, &kb, &vb, sizes, r, n, schedule)?;
            let dev = run.output()?.max_abs_diff(&ref_out)?;
            let masks_equal = run.mask()? == ref_mask;
            let (gather, attend) = run.messages_sent();
            let expected = n * (n - 1);
            report.check(Check::at_most(format!("deviation_n{n}_{name}"), dev, tol));
            report.check(Check::holds(format!("masks_n{n}_{name}"), masks_equal));
            report.check(Check::holds(
                format!("messages_n{n}_{name}"),
                gather == expected && attend == expected,
            ));
            let visits: usize = run.attention_counters.iter().map(|c| c.block_visits).sum();
            rows.push(vec![
                n.to_string(),
                name.to_string(),
                num(dev),
                masks_equal.to_string(),
                gather.to_string(),
                attend.to_string(),
                visits.to_string(),
            ]);
            if name == "sequential" {
                counters.push((n, run.gather_counters, run.attention_counters));
            }
        }
    }
    artifacts.csv(
        "ring.csv",
        &[
            "workers",
            "schedule",
            "max_abs_deviation",
            "masks_equal",
            "gather_messages",
            "attention_messages",
            "block_visits",
        ],
        &rows,
    )?;
    report.metric("key_blocks", nk)?;
    report.metric("r", r)?;
    report.metric("counters", &counters)?;
    artifacts.finish(&report, settings)?;
    Ok(report)
}
