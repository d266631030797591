//! `refine-demo`: refinement path identities and a sample refined signal.

use std::path::Path;

use blockflow::bsa::BlockSpec;
use blockflow::refine::{
    conditioned_refine, refine_sample, refine_trajectory, AttentionExpert, ConditionNoise,
    GridSignal, RefinementConfig, RefinementPath,
};
use blockflow::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::report::{num, Artifacts, Check, Report};

pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSettings {
    pub seed: u64,
    pub t_thresh: f64,
    pub steps: usize,
    pub spatial_scale: f64,
    pub temporal_scale: f64,
    pub condition: ConditionNoise,
    /// Low-resolution extents `[T, H, W]`.
    pub low_res: [usize; 3],
    pub channels: usize,
    /// Clean high-resolution condition frames prepended before refining.
    pub cond_frames: usize,
    pub block_t: usize,
    pub block_h: usize,
    pub block_w: usize,
    /// Top-r for the attention expert; dense when absent.
    pub expert_top_r: Option<usize>,
    pub expert_strength: f64,
    /// Step count of the fine reference run the sample is compared against.
    pub reference_steps: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let cfg = RefinementConfig::default();
        Self {
            seed: 0,
            t_thresh: cfg.t_thresh,
            steps: cfg.steps,
            spatial_scale: cfg.spatial_scale,
            temporal_scale: cfg.temporal_scale,
            condition: cfg.condition,
            low_res: [2, 4, 4],
            channels: 4,
            cond_frames: 2,
            block_t: 2,
            block_h: 3,
            block_w: 3,
            expert_top_r: Some(4),
            expert_strength: 1.0,
            reference_steps: 50,
        }
    }
}

impl RefineSettings {
    pub fn config(&self) -> RefinementConfig {
        RefinementConfig {
            t_thresh: self.t_thresh,
            steps: self.steps,
            spatial_scale: self.spatial_scale,
            temporal_scale: self.temporal_scale,
            condition: self.condition,
        }
    }
}

fn gaussian(extents: [usize; 3], channels: usize, rng: &mut SeededRng) -> CliResult<GridSignal> {
    Ok(GridSignal::from_fn(extents, channels, |_, _| rng.normal())?)
}

pub fn run(settings: &RefineSettings, out_dir: &Path) -> CliResult<Report> {
    let cfg = settings.config();
    cfg.validate()?;
    let mut rng = SeededRng::new(settings.seed);
    let x_lr = gaussian(settings.low_res, settings.channels, &mut rng)?;
    let hr = blockflow::refine::upsample_trilinear(&x_lr, cfg.factors())?.extents();
    let x0 = gaussian(hr, settings.channels, &mut rng)?;
    let eps = gaussian(hr, settings.channels, &mut rng)?;
    let path = RefinementPath::new(&x0, &x_lr, &eps, &cfg)?;

    let mut artifacts = Artifacts::create(out_dir)?;
    let mut report = Report::new("refine-demo", settings.seed);

    let endpoint = path
        .input_at(0.0)?
        .max_abs_diff(&x0)?
        .max(path.input_at(cfg.t_thresh)?.max_abs_diff(&path.x_thresh)?);
    report.check(Check::at_most("endpoint_exactness", endpoint, IDENTITY_TOL));

    let unit = RefinementPath::new(&x0, &x_lr, &eps, &RefinementConfig { t_thresh: 1.0, ..cfg })?;
    let plain = GridSignal::new(
        hr,
        settings.channels,
        x0.values().iter().zip(eps.values()).map(|(a, e)| a - e).collect(),
    )?;
    report.check(Check::at_most(
        "degeneracy_t_thresh_1",
        unit.target()?.max_abs_diff(&plain)?,
        IDENTITY_TOL,
    ));

    let target = path.target()?;
    let oracle = |_: &GridSignal, _: f64| Ok(target.clone());
    let states = refine_trajectory(oracle, &path.x_thresh, cfg.t_thresh, cfg.steps)?;
    let recovered = states.last().expect("at least one state").max_abs_diff(&x0)?;
    report.check(Check::at_most("oracle_recovery", recovered, IDENTITY_TOL));
    let residuals = states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let t = cfg.t_thresh * (1.0 - k as f64 / cfg.steps as f64);
            Ok(vec![
                k.to_string(),
                num(t),
                num(s.max_abs_diff(&path.input_at(t.max(0.0))?)?),
            ])
        })
        .collect::<CliResult<Vec<_>>>()?;
    artifacts.csv("oracle_residuals.csv", &["step", "t", "max_abs_residual"], &residuals)?;

    let expert = AttentionExpert {
        blocks: BlockSpec::new(settings.block_t, settings.block_h, settings.block_w),
        top_r: settings.expert_top_r,
        strength: settings.expert_strength,
    };
    let cond = if settings.cond_frames > 0 {
        Some(gaussian([settings.cond_frames, hr[1], hr[2]], settings.channels, &mut rng)?)
    } else {
        None
    };
    let full = [settings.cond_frames + hr[0], hr[1], hr[2]];
    let eps_full = gaussian(full, settings.channels, &mut rng)?;
    let refine = |steps: usize| {
        conditioned_refine(
            cond.as_ref(),
            &x_lr,
            &eps_full,
            &RefinementConfig { steps, ..cfg },
            |x, t| expert.velocity(x, t),
        )
    };
    let refined = refine(cfg.steps)?;
    if let Some(c) = &cond {
        let pinned = refined.frames(0, settings.cond_frames)? == *c;
        report.check(Check::holds("condition_frames_pinned", pinned));
    }
    let fine = refine(settings.reference_steps.max(1))?;
    report.metric("refined_vs_fine_reference", refined.max_abs_diff(&fine)?)?;
    report.metric("high_res_extents", hr)?;
    report.metric("refined_norm", refined.norm())?;

    let sample = refine_sample(|x, t| expert.velocity(x, t), &path.x_thresh, &cfg)?;
    report.metric("unconditioned_sample_norm", sample.norm())?;

    artifacts.tensor("refined.bin", &refined.to_tensor())?;
    artifacts.tensor("x_lr.bin", &x_lr.to_tensor())?;
    artifacts.finish(&report, settings)?;
    Ok(report)
}
