//! `grpo-train`: GRPO on the 2-D mixture task, with ablation variants.

use std::path::{Path, PathBuf};

use blockflow::flow::schedule::NoiseSchedule;
use blockflow::flow::toy::{MixtureTask, RewardKind, RewardSpec};
use blockflow::flow::train::{
    pretrain_flow_matching, train_grpo, GrpoConfig, GrpoRun, PretrainConfig, Variant,
};
use blockflow::flow::SamplerConfig;
use blockflow::VelocityNet;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::{num, Artifacts, Check, Report};

/// Required gain of the mean alignment reward, in units of its initial
/// cross-prompt standard deviation.
pub const GAIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSettings {
    pub seed: u64,
    pub group_size: usize,
    pub prompts_per_update: usize,
    pub steps: usize,
    pub timeshift: f64,
    pub t_prime_max: usize,
    pub guidance: f64,
    pub a: f64,
    pub tau: f64,
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_per_prompt: usize,
    /// Weights for alignment, regularity and smoothness, in that order.
    pub reward_weights: Vec<f64>,
    pub on_target: f64,
    pub variant: Variant,
    /// Runs every listed variant on every seed; overrides `variant`.
    pub variants: Option<Vec<Variant>>,
    /// Defaults to `[seed]`, or three consecutive seeds in acceptance mode.
    pub seeds: Option<Vec<u64>>,
    /// Base checkpoint (`net.json` from an earlier run).
    pub base: Option<PathBuf>,
    pub pretrain_first: bool,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub hidden: [usize; 2],
    pub acceptance: bool,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        let g = GrpoConfig::default();
        let p = PretrainConfig::default();
        let s = SamplerConfig::default();
        Self {
            seed: 0,
            group_size: g.group_size,
            prompts_per_update: g.prompts_per_update,
            steps: s.steps,
            timeshift: s.shift,
            t_prime_max: s.t_prime_max,
            guidance: s.guidance,
            a: s.schedule.a,
            tau: s.schedule.tau,
            beta: g.beta,
            lr: g.lr,
            iterations: g.iterations,
            eval_every: g.eval_every,
            eval_per_prompt: g.eval_per_prompt,
            reward_weights: RewardSpec::alignment_focused().weights,
            on_target: MixtureTask::default().on_target,
            variant: Variant::Full,
            variants: None,
            seeds: None,
            base: None,
            pretrain_first: true,
            pretrain_iterations: p.iterations,
            pretrain_batch: p.batch,
            pretrain_lr: p.lr,
            hidden: p.hidden,
            acceptance: false,
        }
    }
}

impl GrpoSettings {
    pub fn task(&self) -> CliResult<MixtureTask> {
        if !(0.0..=1.0).contains(&self.on_target) {
            return Err(CliError::Config(format!("on_target {} must lie in [0, 1]", self.on_target)));
        }
        Ok(MixtureTask {
            on_target: self.on_target,
            ..MixtureTask::default()
        })
    }

    pub fn grpo_config(&self, variant: Variant, seed: u64) -> CliResult<GrpoConfig> {
        let rewards = RewardSpec::new(RewardSpec::default().kinds, self.reward_weights.clone())?;
        let cfg = GrpoConfig {
            group_size: self.group_size,
            prompts_per_update: self.prompts_per_update,
            beta: self.beta,
            lr: self.lr,
            iterations: self.iterations,
            eval_every: self.eval_every,
            eval_per_prompt: self.eval_per_prompt,
            sampler: SamplerConfig {
                steps: self.steps,
                shift: self.timeshift,
                t_prime_max: self.t_prime_max,
                guidance: self.guidance,
                schedule: NoiseSchedule::new(self.a, self.tau)?,
            },
            rewards,
            variant,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            hidden: self.hidden,
            seed,
            ..PretrainConfig::default()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None if self.acceptance => (0..3).map(|i| self.seed + i).collect(),
            None => vec![self.seed],
        }
    }

    pub fn variant_list(&self) -> Vec<Variant> {
        let mut vs = self.variants.clone().unwrap_or_else(|| vec![self.variant]);
        if self.acceptance {
            for v in [Variant::Full, Variant::NoReweight] {
                if !vs.contains(&v) {
                    vs.push(v);
                }
            }
        }
        vs
    }
}

fn load_base(path: &Path, task: &MixtureTask) -> CliResult<VelocityNet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read base checkpoint {}: {e}", path.display())))?;
    let net: VelocityNet = serde_json::from_str(&text)?;
    let expected = VelocityNet::param_count(net.dim(), net.cond_dim(), net.hidden());
    if net.dim() != task.dim() || net.cond_dim() != task.num_prompts() || net.num_params() != expected {
        return Err(CliError::Config(format!(
            "base checkpoint {} does not fit the task",
            path.display()
        )));
    }
    Ok(net)
}

/// Alignment reward index in the fixed reward order.
fn alignment_index() -> usize {
    RewardSpec::default()
        .kinds
        .iter()
        .position(|&k| k == RewardKind::Alignment)
        .expect("alignment is always present")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: Variant,
    pub initial_alignment: f64,
    pub initial_alignment_std: f64,
    pub final_alignment: f64,
    /// `(final - initial) / initial std`.
    pub gain_in_std: f64,
    pub max_kl: f64,
}

impl RunSummary {
    fn new(seed: u64, variant: Variant, run: &GrpoRun) -> Self {
        let a = alignment_index();
        let first = run.initial();
        let initial = first.reward_mean[a];
        let std = first.reward_std[a];
        let last = run.last().reward_mean[a];
        Self {
            seed,
            variant,
            initial_alignment: initial,
            initial_alignment_std: std,
            final_alignment: last,
            gain_in_std: (last - initial) / std,
            max_kl: run.kl_trace.iter().copied().fold(0.0, f64::max),
        }
    }
}

fn curve_rows(run: &GrpoRun) -> Vec<Vec<String>> {
    run.curve
        .iter()
        .map(|row| {
            let mut r = vec![row.iteration.to_string()];
            r.extend(row.reward_mean.iter().map(|&x| num(x)));
            r.extend(row.reward_std.iter().map(|&x| num(x)));
            r.push(num(row.kl_mean));
            r
        })
        .collect()
}

fn curve_header() -> Vec<String> {
    let kinds = RewardSpec::default().kinds;
    let mut h = vec!["iteration".to_string()];
    h.extend(kinds.iter().map(|k| format!("{}_mean", k.name())));
    h.extend(kinds.iter().map(|k| format!("{}_std", k.name())));
    h.push("kl_mean".into());
    h
}

/// Seeds needed out of `n` for a two-thirds majority.
fn majority(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

pub fn run(settings: &GrpoSettings, out_dir: &Path) -> CliResult<Report> {
    let task = settings.task()?;
    let seeds = settings.seed_list();
    let variants = settings.variant_list();
    if seeds.is_empty() || variants.is_empty() {
        return Err(CliError::Config("seeds and variants must be nonempty".into()));
    }
    let configs = seeds
        .iter()
        .map(|&s| {
            variants
                .iter()
                .map(|&v| settings.grpo_config(v, s))
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;
    let shared_base = match &settings.base {
        Some(p) => Some(load_base(p, &task)?),
        None if settings.pretrain_first => None,
        None => {
            return Err(CliError::Config(
                "no base checkpoint given and pretraining disabled".into(),
            ))
        }
    };

    let mut artifacts = Artifacts::create(out_dir)?;
    let mut report = Report::new("grpo-train", settings.seed);
    let header = curve_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut summaries = Vec::new();
    for (&seed, seed_configs) in seeds.iter().zip(&configs) {
        let base = match &shared_base {
            Some(b) => b.clone(),
            None => {
                let (net, losses) = pretrain_flow_matching(&task, &settings.pretrain_config(seed))?;
                artifacts.json(&format!("base_seed{seed}.json"), &net)?;
                report.metric(
                    &format!("pretrain_final_loss_seed{seed}"),
                    losses.last().copied(),
                )?;
                net
            }
        };
        for cfg in seed_configs {
            let run = train_grpo(&task, &base, cfg)?;
            let tag = format!("{}_seed{seed}", cfg.variant.name());
            artifacts.csv(&format!("curve_{tag}.csv"), &header, &curve_rows(&run))?;
            let kl: Vec<Vec<String>> = run
                .kl_trace
                .iter()
                .enumerate()
                .map(|(i, &k)| vec![(i + 1).to_string(), num(k)])
                .collect();
            artifacts.csv(&format!("kl_{tag}.csv"), &["update", "kl_mean"], &kl)?;
            artifacts.json(&format!("net_{tag}.json"), &run.net)?;
            summaries.push(RunSummary::new(seed, cfg.variant, &run));
        }
    }

    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.seed.to_string(),
                s.variant.name().to_string(),
                num(s.initial_alignment),
                num(s.initial_alignment_std),
                num(s.final_alignment),
                num(s.gain_in_std),
                num(s.max_kl),
            ]
        })
        .collect();
    artifacts.csv(
        "variants.csv",
        &[
            "seed",
            "variant",
            "initial_alignment",
            "initial_alignment_std",
            "final_alignment",
            "gain_in_std",
            "max_kl",
        ],
        &rows,
    )?;

    if settings.acceptance {
        let find = |seed: u64, v: Variant| {
            summaries
                .iter()
                .find(|s| s.seed == seed && s.variant == v)
                .expect("acceptance variants always run")
        };
        let improved = seeds
            .iter()
            .filter(|&&s| find(s, Variant::Full).gain_in_std >= GAIN_THRESHOLD)
            .count();
        let ordered = seeds
            .iter()
            .filter(|&&s| find(s, Variant::Full).final_alignment >= find(s, Variant::NoReweight).final_alignment)
            .count();
        let need = majority(seeds.len()) as f64;
        report.check(Check::at_least("seeds_improved", improved as f64, need));
        report.check(Check::at_least("seeds_full_ge_no_reweight", ordered as f64, need));
    }
    report.metric("runs", &summaries)?;
    artifacts.finish(&report, settings)?;
    Ok(report)
}
