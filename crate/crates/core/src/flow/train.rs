//! Base flow-matching pretraining and the GRPO outer loop.

use serde::{Deserialize, Serialize};

use super::grpo::{
    grpo_loss, population_std, rollout_group, sample_trajectory, AdvantageNorm, GroupSample,
    ObjectiveConfig, SamplerConfig, StepPlan,
};
use super::sampler::{fm_loss, Conditioned, FmExample, LossWeighting};
use super::toy::{MixtureTask, RewardSpec};
use crate::error::{Error, Result};
use crate::nn::VelocityNet;
use crate::rng::SeededRng;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Moves `params` against `grad`.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, -1.0);
    }

    /// Moves `params` along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, 1.0);
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += sign * self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt with the null condition.
    pub cond_dropout: f64,
    pub hidden: [usize; 2],
    pub weighting: LossWeighting,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 128,
            lr: 3e-3,
            cond_dropout: 0.1,
            hidden: [32, 32],
            weighting: LossWeighting::LogitNormal,
            seed: 0,
        }
    }
}

/// Trains a conditional velocity net on the mixture task. Returns the net
/// and the loss of every iteration.
pub fn pretrain_flow_matching(
    task: &MixtureTask,
    config: &PretrainConfig,
) -> Result<(VelocityNet, Vec<f64>)> {
    if config.batch == 0 {
        return Err(Error::Config("pretraining batch must be nonempty".into()));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut net = VelocityNet::new(task.dim(), task.num_prompts(), config.hidden, &mut rng);
    let mut adam = Adam::new(config.lr, net.num_params());
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch: Vec<FmExample> = (0..config.batch)
            .map(|_| {
                let prompt = rng.below(task.num_prompts());
                let x0 = task.sample_data(prompt, &mut rng);
                let eps = rng.normals(task.dim());
                let t = rng.uniform();
                let cond = if rng.uniform() < config.cond_dropout {
                    task.null_cond()
                } else {
                    task.cond(prompt)
                };
                FmExample { x0, eps, t, cond }
            })
            .collect();
        let (loss, grad) = fm_loss(&net, &batch, config.weighting)?;
        adam.descend(net.params_mut(), &grad);
        losses.push(loss);
    }
    Ok((net, losses))
}

/// GRPO ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    #[serde(alias = "none")]
    Full,
    NoReweight,
    PerGroupStd,
    AllStepsSde,
    NoTruncation,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoReweight,
        Variant::PerGroupStd,
        Variant::AllStepsSde,
        Variant::NoTruncation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReweight => "no-reweight",
            Variant::PerGroupStd => "per-group-std",
            Variant::AllStepsSde => "all-steps-sde",
            Variant::NoTruncation => "no-truncation",
        }
    }

    /// Accepts the kebab-case names, plus `none` for the full method.
    pub fn parse(name: &str) -> Result<Self> {
        if name == "none" {
            return Ok(Variant::Full);
        }
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub prompts_per_update: usize,
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    pub eval_every: usize,
    /// Evaluation samples per prompt; the noise is fixed for the whole run.
    pub eval_per_prompt: usize,
    pub sampler: SamplerConfig,
    pub rewards: RewardSpec,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            prompts_per_update: 64,
            beta: 3e-4,
            lr: 1e-4,
            iterations: 300,
            eval_every: 25,
            eval_per_prompt: 64,
            sampler: SamplerConfig::default(),
            rewards: RewardSpec::default(),
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.prompts_per_update == 0 || self.eval_every == 0 || self.eval_per_prompt == 0 {
            return Err(Error::Config(
                "prompts_per_update, eval_every and eval_per_prompt must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("lr must be positive and beta non-negative".into()));
        }
        self.sampler.validate()
    }

    fn objective(&self) -> ObjectiveConfig {
        let schedule = match self.variant {
            Variant::NoTruncation => self.sampler.schedule.unclipped(),
            _ => self.sampler.schedule,
        };
        ObjectiveConfig {
            beta: self.beta,
            reweight: self.variant != Variant::NoReweight,
            norm: match self.variant {
                Variant::PerGroupStd => AdvantageNorm::PerGroupStd,
                _ => AdvantageNorm::MaxGroupStd,
            },
            weights: self.rewards.weights.clone(),
            schedule,
            guidance: self.sampler.guidance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub reward_mean: Vec<f64>,
    pub reward_std: Vec<f64>,
    /// Mean per-step KL of the update that produced this row.
    pub kl_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRun {
    pub curve: Vec<CurveRow>,
    /// KL of every update, in order.
    pub kl_trace: Vec<f64>,
    pub net: VelocityNet,
}

impl GrpoRun {
    pub fn initial(&self) -> &CurveRow {
        &self.curve[0]
    }

    pub fn last(&self) -> &CurveRow {
        self.curve.last().expect("curve has the initial row")
    }
}

const EVAL_STREAM: u64 = u64::MAX;

/// Deterministic evaluation: ODE samples from fixed noise for every prompt.
/// Returns per-reward mean and population std over all samples.
pub fn evaluate(
    task: &MixtureTask,
    net: &VelocityNet,
    sampler: &SamplerConfig,
    rewards: &RewardSpec,
    per_prompt: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = sampler.grid()?;
    let null = task.null_cond();
    let mut noise = SeededRng::with_stream(seed, EVAL_STREAM);
    let mut scores = vec![Vec::new(); rewards.len()];
    for prompt in 0..task.num_prompts() {
        let cond = task.cond(prompt);
        let field = Conditioned {
            net,
            cond: &cond,
            null: &null,
            guidance: sampler.guidance,
        };
        for _ in 0..per_prompt {
            let x_init = noise.normals(task.dim());
            let tr = sample_trajectory(
                &field,
                prompt,
                &x_init,
                &grid,
                StepPlan::Deterministic,
                &sampler.schedule,
                &mut noise,
            )?;
            for (k, s) in rewards.scores(task, prompt, &tr.states).into_iter().enumerate() {
                scores[k].push(s);
            }
        }
    }
    let mean = scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let std = scores.iter().map(|s| population_std(s)).collect();
    Ok((mean, std))
}

/// Rollouts for one update. Each group draws from its own stream derived
/// from the seed, the iteration and its slot in the batch.
pub fn collect_batch(
    task: &MixtureTask,
    net: &VelocityNet,
    config: &GrpoConfig,
    iteration: usize,
) -> Result<Vec<GroupSample>> {
    let mut prompt_rng = SeededRng::with_stream(config.seed, (iteration as u64) << 32);
    let sampler = match config.variant {
        Variant::NoTruncation => SamplerConfig {
            schedule: config.sampler.schedule.unclipped(),
            ..config.sampler
        },
        _ => config.sampler,
    };
    (0..config.prompts_per_update)
        .map(|slot| {
            let prompt = prompt_rng.below(task.num_prompts());
            let mut rng =
                SeededRng::with_stream(config.seed, ((iteration as u64) << 32) | (slot as u64 + 1));
            rollout_group(
                task,
                prompt,
                config.group_size,
                &sampler,
                config.variant == Variant::AllStepsSde,
                net,
                &config.rewards,
                &mut rng,
            )
        })
        .collect()
}

/// Runs GRPO from `base`, which also serves as the frozen KL reference.
pub fn train_grpo(task: &MixtureTask, base: &VelocityNet, config: &GrpoConfig) -> Result<GrpoRun> {
    config.validate()?;
    let objective = config.objective();
    let mut net = base.clone();
    let mut adam = Adam::new(config.lr, net.num_params());
    let eval = |net: &VelocityNet, iteration: usize, kl_mean: f64| -> Result<CurveRow> {
        let (reward_mean, reward_std) = evaluate(
            task,
            net,
            &config.sampler,
            &config.rewards,
            config.eval_per_prompt,
            config.seed,
        )?;
        Ok(CurveRow {
            iteration,
            reward_mean,
            reward_std,
            kl_mean,
        })
    };
    let mut curve = vec![eval(&net, 0, 0.0)?];
    let mut kl_trace = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let batch = collect_batch(task, &net, config, it)?;
        let report = grpo_loss(&batch, task, &net, base, &objective)?;
        adam.ascend(net.params_mut(), &report.grad);
        kl_trace.push(report.kl_mean);
        if it % config.eval_every == 0 || it == config.iterations {
            curve.push(eval(&net, it, report.kl_mean)?);
        }
    }
    Ok(GrpoRun {
        curve,
        kl_trace,
        net,
    })
}
