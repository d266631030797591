//! Group rollouts with a single stochastic step, group-relative advantages
//! and the reweighted GRPO objective with its exact parameter gradient.

use serde::{Deserialize, Serialize};

use super::sampler::{
    kl_closed_form, ode_step, step_distribution, velocity_coefficient, Conditioned,
    VelocityField,
};
use super::schedule::{lambda_kl, lambda_policy, shifted_times, NoiseSchedule};
use super::toy::{MixtureTask, RewardSpec};
use crate::error::{Error, Result};
use crate::nn::VelocityNet;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub shift: f64,
    /// Critical steps are drawn uniformly from `0..t_prime_max`.
    pub t_prime_max: usize,
    pub guidance: f64,
    pub schedule: NoiseSchedule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            shift: 12.0,
            t_prime_max: 6,
            guidance: 4.0,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_prime_max == 0 || self.t_prime_max > self.steps {
            return Err(Error::Config(format!(
                "critical step bound {} must lie in 1..={}",
                self.t_prime_max, self.steps
            )));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        Ok(())
    }

    /// Time grid from 1 to 0.
    pub fn grid(&self) -> Result<Vec<f64>> {
        shifted_times(self.steps, self.shift)
    }
}

/// Time at which a stochastic step from `t` over `dt` is evaluated. The
/// schedule is singular at `t = 1`, so a step starting there is evaluated at
/// the midpoint of its interval.
pub fn stochastic_time(t: f64, dt: f64) -> f64 {
    if t < 1.0 {
        t
    } else {
        t - 0.5 * dt
    }
}

/// Which steps of a trajectory use the SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPlan {
    Deterministic,
    Critical(usize),
    AllSteps,
}

impl StepPlan {
    fn is_stochastic(self, k: usize) -> bool {
        match self {
            StepPlan::Deterministic => false,
            StepPlan::Critical(c) => c == k,
            StepPlan::AllSteps => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticStep {
    /// Step index `k`; the step maps `states[k]` to `states[k + 1]`.
    pub index: usize,
    pub t: f64,
    pub dt: f64,
    pub x: Vec<f64>,
    pub x_next: Vec<f64>,
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    /// Log-density under the sampling-time policy.
    pub logp_old: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: usize,
    /// `x_T ... x_0`.
    pub states: Vec<Vec<f64>>,
    pub sde_steps: Vec<StochasticStep>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }
}

/// Runs the sampler from `x_init` over `grid`, drawing step noise from `rng`.
pub fn sample_trajectory(
    field: &Conditioned,
    prompt: usize,
    x_init: &[f64],
    grid: &[f64],
    plan: StepPlan,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(grid.len());
    let mut sde_steps = Vec::new();
    states.push(x_init.to_vec());
    for k in 0..grid.len() - 1 {
        let x = &states[k];
        let dt = grid[k] - grid[k + 1];
        let next = if plan.is_stochastic(k) {
            let t = stochastic_time(grid[k], dt);
            let dist = step_distribution(field, x, t, dt, schedule)?;
            let eps = rng.normals(x.len());
            let x_next = dist.sample(&eps);
            let logp_old = dist.log_prob(&x_next)?;
            sde_steps.push(StochasticStep {
                index: k,
                t,
                dt,
                x: x.clone(),
                x_next: x_next.clone(),
                eps,
                mean: dist.mean,
                std: dist.std,
                logp_old,
            });
            x_next
        } else {
            ode_step(field, x, grid[k], dt)?
        };
        states.push(next);
    }
    Ok(Trajectory {
        prompt,
        states,
        sde_steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub prompt: usize,
    pub x_init: Vec<f64>,
    pub critical: usize,
    pub trajectories: Vec<Trajectory>,
    /// `rewards[k][i]`: reward `k` of trajectory `i`.
    pub rewards: Vec<Vec<f64>>,
}

impl GroupSample {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Samples `group_size` trajectories for one prompt. All members share the
/// initial noise and the critical step; only the injected noise differs.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    task: &MixtureTask,
    prompt: usize,
    group_size: usize,
    sampler: &SamplerConfig,
    all_steps_sde: bool,
    net: &VelocityNet,
    rewards: &RewardSpec,
    rng: &mut SeededRng,
) -> Result<GroupSample> {
    sampler.validate()?;
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let grid = sampler.grid()?;
    let cond = task.cond(prompt);
    let null = task.null_cond();
    let field = Conditioned {
        net,
        cond: &cond,
        null: &null,
        guidance: sampler.guidance,
    };
    let x_init = rng.normals(net.dim());
    let critical = rng.below(sampler.t_prime_max);
    let plan = if all_steps_sde {
        StepPlan::AllSteps
    } else {
        StepPlan::Critical(critical)
    };
    let trajectories = (0..group_size)
        .map(|_| sample_trajectory(&field, prompt, &x_init, &grid, plan, &sampler.schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![Vec::with_capacity(group_size); rewards.len()];
    for tr in &trajectories {
        for (k, s) in rewards.scores(task, prompt, &tr.states).into_iter().enumerate() {
            scores[k].push(s);
        }
    }
    Ok(GroupSample {
        prompt,
        x_init,
        critical,
        trajectories,
        rewards: scores,
    })
}

pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `(R[k][i] - mean_k) / sigma[k]` for one group.
pub fn group_advantages(rewards: &[Vec<f64>], sigma: &[f64]) -> Result<Vec<Vec<f64>>> {
    if rewards.len() != sigma.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} reward rows, {} scales",
            rewards.len(),
            sigma.len()
        )));
    }
    rewards
        .iter()
        .zip(sigma)
        .enumerate()
        .map(|(k, (row, &s))| {
            if row.len() < 2 {
                return Err(Error::GroupTooSmall(row.len()));
            }
            if !(s > 0.0) {
                return Err(Error::ZeroDispersion { reward: k });
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            Ok(row.iter().map(|r| (r - mean) / s).collect())
        })
        .collect()
}

/// Largest population std per reward across groups (`groups[g][k][i]`).
pub fn max_group_std(groups: &[&[Vec<f64>]]) -> Vec<f64> {
    let k = groups.first().map_or(0, |g| g.len());
    (0..k)
        .map(|r| {
            groups
                .iter()
                .map(|g| population_std(&g[r]))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    #[default]
    MaxGroupStd,
    PerGroupStd,
}

/// Advantages for a batch of groups, `[g][k][i]`.
pub fn batch_advantages(groups: &[&[Vec<f64>]], norm: AdvantageNorm) -> Result<Vec<Vec<Vec<f64>>>> {
    let sigma_max = max_group_std(groups);
    if let Some(k) = sigma_max.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroDispersion { reward: k });
    }
    groups
        .iter()
        .map(|g| match norm {
            AdvantageNorm::MaxGroupStd => group_advantages(g, &sigma_max),
            AdvantageNorm::PerGroupStd => {
                // A group without spread gets zero advantages.
                let sigma: Vec<f64> = g
                    .iter()
                    .map(|row| {
                        let s = population_std(row);
                        if s > 0.0 {
                            s
                        } else {
                            1.0
                        }
                    })
                    .collect();
                group_advantages(g, &sigma)
            }
        })
        .collect()
}

/// `sum_k w_k A[k][i]`.
pub fn multi_reward_total(advantages: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() != weights.len() {
        return Err(Error::WeightCountMismatch {
            expected: advantages.len(),
            got: weights.len(),
        });
    }
    let n = advantages.first().map_or(0, Vec::len);
    Ok((0..n)
        .map(|i| advantages.iter().zip(weights).map(|(a, w)| w * a[i]).sum())
        .collect())
}

/// Settings of the per-step objective
/// `lambda_policy * r * A - beta * lambda_kl * KL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub reweight: bool,
    pub norm: AdvantageNorm,
    pub weights: Vec<f64>,
    pub schedule: NoiseSchedule,
    pub guidance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTerms {
    pub objective: f64,
    pub ratio: f64,
    pub kl: f64,
}

/// Objective of one stochastic step, adding `scale * d(objective)/d(params)`
/// into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn step_objective(
    policy: &Conditioned,
    reference: &Conditioned,
    step: &StochasticStep,
    advantage: f64,
    beta: f64,
    reweight: bool,
    schedule: &NoiseSchedule,
    scale: f64,
    grad: &mut [f64],
) -> Result<StepTerms> {
    let (t, dt) = (step.t, step.dt);
    let dist = step_distribution(policy, &step.x, t, dt, schedule)?;
    let logp = dist.log_prob(&step.x_next)?;
    let ratio = (logp - step.logp_old).exp();
    let (lp, lk) = if reweight {
        (lambda_policy(t, dt)?, lambda_kl(t, dt)?)
    } else {
        (1.0, 1.0)
    };
    let var = dist.variance();
    let c = dt * velocity_coefficient(t, dist.sigma) / var;

    let mut upstream: Vec<f64> = step
        .x_next
        .iter()
        .zip(&dist.mean)
        .map(|(xn, m)| lp * advantage * ratio * c * (xn - m))
        .collect();
    let mut kl = 0.0;
    if beta != 0.0 {
        let v_ref = reference.velocity(&step.x, t)?;
        kl = kl_closed_form(&dist.velocity, &v_ref, t, dt, dist.sigma);
        // d(mu)/d(v) = dt * c_v, so d(KL)/d(v) = c (mu - mu_ref) = c dt c_v (v - v_ref).
        let cv = dt * velocity_coefficient(t, dist.sigma);
        for ((u, v), r) in upstream.iter_mut().zip(&dist.velocity).zip(&v_ref) {
            *u -= beta * lk * c * cv * (v - r);
        }
    }
    policy.backward_accumulate(&step.x, t, &upstream, scale, grad)?;
    Ok(StepTerms {
        objective: lp * ratio * advantage - beta * lk * kl,
        ratio,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean objective over all stochastic steps in the batch (maximized).
    pub objective: f64,
    pub grad: Vec<f64>,
    pub kl_mean: f64,
    pub ratio_mean: f64,
}

/// GRPO objective over a batch of groups and its gradient in the parameters
/// of `net`. `reference` is the frozen KL anchor.
pub fn grpo_loss(
    batch: &[GroupSample],
    task: &MixtureTask,
    net: &VelocityNet,
    reference: &VelocityNet,
    config: &ObjectiveConfig,
) -> Result<LossReport> {
    let reward_rows: Vec<&[Vec<f64>]> = batch.iter().map(|g| g.rewards.as_slice()).collect();
    let advantages = batch_advantages(&reward_rows, config.norm)?;
    let totals = advantages
        .iter()
        .map(|a| multi_reward_total(a, &config.weights))
        .collect::<Result<Vec<_>>>()?;

    let terms: usize = batch
        .iter()
        .flat_map(|g| &g.trajectories)
        .map(|tr| tr.sde_steps.len())
        .sum();
    if terms == 0 {
        return Err(Error::Config("batch contains no stochastic steps".into()));
    }
    let scale = 1.0 / terms as f64;
    let null = task.null_cond();
    let mut grad = vec![0.0; net.num_params()];
    let mut report = LossReport {
        objective: 0.0,
        grad: Vec::new(),
        kl_mean: 0.0,
        ratio_mean: 0.0,
    };
    for (group, adv) in batch.iter().zip(&totals) {
        let cond = task.cond(group.prompt);
        let policy = Conditioned {
            net,
            cond: &cond,
            null: &null,
            guidance: config.guidance,
        };
        let refp = policy.with_net(reference);
        for (tr, &a) in group.trajectories.iter().zip(adv) {
            for step in &tr.sde_steps {
                let s = step_objective(
                    &policy,
                    &refp,
                    step,
                    a,
                    config.beta,
                    config.reweight,
                    &config.schedule,
                    scale,
                    &mut grad,
                )?;
                report.objective += s.objective * scale;
                report.kl_mean += s.kl * scale;
                report.ratio_mean += s.ratio * scale;
            }
        }
    }
    report.grad = grad;
    Ok(report)
}

/// Gradient of `lambda * A * r` at `theta = theta_old` for a step from `x`
/// with injected noise `eps`, where `lambda` is `lambda_policy` if
/// `reweight` and one otherwise.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient(
    policy: &Conditioned,
    x: &[f64],
    t: f64,
    dt: f64,
    eps: &[f64],
    advantage: f64,
    schedule: &NoiseSchedule,
    reweight: bool,
) -> Result<Vec<f64>> {
    let dist = step_distribution(policy, x, t, dt, schedule)?;
    let x_next = dist.sample(eps);
    let step = StochasticStep {
        index: 0,
        t,
        dt,
        x: x.to_vec(),
        logp_old: dist.log_prob(&x_next)?,
        x_next,
        eps: eps.to_vec(),
        mean: dist.mean,
        std: dist.std,
    };
    let mut grad = vec![0.0; policy.net.num_params()];
    step_objective(
        policy, policy, &step, advantage, 0.0, reweight, schedule, 1.0, &mut grad,
    )?;
    Ok(grad)
}

/// Closed-form policy gradient for `a = 1` without clipping:
/// `(3/2) A sqrt(dt (1 - t) / t) eps . grad(v)`. In the noise-direction
/// convention `u = -v` this reads `-(3/2) A sqrt(dt (1 - t) / t) eps . grad(u)`.
pub fn analytic_policy_grad_oracle(
    advantage: f64,
    t: f64,
    dt: f64,
    eps: &[f64],
    policy: &Conditioned,
    x: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if schedule.a != 1.0 {
        return Err(Error::Unsupported(format!(
            "closed-form policy gradient needs a = 1, got {}",
            schedule.a
        )));
    }
    let k = 1.5 * advantage * (dt * (1.0 - t) / t).sqrt();
    let upstream: Vec<f64> = eps.iter().map(|e| k * e).collect();
    let mut grad = vec![0.0; policy.net.num_params()];
    policy.backward_accumulate(x, t, &upstream, 1.0, &mut grad)?;
    Ok(grad)
}
