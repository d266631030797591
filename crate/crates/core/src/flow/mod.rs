//! Flow matching on a toy conditional task and GRPO alignment of the
//! resulting sampler.

pub mod grpo;
pub mod sampler;
pub mod schedule;
pub mod toy;
pub mod train;

pub use grpo::{
    analytic_policy_grad_oracle, batch_advantages, group_advantages, grpo_loss, max_group_std,
    multi_reward_total, policy_gradient, rollout_group, AdvantageNorm, GroupSample, LossReport,
    ObjectiveConfig, SamplerConfig, StochasticStep, Trajectory,
};
pub use sampler::{
    fm_loss, fm_pair, kl_term, noise_direction_drift, ode_step, sde_step, transition_logprob,
    Conditioned, FmExample, LossWeighting, VelocityField,
};
pub use schedule::{
    clipped_diffusion, lambda_kl, lambda_policy, shifted_times, sigma_t, NoiseSchedule,
};
pub use toy::{MixtureTask, RewardKind, RewardSpec};
pub use train::{pretrain_flow_matching, train_grpo, Adam, GrpoConfig, GrpoRun, PretrainConfig, Variant};
