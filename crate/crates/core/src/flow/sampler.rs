//! Flow-matching pairs and loss, deterministic and stochastic sampling
//! steps, per-step transition densities and the closed-form step KL.
//!
//! Velocities follow the data-direction convention `v = x0 - eps`, with
//! `x_t = (1 - t) x0 + t eps`; sampling runs from `t = 1` down to `t = 0`
//! with positive step sizes, so an Euler step is `x + v dt`.
//!
//! The reverse SDE step adds a score correction. Writing `u = -v` for the
//! noise-direction velocity, the drift in that convention is
//! `u + sigma^2 / (2t) (x + (1 - t) u)` and a step toward the data is
//! `x - drift * dt`. [`noise_direction_drift`] exposes that form;
//! [`reverse_drift`] is the same quantity expressed with `v`.

use serde::{Deserialize, Serialize};

use super::schedule::{clipped_diffusion, logit_normal_weight, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::VelocityNet;

/// Returns `(x_t, v_t)` for `x_t = (1 - t) x0 + t eps`, `v_t = x0 - eps`.
pub fn fm_pair(x0: &[f64], eps: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let xt = x0
        .iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect();
    let v = x0.iter().zip(eps).map(|(a, e)| a - e).collect();
    (xt, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmExample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
}

/// Per-sample flow-matching loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossWeighting {
    #[default]
    LogitNormal,
    Uniform,
}

impl LossWeighting {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            LossWeighting::LogitNormal => logit_normal_weight(t),
            LossWeighting::Uniform => 1.0,
        }
    }
}

/// Mean of `w(t) ||v_pred - v_t||^2` over the batch, and its parameter gradient.
pub fn fm_loss(
    net: &VelocityNet,
    batch: &[FmExample],
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("flow-matching batch is empty".into()));
    }
    let mut grad = vec![0.0; net.num_params()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let (xt, target) = fm_pair(&ex.x0, &ex.eps, ex.t);
        let pred = net.forward(&xt, ex.t, &ex.cond)?;
        let w = weighting.weight(ex.t);
        let resid: Vec<f64> = pred.iter().zip(&target).map(|(p, v)| p - v).collect();
        loss += w * resid.iter().map(|r| r * r).sum::<f64>() * scale;
        let up: Vec<f64> = resid.iter().map(|r| 2.0 * w * r).collect();
        net.backward_accumulate(&xt, ex.t, &ex.cond, &up, scale, &mut grad)?;
    }
    Ok((loss, grad))
}

/// A velocity field `v(x, t)` for a fixed condition.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// A network evaluated for one prompt, optionally with classifier-free
/// guidance `v_null + g (v_cond - v_null)`.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a> {
    pub net: &'a VelocityNet,
    pub cond: &'a [f64],
    pub null: &'a [f64],
    pub guidance: f64,
}

impl<'a> Conditioned<'a> {
    /// No guidance: the conditional branch only.
    pub fn plain(net: &'a VelocityNet, cond: &'a [f64]) -> Self {
        Self {
            net,
            cond,
            null: cond,
            guidance: 1.0,
        }
    }

    fn guided(&self) -> bool {
        self.guidance != 1.0
    }

    /// Adds `scale * d(upstream . v)/d(params)` into `grad`.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        t: f64,
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.net
            .backward_accumulate(x, t, self.cond, upstream, scale * self.guidance, grad)?;
        if self.guided() {
            self.net.backward_accumulate(
                x,
                t,
                self.null,
                upstream,
                scale * (1.0 - self.guidance),
                grad,
            )?;
        }
        Ok(())
    }

    pub fn with_net(&self, net: &'a VelocityNet) -> Self {
        Self { net, ..*self }
    }
}

impl VelocityField for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let vc = self.net.forward(x, t, self.cond)?;
        if !self.guided() {
            return Ok(vc);
        }
        let vu = self.net.forward(x, t, self.null)?;
        Ok(vc
            .iter()
            .zip(&vu)
            .map(|(c, u)| u + self.guidance * (c - u))
            .collect())
    }
}

/// Closure-backed field, mostly for tests and oracles.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(x, t))
    }
}

/// `u + sigma^2 / (2t) (x + (1 - t) u)` for noise-direction velocity `u`.
pub fn noise_direction_drift(u: &[f64], x: &[f64], t: f64, sigma: f64) -> Vec<f64> {
    let c = sigma * sigma / (2.0 * t);
    u.iter()
        .zip(x)
        .map(|(u, x)| u + c * (x + (1.0 - t) * u))
        .collect()
}

/// Drift of the reverse step in the data-direction convention:
/// `v - sigma^2 / (2t) (x - (1 - t) v)`, so that `x_next = x + drift dt`.
pub fn reverse_drift(v: &[f64], x: &[f64], t: f64, sigma: f64) -> Vec<f64> {
    let c = sigma * sigma / (2.0 * t);
    v.iter()
        .zip(x)
        .map(|(v, x)| v - c * (x - (1.0 - t) * v))
        .collect()
}

/// `1 + sigma^2 (1 - t) / (2t)`: the factor multiplying `v` in the drift.
pub fn velocity_coefficient(t: f64, sigma: f64) -> f64 {
    1.0 + sigma * sigma * (1.0 - t) / (2.0 * t)
}

/// Gaussian transition of one stochastic step, `N(mean, std^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub t: f64,
    pub dt: f64,
    /// Sigma used in the drift (after clipping).
    pub sigma: f64,
    /// Diffusion coefficient `min(sigma_t sqrt(dt), tau)`.
    pub std: f64,
    pub clipped: bool,
    pub velocity: Vec<f64>,
    pub mean: Vec<f64>,
}

impl StepDistribution {
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(eps)
            .map(|(m, e)| m + self.std * e)
            .collect()
    }

    /// `log N(x_prev; mean, std^2 I)`.
    pub fn log_prob(&self, x_prev: &[f64]) -> Result<f64> {
        transition_logprob_from(x_prev, &self.mean, self.variance())
    }
}

pub fn step_distribution(
    field: &impl VelocityField,
    x: &[f64],
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
) -> Result<StepDistribution> {
    let noise = clipped_diffusion(t, dt, schedule)?;
    let v = field.velocity(x, t)?;
    let drift = reverse_drift(&v, x, t, noise.sigma);
    let mean = x.iter().zip(&drift).map(|(x, d)| x + d * dt).collect();
    Ok(StepDistribution {
        t,
        dt,
        sigma: noise.sigma,
        std: noise.coefficient,
        clipped: noise.clipped,
        velocity: v,
        mean,
    })
}

/// One reverse SDE step from `t` to `t - dt` with injected noise `eps`.
pub fn sde_step(
    field: &impl VelocityField,
    x: &[f64],
    t: f64,
    dt: f64,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if eps.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "noise has {} dims, state {}",
            eps.len(),
            x.len()
        )));
    }
    Ok(step_distribution(field, x, t, dt, schedule)?.sample(eps))
}

/// Probability-flow Euler step `x + v dt`.
pub fn ode_step(field: &impl VelocityField, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    let v = field.velocity(x, t)?;
    Ok(x.iter().zip(&v).map(|(x, v)| x + v * dt).collect())
}

fn transition_logprob_from(x_prev: &[f64], mean: &[f64], variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::DegenerateVariance { variance });
    }
    let d = x_prev.len() as f64;
    let sq: f64 = x_prev.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - sq / (2.0 * variance))
}

/// `log p(x_prev | x)` for the stochastic step from `t` to `t - dt`.
pub fn transition_logprob(
    field: &impl VelocityField,
    x_prev: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    step_distribution(field, x, t, dt, schedule)?.log_prob(x_prev)
}

/// `(dt / 2) (sigma (1 - t) / (2t) + 1 / sigma)^2 ||v - v_ref||^2`, with
/// `sigma` the drift sigma of the step.
pub fn kl_closed_form(v: &[f64], v_ref: &[f64], t: f64, dt: f64, sigma: f64) -> f64 {
    let c = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    let sq: f64 = v.iter().zip(v_ref).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * dt * c * c * sq
}

/// KL between the policy's and the reference's transition at `(x, t)`.
pub fn kl_term(
    policy: &impl VelocityField,
    reference: &impl VelocityField,
    x: &[f64],
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let noise = clipped_diffusion(t, dt, schedule)?;
    let v = policy.velocity(x, t)?;
    let v_ref = reference.velocity(x, t)?;
    Ok(kl_closed_form(&v, &v_ref, t, dt, noise.sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use crate::rng::SeededRng;

    fn constant(v: Vec<f64>) -> FnField<impl Fn(&[f64], f64) -> Vec<f64>> {
        FnField {
            dim: v.len(),
            f: move |_: &[f64], _| v.clone(),
        }
    }

    #[test]
    fn fm_pair_examples() {
        let (xt, v) = fm_pair(&[2.0], &[0.0], 0.25);
        assert_eq!((xt, v), (vec![1.5], vec![2.0]));
        let (xt, v) = fm_pair(&[1.0, -1.0], &[0.5, 0.5], 0.0);
        assert_eq!((xt, v), (vec![1.0, -1.0], vec![0.5, -1.5]));
        let (xt, _) = fm_pair(&[1.0, -1.0], &[0.5, 0.5], 1.0);
        assert_eq!(xt, vec![0.5, 0.5]);
    }

    #[test]
    fn fm_loss_zero_predictor() {
        let net = VelocityNet::zeros(2, 1, [3, 3]);
        let ex = FmExample {
            x0: vec![1.0, 2.0],
            eps: vec![0.0, -1.0],
            t: 0.3,
            cond: vec![1.0],
        };
        let (loss, _) = fm_loss(&net, &[ex], LossWeighting::LogitNormal).unwrap();
        let expected = logit_normal_weight(0.3) * (1.0 + 9.0);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_perfect_predictor() {
        // Only b3 nonzero: the net outputs a constant equal to the target.
        let mut net = VelocityNet::zeros(1, 1, [2, 2]);
        let n = net.num_params();
        net.params_mut()[n - 1] = 3.0;
        let ex = FmExample {
            x0: vec![2.0],
            eps: vec![-1.0],
            t: 0.6,
            cond: vec![0.0],
        };
        let (loss, grad) = fm_loss(&net, &[ex], LossWeighting::Uniform).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let net = VelocityNet::new(2, 2, [6, 5], &mut rng);
        let batch: Vec<FmExample> = (0..4)
            .map(|i| FmExample {
                x0: rng.normals(2),
                eps: rng.normals(2),
                t: 0.15 + 0.2 * i as f64,
                cond: vec![1.0, 0.0],
            })
            .collect();
        let (_, grad) = fm_loss(&net, &batch, LossWeighting::LogitNormal).unwrap();
        let fd = finite_difference_gradient(
            |p| fm_loss(&net.with_params(p).unwrap(), &batch, LossWeighting::LogitNormal).unwrap().0,
            net.params(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&grad, &fd) <= 1e-6);
    }

    #[test]
    fn drift_worked_example() {
        // a = 1, t = 0.5: sigma^2 / 2t = 1.
        let d = noise_direction_drift(&[-2.0], &[1.0], 0.5, 1.0);
        assert!((d[0] - (-2.0)).abs() < 1e-15);
        // Stepping toward the data moves against the noise-direction drift.
        let field = constant(vec![2.0]);
        let x_next = sde_step(&field, &[1.0], 0.5, 0.1, &[0.0], &NoiseSchedule::default()).unwrap();
        assert!((x_next[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn drift_simplified_form_for_unit_schedule() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let t = rng.uniform_range(0.01, 0.99);
            let sigma = crate::flow::schedule::sigma_t(t, &s).unwrap();
            let (u, x) = (rng.normal(), rng.normal());
            let full = noise_direction_drift(&[u], &[x], t, sigma)[0];
            let simple = 1.5 * u + x / (2.0 * (1.0 - t));
            assert!((full - simple).abs() <= 1e-12 * full.abs().max(1.0));
            let v = reverse_drift(&[-u], &[x], t, sigma)[0];
            assert!((v + full).abs() <= 1e-12 * full.abs().max(1.0));
        }
    }

    #[test]
    fn tiny_schedule_reduces_to_euler() {
        let field = constant(vec![0.7, -1.1]);
        let s = NoiseSchedule::new(1e-12, f64::INFINITY).unwrap();
        let x = [0.3, 0.9];
        let sde = sde_step(&field, &x, 0.4, 0.05, &[0.0, 0.0], &s).unwrap();
        let ode = ode_step(&field, &x, 0.4, 0.05).unwrap();
        for (a, b) in sde.iter().zip(&ode) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ode_examples() {
        let x = ode_step(&constant(vec![0.0, 0.0]), &[1.0, 2.0], 0.5, 0.1).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        // Exact velocity on a linear path reaches x0 for any step count.
        let (x0, eps) = (vec![1.5, -0.5], vec![0.2, 0.9]);
        let v: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| a - e).collect();
        for steps in [1, 3, 16] {
            let grid = crate::flow::schedule::shifted_times(steps, 3.0).unwrap();
            let mut x = eps.clone();
            for w in grid.windows(2) {
                x = ode_step(&constant(v.clone()), &x, w[0], w[0] - w[1]).unwrap();
            }
            for (a, b) in x.iter().zip(&x0) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn logprob_at_mean() {
        let field = constant(vec![0.4, 0.1, -0.3]);
        let s = NoiseSchedule::default();
        let dist = step_distribution(&field, &[0.1, 0.2, 0.3], 0.3, 0.05, &s).unwrap();
        let lp = dist.log_prob(&dist.mean).unwrap();
        let expected = -1.5 * (2.0 * std::f64::consts::PI * dist.variance()).ln();
        assert!((lp - expected).abs() < 1e-12);
        // Decreasing away from the mean.
        let mut prev = lp;
        for k in 1..6 {
            let x: Vec<f64> = dist.mean.iter().map(|m| m + 0.1 * k as f64).collect();
            let l = dist.log_prob(&x).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn logprob_integrates_to_one() {
        let field = constant(vec![0.5]);
        let s = NoiseSchedule::default();
        let dist = step_distribution(&field, &[0.2], 0.4, 0.02, &s).unwrap();
        let sd = dist.std;
        let (lo, hi, n) = (dist.mean[0] - 10.0 * sd, dist.mean[0] + 10.0 * sd, 20_000);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| dist.log_prob(&[lo + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_variance() {
        let dist = StepDistribution {
            t: 0.5,
            dt: 0.1,
            sigma: 0.0,
            std: 0.0,
            clipped: false,
            velocity: vec![0.0],
            mean: vec![0.0],
        };
        assert!(matches!(
            dist.log_prob(&[0.0]),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let s = NoiseSchedule::default();
        let a = constant(vec![0.3, -0.2]);
        assert_eq!(kl_term(&a, &a, &[0.1, 0.1], 0.5, 0.1, &s).unwrap(), 0.0);
        let b = constant(vec![0.5, -0.1]);
        let c = constant(vec![0.7, 0.0]);
        let k1 = kl_term(&a, &b, &[0.1, 0.1], 0.5, 0.1, &s).unwrap();
        let k2 = kl_term(&a, &c, &[0.1, 0.1], 0.5, 0.1, &s).unwrap();
        assert!((k2 - 4.0 * k1).abs() <= 1e-14);
    }

    #[test]
    fn kl_equals_gaussian_kl_of_step_means() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(77);
        for _ in 0..20 {
            let t = rng.uniform_range(0.05, 0.95);
            let dt = rng.uniform_range(0.001, 0.2).min(t);
            let x = rng.normals(2);
            let a = constant(rng.normals(2));
            let b = constant(rng.normals(2));
            let pa = step_distribution(&a, &x, t, dt, &s).unwrap();
            let pb = step_distribution(&b, &x, t, dt, &s).unwrap();
            let direct: f64 = pa
                .mean
                .iter()
                .zip(&pb.mean)
                .map(|(m, r)| (m - r).powi(2))
                .sum::<f64>()
                / (2.0 * pa.variance());
            let closed = kl_term(&a, &b, &x, t, dt, &s).unwrap();
            assert!((closed - direct).abs() <= 1e-10, "{closed} vs {direct}");
        }
    }
}
