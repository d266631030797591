//! Time grids, the SDE noise schedule with diffusion clipping, and the
//! policy / KL reweighting coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sigma_t = a * sqrt(t / (1 - t))`, with the diffusion term
/// `sigma_t * sqrt(dt)` clipped at `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub a: f64,
    pub tau: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { a: 1.0, tau: 0.45 }
    }
}

impl NoiseSchedule {
    pub fn new(a: f64, tau: f64) -> Result<Self> {
        if !(a > 0.0) || !(tau > 0.0) {
            return Err(Error::Config(format!(
                "noise schedule needs a > 0 and tau > 0, got a = {a}, tau = {tau}"
            )));
        }
        Ok(Self { a, tau })
    }

    /// Same schedule without truncation.
    pub fn unclipped(self) -> Self {
        Self {
            tau: f64::INFINITY,
            ..self
        }
    }
}

fn check_open_unit(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::TimeOutOfDomain { t })
    }
}

pub fn sigma_t(t: f64, schedule: &NoiseSchedule) -> Result<f64> {
    check_open_unit(t)?;
    Ok(schedule.a * (t / (1.0 - t)).sqrt())
}

/// Diffusion coefficient actually applied to the noise, and the sigma used
/// in the drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippedDiffusion {
    /// `min(sigma_t * sqrt(dt), tau)`.
    pub coefficient: f64,
    /// `sigma_t`, or `tau / sqrt(dt)` when clipped.
    pub sigma: f64,
    pub clipped: bool,
}

pub fn clipped_diffusion(t: f64, dt: f64, schedule: &NoiseSchedule) -> Result<ClippedDiffusion> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size {dt} must be positive")));
    }
    let sigma = sigma_t(t, schedule)?;
    let raw = sigma * dt.sqrt();
    Ok(if raw > schedule.tau {
        ClippedDiffusion {
            coefficient: schedule.tau,
            sigma: schedule.tau / dt.sqrt(),
            clipped: true,
        }
    } else {
        ClippedDiffusion {
            coefficient: raw,
            sigma,
            clipped: false,
        }
    })
}

/// `sqrt(t / (dt (1 - t)))`, the inverse of the policy-gradient scale.
pub fn lambda_policy(t: f64, dt: f64) -> Result<f64> {
    check_open_unit(t)?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size {dt} must be positive")));
    }
    Ok((t / (dt * (1.0 - t))).sqrt())
}

/// `t / (dt (1 - t))`, the inverse of the KL-gradient scale.
pub fn lambda_kl(t: f64, dt: f64) -> Result<f64> {
    check_open_unit(t)?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size {dt} must be positive")));
    }
    Ok(t / (dt * (1.0 - t)))
}

/// `t(u) = s u / (1 + (s - 1) u)` on `u_i = i / T`, returned from `t = 1`
/// down to `t = 0` (`T + 1` points).
pub fn shifted_times(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 || !(shift >= 1.0) {
        return Err(Error::Config(format!(
            "time grid needs steps >= 1 and shift >= 1, got {steps}, {shift}"
        )));
    }
    Ok((0..=steps)
        .rev()
        .map(|i| {
            let u = i as f64 / steps as f64;
            shift * u / (1.0 + (shift - 1.0) * u)
        })
        .collect())
}

/// Logit-normal(0, 1) density, used as the flow-matching loss weight. It
/// integrates to one on (0, 1), so its mean under uniform `t` is one.
pub fn logit_normal_weight(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let logit = (t / (1.0 - t)).ln();
    (-0.5 * logit * logit).exp() / ((2.0 * std::f64::consts::PI).sqrt() * t * (1.0 - t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_examples() {
        let s = NoiseSchedule::default();
        assert!((sigma_t(0.5, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((sigma_t(0.9, &s).unwrap() - 3.0).abs() < 1e-12);
        let s2 = NoiseSchedule::new(2.0, 0.45).unwrap();
        for t in [0.1, 0.37, 0.8] {
            assert!((sigma_t(t, &s2).unwrap() - 2.0 * sigma_t(t, &s).unwrap()).abs() < 1e-14);
        }
        assert_eq!(sigma_t(0.0, &s), Err(Error::TimeOutOfDomain { t: 0.0 }));
        assert_eq!(sigma_t(1.0, &s), Err(Error::TimeOutOfDomain { t: 1.0 }));
    }

    #[test]
    fn clipping_examples() {
        let s = NoiseSchedule::default();
        let c = clipped_diffusion(0.9, 0.1, &s).unwrap();
        assert!(c.clipped);
        assert!((c.coefficient - 0.45).abs() <= 1e-12);
        assert!((c.sigma - 0.45 / 0.1f64.sqrt()).abs() <= 1e-12);
        assert!((c.sigma - 1.4230249470757708).abs() <= 1e-12);

        let c = clipped_diffusion(0.5, 0.01, &s).unwrap();
        assert!(!c.clipped);
        assert!((c.coefficient - 0.1).abs() <= 1e-12);
        assert!((c.sigma - 1.0).abs() <= 1e-12);

        let c = clipped_diffusion(0.9, 0.1, &s.unclipped()).unwrap();
        assert!(!c.clipped);
        assert!((c.coefficient - 3.0 * 0.1f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn lambda_examples() {
        assert!((lambda_policy(0.5, 0.1).unwrap() - 10f64.sqrt()).abs() < 1e-12);
        assert!((lambda_kl(0.5, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert!(lambda_policy(1.0, 0.1).is_err());
    }

    #[test]
    fn shifted_grid() {
        let g = shifted_times(4, 1.0).unwrap();
        assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        for s in [1.0, 3.0, 12.0] {
            let g = shifted_times(16, s).unwrap();
            assert_eq!(g[0], 1.0);
            assert_eq!(g[16], 0.0);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
        let g = shifted_times(2, 12.0).unwrap();
        assert!((g[1] - 6.0 / 6.5).abs() < 1e-15);
        assert!((g[1] - 0.9231).abs() < 1e-4);
    }

    #[test]
    fn logit_normal_weight_integrates_to_one() {
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| logit_normal_weight((i as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 1e-6, "{mean}");
    }

    proptest::proptest! {
        #[test]
        fn lambda_identities(t in 0.001f64..0.999, dt in 1e-4f64..0.5) {
            let lp = lambda_policy(t, dt).unwrap();
            let lk = lambda_kl(t, dt).unwrap();
            proptest::prop_assert!((lk - lp * lp).abs() <= 1e-12 * lk.max(1.0));
            let kappa = (dt * (1.0 - t) / t).sqrt();
            proptest::prop_assert!((lp * kappa - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn coefficient_is_three_halves(t in 0.001f64..0.999) {
            let s = sigma_t(t, &NoiseSchedule::default()).unwrap();
            let coef = 1.0 + s * s * (1.0 - t) / (2.0 * t);
            proptest::prop_assert!((coef - 1.5).abs() <= 1e-12);
        }
    }
}
