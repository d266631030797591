//! Conditional 2-D mixture task and its analytic rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// `K` Gaussian modes on a circle. Prompt `c` asks for mode `c`; the
/// pretraining data for that prompt lands on the target mode with
/// probability `on_target` and on a uniformly chosen other mode otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTask {
    pub modes: Vec<[f64; 2]>,
    pub mode_std: f64,
    pub on_target: f64,
}

impl Default for MixtureTask {
    fn default() -> Self {
        Self::ring(4, 2.0, 0.3, 0.4)
    }
}

impl MixtureTask {
    pub fn ring(k: usize, radius: f64, mode_std: f64, on_target: f64) -> Self {
        let modes = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            modes,
            mode_std,
            on_target,
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn num_prompts(&self) -> usize {
        self.modes.len()
    }

    /// One-hot prompt embedding.
    pub fn cond(&self, prompt: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.num_prompts()];
        c[prompt] = 1.0;
        c
    }

    /// Embedding of the empty prompt used for guidance.
    pub fn null_cond(&self) -> Vec<f64> {
        vec![0.0; self.num_prompts()]
    }

    pub fn target(&self, prompt: usize) -> [f64; 2] {
        self.modes[prompt]
    }

    pub fn sample_data(&self, prompt: usize, rng: &mut SeededRng) -> Vec<f64> {
        let k = self.num_prompts();
        let mode = if k == 1 || rng.uniform() < self.on_target {
            prompt
        } else {
            (prompt + 1 + rng.below(k - 1)) % k
        };
        let m = self.modes[mode];
        vec![
            m[0] + self.mode_std * rng.normal(),
            m[1] + self.mode_std * rng.normal(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `-||x0 - mu_c||^2`.
    Alignment,
    /// `-||x0||^2 / 10`.
    Regularity,
    /// `-sum ||x_{k+1} - x_k||^2` along the sampling path.
    Smoothness,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Alignment => "alignment",
            RewardKind::Regularity => "regularity",
            RewardKind::Smoothness => "smoothness",
        }
    }

    /// `states` runs from the initial noise to the final sample.
    pub fn score(self, task: &MixtureTask, prompt: usize, states: &[Vec<f64>]) -> f64 {
        let x0 = states.last().expect("trajectory has at least one state");
        match self {
            RewardKind::Alignment => {
                let m = task.target(prompt);
                -((x0[0] - m[0]).powi(2) + (x0[1] - m[1]).powi(2))
            }
            RewardKind::Regularity => -x0.iter().map(|v| v * v).sum::<f64>() / 10.0,
            RewardKind::Smoothness => -states
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).powi(2)).sum::<f64>())
                .sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kinds: Vec<RewardKind>,
    pub weights: Vec<f64>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kinds: vec![
                RewardKind::Alignment,
                RewardKind::Regularity,
                RewardKind::Smoothness,
            ],
            weights: vec![1.0; 3],
        }
    }
}

impl RewardSpec {
    /// All three rewards with the auxiliary ones down-weighted to 0.1.
    pub fn alignment_focused() -> Self {
        Self {
            weights: vec![1.0, 0.1, 0.1],
            ..Self::default()
        }
    }

    pub fn new(kinds: Vec<RewardKind>, weights: Vec<f64>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("at least one reward is required".into()));
        }
        if weights.len() != kinds.len() {
            return Err(Error::WeightCountMismatch {
                expected: kinds.len(),
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Config(format!("reward weight {w} is not finite")));
        }
        Ok(Self { kinds, weights })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn scores(&self, task: &MixtureTask, prompt: usize, states: &[Vec<f64>]) -> Vec<f64> {
        self.kinds
            .iter()
            .map(|k| k.score(task, prompt, states))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_on_circle() {
        let task = MixtureTask::default();
        assert_eq!(task.num_prompts(), 4);
        for m in &task.modes {
            assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 2.0).abs() < 1e-12);
        }
        assert_eq!(task.cond(2), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(task.null_cond().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn data_on_target_fraction() {
        let task = MixtureTask::default();
        let mut rng = SeededRng::new(3);
        let n = 20_000;
        let near = (0..n)
            .filter(|_| {
                let x = task.sample_data(1, &mut rng);
                let m = task.target(1);
                (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2) < 1.0
            })
            .count();
        let frac = near as f64 / n as f64;
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
    }

    #[test]
    fn reward_values() {
        let task = MixtureTask::default();
        let states = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(RewardKind::Alignment.score(&task, 0, &states), 0.0);
        assert!((RewardKind::Regularity.score(&task, 0, &states) + 0.4).abs() < 1e-15);
        assert_eq!(RewardKind::Smoothness.score(&task, 0, &states), -2.0);
        let a2 = RewardKind::Alignment.score(&task, 2, &states);
        assert!((a2 + 16.0).abs() < 1e-12);
    }

    #[test]
    fn reward_spec_validation() {
        assert!(RewardSpec::new(vec![], vec![]).is_err());
        assert_eq!(
            RewardSpec::new(vec![RewardKind::Alignment], vec![1.0, 2.0]),
            Err(Error::WeightCountMismatch {
                expected: 1,
                got: 2
            })
        );
        assert!(RewardSpec::new(vec![RewardKind::Alignment], vec![f64::NAN]).is_err());
    }
}
