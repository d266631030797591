//! A two-hidden-layer tanh MLP predicting the flow-matching velocity
//! `v(x, t, c)`, with exact reverse-mode parameter gradients.
//!
//! Input features are `[x (D), t (1), c (C)]`. All parameters live in one
//! flat vector so optimizers and finite-difference checks can treat the net
//! as a point in `R^P`. Layout: `w1 (h1 x in)`, `b1`, `w2 (h2 x h1)`, `b2`,
//! `w3 (D x h2)`, `b3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    dim: usize,
    cond_dim: usize,
    hidden: [usize; 2],
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl VelocityNet {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases.
    pub fn new(dim: usize, cond_dim: usize, hidden: [usize; 2], rng: &mut SeededRng) -> Self {
        let mut net = Self::zeros(dim, cond_dim, hidden);
        let fan_ins = [dim + 1 + cond_dim, hidden[0], hidden[1]];
        let mut offset = 0;
        for (layer, &fan_in) in net.layer_sizes().iter().zip(fan_ins.iter()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + layer] {
                *p = rng.uniform_range(-bound, bound);
            }
            offset += layer;
        }
        net
    }

    pub fn zeros(dim: usize, cond_dim: usize, hidden: [usize; 2]) -> Self {
        assert!(dim > 0 && hidden[0] > 0 && hidden[1] > 0);
        let n = Self::param_count(dim, cond_dim, hidden);
        Self {
            dim,
            cond_dim,
            hidden,
            params: vec![0.0; n],
        }
    }

    pub fn param_count(dim: usize, cond_dim: usize, hidden: [usize; 2]) -> usize {
        let input = dim + 1 + cond_dim;
        hidden[0] * (input + 1) + hidden[1] * (hidden[0] + 1) + dim * (hidden[1] + 1)
    }

    // Parameter counts per layer (weights and biases together).
    fn layer_sizes(&self) -> [usize; 3] {
        let input = self.input_dim();
        [
            self.hidden[0] * (input + 1),
            self.hidden[1] * (self.hidden[0] + 1),
            self.dim * (self.hidden[1] + 1),
        ]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 1 + self.cond_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "net has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    fn check_inputs(&self, x: &[f64], c: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "state has {} dims, net expects {}",
                x.len(),
                self.dim
            )));
        }
        if c.len() != self.cond_dim {
            return Err(Error::DimensionMismatch(format!(
                "condition has {} dims, net expects {}",
                c.len(),
                self.cond_dim
            )));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], t: f64, c: &[f64], out: &mut [f64]) -> Trace {
        let [h1, h2] = self.hidden;
        let n_in = self.input_dim();
        let mut input = Vec::with_capacity(n_in);
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(c);

        let (w1, rest) = self.params.split_at(h1 * n_in);
        let (b1, rest) = rest.split_at(h1);
        let (w2, rest) = rest.split_at(h2 * h1);
        let (b2, rest) = rest.split_at(h2);
        let (w3, b3) = rest.split_at(self.dim * h2);

        let a1: Vec<f64> = (0..h1)
            .map(|j| (crate::tensor::dot(&w1[j * n_in..(j + 1) * n_in], &input) + b1[j]).tanh())
            .collect();
        let a2: Vec<f64> = (0..h2)
            .map(|j| (crate::tensor::dot(&w2[j * h1..(j + 1) * h1], &a1) + b2[j]).tanh())
            .collect();
        for (k, o) in out.iter_mut().enumerate() {
            *o = crate::tensor::dot(&w3[k * h2..(k + 1) * h2], &a2) + b3[k];
        }
        Trace { input, a1, a2 }
    }

    pub fn forward(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, c)?;
        let mut out = vec![0.0; self.dim];
        self.run(x, t, c, &mut out);
        Ok(out)
    }

    /// Gradient of `upstream . v(x, t, c)` with respect to all parameters.
    pub fn backward(&self, x: &[f64], t: f64, c: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_accumulate(x, t, c, upstream, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * d(upstream . v)/d(params)` into `grad`.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        t: f64,
        c: &[f64],
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_inputs(x, c)?;
        if upstream.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "upstream has {} dims, net output has {}",
                upstream.len(),
                self.dim
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient buffer has {} entries, net has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        if scale == 0.0 || upstream.iter().all(|&u| u == 0.0) {
            return Ok(());
        }
        let [h1, h2] = self.hidden;
        let n_in = self.input_dim();
        let mut out = vec![0.0; self.dim];
        let Trace { input, a1, a2 } = self.run(x, t, c, &mut out);

        let w2_start = h1 * n_in + h1;
        let w3_start = w2_start + h2 * h1 + h2;
        let w2 = &self.params[w2_start..w2_start + h2 * h1];
        let w3 = &self.params[w3_start..w3_start + self.dim * h2];

        let (g_w1, rest) = grad.split_at_mut(h1 * n_in);
        let (g_b1, rest) = rest.split_at_mut(h1);
        let (g_w2, rest) = rest.split_at_mut(h2 * h1);
        let (g_b2, rest) = rest.split_at_mut(h2);
        let (g_w3, g_b3) = rest.split_at_mut(self.dim * h2);

        let up: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        let mut d_a2 = vec![0.0; h2];
        for k in 0..self.dim {
            g_b3[k] += up[k];
            for j in 0..h2 {
                g_w3[k * h2 + j] += up[k] * a2[j];
                d_a2[j] += up[k] * w3[k * h2 + j];
            }
        }
        let d_z2: Vec<f64> = d_a2.iter().zip(&a2).map(|(d, a)| d * (1.0 - a * a)).collect();
        let mut d_a1 = vec![0.0; h1];
        for j in 0..h2 {
            g_b2[j] += d_z2[j];
            for i in 0..h1 {
                g_w2[j * h1 + i] += d_z2[j] * a1[i];
                d_a1[i] += d_z2[j] * w2[j * h1 + i];
            }
        }
        for i in 0..h1 {
            let d_z1 = d_a1[i] * (1.0 - a1[i] * a1[i]);
            g_b1[i] += d_z1;
            for (g, &inp) in g_w1[i * n_in..(i + 1) * n_in].iter_mut().zip(&input) {
                *g += d_z1 * inp;
            }
        }
        Ok(())
    }
}

pub fn velocity_forward(net: &VelocityNet, x: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(net.forward(x.data(), t, c)?)
}

pub fn velocity_backward(
    net: &VelocityNet,
    x: &Tensor,
    t: f64,
    c: &[f64],
    upstream: &Tensor,
) -> Result<Tensor> {
    Tensor::from_vec(net.backward(x.data(), t, c, upstream.data())?)
}
