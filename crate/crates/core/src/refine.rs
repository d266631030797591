//! Refinement-stage flow matching for coarse-to-fine generation.
//!
//! A low-resolution sample is upsampled, noised to `t_thresh` and then
//! integrated down to `t = 0` by a refinement expert. The path between the
//! noised upsample `x_thresh` and the high-resolution target `x0` is affine
//! in `t'`, with the constant velocity `(x0 - x_thresh) / t_thresh`.
//! Encoding and decoding are identity maps here.

use serde::{Deserialize, Serialize};

use crate::bsa::{
    dense_attention, inverse_rearrange, rearrange_to_blocks, sparse_attention_forward, topr_mask,
    BlockSizes, BlockSpec, GridSpec,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values on a `T x H x W` grid with `C` channels, channel-last raster order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSignal {
    extents: [usize; 3],
    channels: usize,
    values: Vec<f64>,
}

impl GridSignal {
    pub fn new(extents: [usize; 3], channels: usize, values: Vec<f64>) -> Result<Self> {
        if extents.contains(&0) || channels == 0 {
            return Err(Error::InvalidShape {
                shape: vec![extents[0], extents[1], extents[2], channels],
                reason: "grid extents and channels must be positive".into(),
            });
        }
        let n = extents.iter().product::<usize>() * channels;
        if values.len() != n {
            return Err(Error::InvalidShape {
                shape: vec![extents[0], extents[1], extents[2], channels],
                reason: format!("expected {n} values, got {}", values.len()),
            });
        }
        Ok(Self {
            extents,
            channels,
            values,
        })
    }

    pub fn constant(extents: [usize; 3], channels: usize, value: f64) -> Result<Self> {
        let n = extents.iter().product::<usize>() * channels;
        Self::new(extents, channels, vec![value; n])
    }

    pub fn from_fn(
        extents: [usize; 3],
        channels: usize,
        mut f: impl FnMut([usize; 3], usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(extents.iter().product::<usize>() * channels);
        for t in 0..extents[0] {
            for h in 0..extents[1] {
                for w in 0..extents[2] {
                    for c in 0..channels {
                        values.push(f([t, h, w], c));
                    }
                }
            }
        }
        Self::new(extents, channels, values)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cells(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn frame_len(&self) -> usize {
        self.extents[1] * self.extents[2] * self.channels
    }

    pub fn get(&self, at: [usize; 3], c: usize) -> f64 {
        let [_, h, w] = self.extents;
        self.values[((at[0] * h + at[1]) * w + at[2]) * self.channels + c]
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.extents != other.extents || self.channels != other.channels {
            return Err(Error::ExtentMismatch(format!(
                "{:?}x{} vs {:?}x{}",
                self.extents, self.channels, other.extents, other.channels
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_layout(other)?;
        Ok(Self {
            extents: self.extents,
            channels: self.channels,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// As a `[T, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [t, h, w] = self.extents;
        Tensor::new(vec![t, h, w, self.channels], self.values.clone())
            .expect("grid signal layout is a valid tensor")
    }

    pub fn from_tensor(x: &Tensor) -> Result<Self> {
        match x.shape() {
            &[t, h, w, c] => Self::new([t, h, w], c, x.data().to_vec()),
            s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "grid signals are [T, H, W, C]".into(),
            }),
        }
    }

    /// Frames `start..start + len` along time.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.extents[0] {
            return Err(Error::ExtentMismatch(format!(
                "frames {start}..{} of {}",
                start + len,
                self.extents[0]
            )));
        }
        let f = self.frame_len();
        Self::new(
            [len, self.extents[1], self.extents[2]],
            self.channels,
            self.values[start * f..(start + len) * f].to_vec(),
        )
    }

    /// Temporal concatenation.
    pub fn concat_time(&self, other: &Self) -> Result<Self> {
        if self.extents[1..] != other.extents[1..] || self.channels != other.channels {
            return Err(Error::ExtentMismatch(format!(
                "cannot stack {:?}x{} and {:?}x{} in time",
                self.extents, self.channels, other.extents, other.channels
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(
            [self.extents[0] + other.extents[0], self.extents[1], self.extents[2]],
            self.channels,
            values,
        )
    }
}

fn scaled_extent(extent: usize, factor: f64) -> Result<usize> {
    let target = extent as f64 * factor;
    let rounded = target.round();
    if !(factor > 0.0) || (target - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::NonIntegralTarget { extent, factor });
    }
    Ok(rounded as usize)
}

/// Corner-aligned source coordinate and weights for output index `i`.
fn corner_weights(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 2);
    (lo, lo + 1, pos - lo as f64)
}

/// Trilinear interpolation to `extent * factor` along `(T, H, W)`, with
/// first and last samples aligned to the input corners.
pub fn upsample_trilinear(sig: &GridSignal, factors: [f64; 3]) -> Result<GridSignal> {
    let src = sig.extents;
    let dst = [
        scaled_extent(src[0], factors[0])?,
        scaled_extent(src[1], factors[1])?,
        scaled_extent(src[2], factors[2])?,
    ];
    let axes: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| (0..dst[a]).map(|i| corner_weights(i, src[a], dst[a])).collect())
        .collect();
    GridSignal::from_fn(dst, sig.channels, |[t, h, w], c| {
        let (t0, t1, ft) = axes[0][t];
        let (h0, h1, fh) = axes[1][h];
        let (w0, w1, fw) = axes[2][w];
        let mut acc = 0.0;
        for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
            for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                    let k = wt * wh * ww;
                    if k != 0.0 {
                        acc += k * sig.get([ti, hi, wi], c);
                    }
                }
            }
        }
        acc
    })
}

/// Box average over integer factors along `(T, H, W)`.
pub fn downsample_box(sig: &GridSignal, factors: [usize; 3]) -> Result<GridSignal> {
    let src = sig.extents;
    for a in 0..3 {
        if factors[a] == 0 || src[a] % factors[a] != 0 {
            return Err(Error::NonIntegralTarget {
                extent: src[a],
                factor: 1.0 / factors[a] as f64,
            });
        }
    }
    let dst = [src[0] / factors[0], src[1] / factors[1], src[2] / factors[2]];
    let norm = 1.0 / (factors[0] * factors[1] * factors[2]) as f64;
    GridSignal::from_fn(dst, sig.channels, |[t, h, w], c| {
        let mut acc = 0.0;
        for dt in 0..factors[0] {
            for dh in 0..factors[1] {
                for dw in 0..factors[2] {
                    acc += sig.get(
                        [t * factors[0] + dt, h * factors[1] + dh, w * factors[2] + dw],
                        c,
                    );
                }
            }
        }
        acc * norm
    })
}

/// How condition frames enter the refinement sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionNoise {
    /// Noised with everything else; restored after sampling.
    #[default]
    Repin,
    /// Held clean at every step.
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub t_thresh: f64,
    pub steps: usize,
    pub spatial_scale: f64,
    pub temporal_scale: f64,
    pub condition: ConditionNoise,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            t_thresh: 0.5,
            steps: 5,
            spatial_scale: 1.5,
            temporal_scale: 2.0,
            condition: ConditionNoise::Repin,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_thresh > 0.0 && self.t_thresh <= 1.0) {
            return Err(Error::Config(format!(
                "t_thresh {} must lie in (0, 1]",
                self.t_thresh
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("refinement needs at least one step".into()));
        }
        Ok(())
    }

    pub fn factors(&self) -> [f64; 3] {
        [self.temporal_scale, self.spatial_scale, self.spatial_scale]
    }
}

/// `(1 - t) x_up + t eps`.
pub fn add_noise(x_up: &GridSignal, eps: &GridSignal, t: f64) -> Result<GridSignal> {
    x_up.zip_with(eps, |u, e| (1.0 - t) * u + t * e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPath {
    pub x0: GridSignal,
    pub x_up: GridSignal,
    pub eps: GridSignal,
    pub x_thresh: GridSignal,
    pub t_thresh: f64,
}

impl RefinementPath {
    /// Upsamples `x_lr` by the configured factors and noises it to `t_thresh`.
    pub fn new(
        x0: &GridSignal,
        x_lr: &GridSignal,
        eps: &GridSignal,
        cfg: &RefinementConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let x_up = upsample_trilinear(x_lr, cfg.factors())?;
        x0.same_layout(&x_up)?;
        let x_thresh = add_noise(&x_up, eps, cfg.t_thresh)?;
        Ok(Self {
            x0: x0.clone(),
            x_up,
            eps: eps.clone(),
            x_thresh,
            t_thresh: cfg.t_thresh,
        })
    }

    /// `x0 + (x_thresh - x0) t' / t_thresh`, evaluated as a convex blend so
    /// both endpoints are exact.
    pub fn input_at(&self, t: f64) -> Result<GridSignal> {
        if !(0.0..=self.t_thresh).contains(&t) {
            return Err(Error::TimeAboveThreshold {
                t,
                t_thresh: self.t_thresh,
            });
        }
        let s = t / self.t_thresh;
        self.x0.zip_with(&self.x_thresh, |a, b| (1.0 - s) * a + s * b)
    }

    pub fn target(&self) -> Result<GridSignal> {
        refinement_target(&self.x0, &self.x_thresh, self.t_thresh)
    }
}

/// Network input at refinement time `t'`.
pub fn make_refinement_input(
    x0: &GridSignal,
    x_lr: &GridSignal,
    eps: &GridSignal,
    t: f64,
    cfg: &RefinementConfig,
) -> Result<GridSignal> {
    RefinementPath::new(x0, x_lr, eps, cfg)?.input_at(t)
}

/// `(x0 - x_thresh) / t_thresh`.
pub fn refinement_target(x0: &GridSignal, x_thresh: &GridSignal, t_thresh: f64) -> Result<GridSignal> {
    if !(t_thresh > 0.0) {
        return Err(Error::Config(format!("t_thresh {t_thresh} must be positive")));
    }
    x0.zip_with(x_thresh, |a, b| (a - b) / t_thresh)
}

/// Euler integration from `t_thresh` to 0 in `steps` uniform steps. Returns
/// every state, starting with `x_thresh`.
pub fn refine_trajectory(
    mut expert: impl FnMut(&GridSignal, f64) -> Result<GridSignal>,
    x_thresh: &GridSignal,
    t_thresh: f64,
    steps: usize,
) -> Result<Vec<GridSignal>> {
    if steps == 0 {
        return Err(Error::Config("refinement needs at least one step".into()));
    }
    let dt = t_thresh / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x_thresh.clone());
    for k in 0..steps {
        let t = t_thresh * (1.0 - k as f64 / steps as f64);
        let x = &states[k];
        let v = expert(x, t)?;
        states.push(x.zip_with(&v, |a, b| a + b * dt)?);
    }
    Ok(states)
}

pub fn refine_sample(
    expert: impl FnMut(&GridSignal, f64) -> Result<GridSignal>,
    x_thresh: &GridSignal,
    cfg: &RefinementConfig,
) -> Result<GridSignal> {
    cfg.validate()?;
    let mut states = refine_trajectory(expert, x_thresh, cfg.t_thresh, cfg.steps)?;
    Ok(states.pop().expect("at least one state"))
}

/// Refines `[cond_hr, upsample(x_lr)]`. `eps` covers the concatenated
/// extents. Condition frames in the output equal `cond_hr` exactly.
pub fn conditioned_refine(
    cond_hr: Option<&GridSignal>,
    x_lr: &GridSignal,
    eps: &GridSignal,
    cfg: &RefinementConfig,
    mut expert: impl FnMut(&GridSignal, f64) -> Result<GridSignal>,
) -> Result<GridSignal> {
    cfg.validate()?;
    let generated = upsample_trilinear(x_lr, cfg.factors())?;
    let x_up = match cond_hr {
        Some(c) => c.concat_time(&generated)?,
        None => generated,
    };
    x_up.same_layout(eps)?;
    let mut x_thresh = add_noise(&x_up, eps, cfg.t_thresh)?;
    let n_cond = cond_hr.map_or(0, |c| c.values.len());
    let pin = |x: &mut GridSignal| {
        if let Some(c) = cond_hr {
            x.values[..n_cond].copy_from_slice(&c.values);
        }
    };
    let clean = cfg.condition == ConditionNoise::Clean;
    if clean {
        pin(&mut x_thresh);
    }
    let mut states = refine_trajectory(
        |x, t| {
            if clean {
                let mut held = x.clone();
                pin(&mut held);
                expert(&held, t)
            } else {
                expert(x, t)
            }
        },
        &x_thresh,
        cfg.t_thresh,
        cfg.steps,
    )?;
    let mut out = states.pop().expect("at least one state");
    pin(&mut out);
    Ok(out)
}

/// Toy expert driven by self-attention over grid cells: the velocity is
/// `strength * (attn(x) - x)` with queries, keys and values all equal to the
/// channel vectors. With `top_r` set, attention runs block-sparse on 3D
/// blocks of `blocks`; otherwise dense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionExpert {
    pub blocks: BlockSpec,
    pub top_r: Option<usize>,
    pub strength: f64,
}

impl AttentionExpert {
    pub fn velocity(&self, x: &GridSignal, _t: f64) -> Result<GridSignal> {
        let [t, h, w] = x.extents;
        let c = x.channels;
        let tokens = Tensor::new(vec![1, 1, t * h * w, c], x.values.clone())?;
        let attended = match self.top_r {
            None => dense_attention(&tokens, &tokens, &tokens)?,
            Some(r) => {
                let grid = GridSpec {
                    t,
                    h,
                    w,
                    head_dim: c,
                    heads: 1,
                    batch: 1,
                };
                let (blocked, layout) = rearrange_to_blocks(&tokens, &grid, &self.blocks)?;
                let sizes = BlockSizes::uniform(self.blocks.volume());
                let mask = topr_mask(&blocked, &blocked, sizes, r)?;
                let (out, _) = sparse_attention_forward(&blocked, &blocked, &blocked, &mask, sizes)?;
                inverse_rearrange(&out, &layout)?
            }
        };
        let a = GridSignal::new(x.extents, c, attended.into_data())?;
        a.zip_with(x, |y, x| self.strength * (y - x))
    }
}
