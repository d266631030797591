//! Python bindings for `blockflow`.
//!
//! Tensors cross the boundary as [`PyTensor`] (flat row-major data plus a
//! shape). Attention entry points take and return tensors in raster token
//! order and handle the block rearrangement internally.

use blockflow::bsa::{
    cdf_mask, dense_attention, flop_estimate, inverse_rearrange, rearrange_to_blocks,
    sparse_attention_forward, topr_mask, BlockSizes, BlockSpec, GridSpec, SelectionMask,
};
use blockflow::flow::grpo::group_advantages;
use blockflow::flow::sampler::kl_closed_form;
use blockflow::flow::schedule::{clipped_diffusion, lambda_kl, lambda_policy, NoiseSchedule};
use blockflow::flow::toy::{MixtureTask, RewardSpec};
use blockflow::flow::train::{pretrain_flow_matching, train_grpo, GrpoConfig, PretrainConfig, Variant};
use blockflow::refine::{refinement_target, upsample_trilinear, GridSignal};
use blockflow::ring::{ring_topr_attention, Schedule};
use blockflow::{SeededRng, Tensor, VelocityNet};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: blockflow::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "blockflow_py")]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Tensor::new(shape, data).map(|inner| Self { inner }).map_err(err)
    }

    /// Standard normal entries from a seeded stream.
    #[staticmethod]
    fn randn(shape: Vec<usize>, seed: u64) -> PyResult<Self> {
        blockflow::rng::gaussian_sample(&mut SeededRng::new(seed), &shape)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Tensor::load(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyTensor>) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn grid_of(q: &Tensor, extents: (usize, usize, usize)) -> PyResult<GridSpec> {
    if q.rank() != 4 {
        return Err(PyValueError::new_err("expected a (batch, heads, tokens, dim) tensor"));
    }
    let s = q.shape();
    Ok(GridSpec {
        t: extents.0,
        h: extents.1,
        w: extents.2,
        head_dim: s[3],
        heads: s[1],
        batch: s[0],
    })
}

/// Dense softmax attention over `(batch, heads, tokens, dim)` tensors.
#[pyfunction]
#[pyo3(name = "dense_attention")]
fn py_dense_attention(
    q: PyRef<'_, PyTensor>,
    k: PyRef<'_, PyTensor>,
    v: PyRef<'_, PyTensor>,
) -> PyResult<PyTensor> {
    dense_attention(&q.inner, &k.inner, &v.inner)
        .map(|inner| PyTensor { inner })
        .map_err(err)
}

/// Block-sparse attention on a `T x H x W` token grid. Pass exactly one of
/// `r` (top-r key blocks) or `p` (smallest prefix with softmax mass `p`).
/// Returns the output and the selected fraction of block pairs.
#[pyfunction]
#[pyo3(signature = (q, k, v, grid, block, r=None, p=None))]
fn block_sparse_attention(
    q: PyRef<'_, PyTensor>,
    k: PyRef<'_, PyTensor>,
    v: PyRef<'_, PyTensor>,
    grid: (usize, usize, usize),
    block: (usize, usize, usize),
    r: Option<usize>,
    p: Option<f64>,
) -> PyResult<(PyTensor, f64)> {
    let g = grid_of(&q.inner, grid)?;
    let blocks = BlockSpec::new(block.0, block.1, block.2);
    let (qb, layout) = rearrange_to_blocks(&q.inner, &g, &blocks).map_err(err)?;
    let kb = layout.apply(&k.inner).map_err(err)?;
    let vb = layout.apply(&v.inner).map_err(err)?;
    let sizes = BlockSizes::uniform(blocks.volume());
    let mask: SelectionMask = match (r, p) {
        (Some(r), None) => topr_mask(&qb, &kb, sizes, r),
        (None, Some(p)) => cdf_mask(&qb, &kb, sizes, p),
        _ => return Err(PyValueError::new_err("pass exactly one of r or p")),
    }
    .map_err(err)?;
    let (out, _) = sparse_attention_forward(&qb, &kb, &vb, &mask, sizes).map_err(err)?;
    let out = inverse_rearrange(&out, &layout).map_err(err)?;
    let fraction = flop_estimate(&mask, sizes, g.head_dim).selected_fraction;
    Ok((PyTensor { inner: out }, fraction))
}

/// Top-r block-sparse attention split over `workers` simulated ring workers.
/// Returns the output and the total messages sent in each ring phase.
#[pyfunction]
#[pyo3(signature = (q, k, v, grid, block, r, workers, schedule="sequential"))]
#[allow(clippy::too_many_arguments)]
fn ring_attention(
    q: PyRef<'_, PyTensor>,
    k: PyRef<'_, PyTensor>,
    v: PyRef<'_, PyTensor>,
    grid: (usize, usize, usize),
    block: (usize, usize, usize),
    r: usize,
    workers: usize,
    schedule: &str,
) -> PyResult<(PyTensor, (usize, usize))> {
    let schedule = match schedule {
        "sequential" => Schedule::Sequential,
        "concurrent" => Schedule::Concurrent,
        other => return Err(PyValueError::new_err(format!("unknown schedule {other:?}"))),
    };
    let g = grid_of(&q.inner, grid)?;
    let blocks = BlockSpec::new(block.0, block.1, block.2);
    let (qb, layout) = rearrange_to_blocks(&q.inner, &g, &blocks).map_err(err)?;
    let kb = layout.apply(&k.inner).map_err(err)?;
    let vb = layout.apply(&v.inner).map_err(err)?;
    let sizes = BlockSizes::uniform(blocks.volume());
    let run = ring_topr_attention(&qb, &kb, &vb, sizes, r, workers, schedule).map_err(err)?;
    let out = inverse_rearrange(&run.output().map_err(err)?, &layout).map_err(err)?;
    Ok((PyTensor { inner: out }, run.messages_sent()))
}

/// `(coefficient, sigma, clipped)` of the clipped diffusion term.
#[pyfunction]
#[pyo3(name = "clipped_diffusion", signature = (t, dt, a=1.0, tau=0.45))]
fn py_clipped_diffusion(t: f64, dt: f64, a: f64, tau: f64) -> PyResult<(f64, f64, bool)> {
    let s = NoiseSchedule::new(a, tau).map_err(err)?;
    let c = clipped_diffusion(t, dt, &s).map_err(err)?;
    Ok((c.coefficient, c.sigma, c.clipped))
}

/// `(policy weight, KL weight)` for a step at `t` of size `dt`.
#[pyfunction]
fn reweighting(t: f64, dt: f64) -> PyResult<(f64, f64)> {
    Ok((
        lambda_policy(t, dt).map_err(err)?,
        lambda_kl(t, dt).map_err(err)?,
    ))
}

#[pyfunction]
#[pyo3(name = "kl_closed_form")]
fn py_kl_closed_form(v: Vec<f64>, v_ref: Vec<f64>, t: f64, dt: f64, sigma: f64) -> PyResult<f64> {
    if v.len() != v_ref.len() {
        return Err(PyValueError::new_err("velocity lengths differ"));
    }
    Ok(kl_closed_form(&v, &v_ref, t, dt, sigma))
}

/// Group-relative advantages; `rewards[k][i]` is reward `k` of sample `i`.
#[pyfunction]
#[pyo3(name = "group_advantages")]
fn py_group_advantages(rewards: Vec<Vec<f64>>, sigma: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    group_advantages(&rewards, &sigma).map_err(err)
}

#[pyclass(name = "VelocityNet", module = "blockflow_py")]
pub struct PyVelocityNet {
    inner: VelocityNet,
}

#[pymethods]
impl PyVelocityNet {
    fn velocity(&self, x: Vec<f64>, t: f64, cond: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x, t, &cond).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }
}

/// Flow-matching pretraining on the 2-D mixture task.
#[pyfunction]
#[pyo3(signature = (seed=0, iterations=2000, hidden=(32, 32)))]
fn pretrain(seed: u64, iterations: usize, hidden: (usize, usize)) -> PyResult<(PyVelocityNet, Vec<f64>)> {
    let cfg = PretrainConfig {
        iterations,
        hidden: [hidden.0, hidden.1],
        seed,
        ..PretrainConfig::default()
    };
    let (inner, losses) = pretrain_flow_matching(&MixtureTask::default(), &cfg).map_err(err)?;
    Ok((PyVelocityNet { inner }, losses))
}

/// GRPO from `base` on the mixture task. Returns the evaluation curve as
/// `(iteration, reward means, reward stds, kl)` rows and the trained net.
#[pyfunction]
#[pyo3(signature = (base, iterations=300, seed=0, variant="full", eval_every=25, prompts_per_update=64))]
#[allow(clippy::type_complexity)]
fn grpo_train(
    base: PyRef<'_, PyVelocityNet>,
    iterations: usize,
    seed: u64,
    variant: &str,
    eval_every: usize,
    prompts_per_update: usize,
) -> PyResult<(Vec<(usize, Vec<f64>, Vec<f64>, f64)>, PyVelocityNet)> {
    let config = GrpoConfig {
        iterations,
        seed,
        variant: Variant::parse(variant).map_err(err)?,
        eval_every,
        prompts_per_update,
        rewards: RewardSpec::alignment_focused(),
        ..GrpoConfig::default()
    };
    let run = train_grpo(&MixtureTask::default(), &base.inner, &config).map_err(err)?;
    let curve = run
        .curve
        .into_iter()
        .map(|r| (r.iteration, r.reward_mean, r.reward_std, r.kl_mean))
        .collect();
    Ok((curve, PyVelocityNet { inner: run.net }))
}

/// Corner-aligned trilinear upsampling of a channel-last grid signal.
#[pyfunction]
#[pyo3(name = "upsample_trilinear")]
fn py_upsample_trilinear(
    values: Vec<f64>,
    extents: (usize, usize, usize),
    channels: usize,
    factors: (f64, f64, f64),
) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
    let sig = GridSignal::new([extents.0, extents.1, extents.2], channels, values).map_err(err)?;
    let up = upsample_trilinear(&sig, [factors.0, factors.1, factors.2]).map_err(err)?;
    let e = up.extents();
    Ok((up.values().to_vec(), (e[0], e[1], e[2])))
}

/// Refinement velocity target `(x0 - x_thresh) / t_thresh`.
#[pyfunction]
#[pyo3(name = "refinement_target")]
fn py_refinement_target(x0: Vec<f64>, x_thresh: Vec<f64>, t_thresh: f64) -> PyResult<Vec<f64>> {
    let n = x0.len();
    let a = GridSignal::new([1, 1, n], 1, x0).map_err(err)?;
    let b = GridSignal::new([1, 1, n], 1, x_thresh).map_err(err)?;
    Ok(refinement_target(&a, &b, t_thresh).map_err(err)?.values().to_vec())
}

#[pymodule]
pub fn blockflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVelocityNet>()?;
    m.add_function(wrap_pyfunction!(py_dense_attention, m)?)?;
    m.add_function(wrap_pyfunction!(block_sparse_attention, m)?)?;
    m.add_function(wrap_pyfunction!(ring_attention, m)?)?;
    m.add_function(wrap_pyfunction!(py_clipped_diffusion, m)?)?;
    m.add_function(wrap_pyfunction!(reweighting, m)?)?;
    m.add_function(wrap_pyfunction!(py_kl_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(py_group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_train, m)?)?;
    m.add_function(wrap_pyfunction!(py_upsample_trilinear, m)?)?;
    m.add_function(wrap_pyfunction!(py_refinement_target, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
