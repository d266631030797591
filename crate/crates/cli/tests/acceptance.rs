//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts it. Run with
//! `cargo test -p blockflow-cli --test acceptance -- --nocapture --test-threads=1`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use blockflow::bsa::{
    block_causal_attention, build_kv_cache, cdf_mask, dense_attention, dense_attention_masked,
    flop_estimate, inverse_rearrange, noisy_attention_cached, rearrange_to_blocks,
    sparse_attention_backward, sparse_attention_forward, topr_mask, BlockSizes, BlockSpec,
    GridSpec, ProjectionWeights, UnifiedSequence,
};
use blockflow::flow::grpo::{
    batch_advantages, group_advantages, grpo_loss, policy_gradient, rollout_group, AdvantageNorm,
    ObjectiveConfig, SamplerConfig,
};
use blockflow::flow::sampler::{kl_term, step_distribution, Conditioned};
use blockflow::flow::schedule::{clipped_diffusion, NoiseSchedule};
use blockflow::flow::toy::{MixtureTask, RewardSpec};
use blockflow::gradcheck::{finite_difference_gradient, relative_error};
use blockflow::refine::{
    refine_trajectory, upsample_trilinear, GridSignal, RefinementConfig, RefinementPath,
};
use blockflow::ring::{ring_topr_attention, Schedule};
use blockflow::rng::gaussian_sample;
use blockflow::{SeededRng, Tensor, VelocityNet};
use blockflow_cli::commands::grpo::{self as grpo_cmd, GrpoSettings, RunSummary};

fn verdict(criterion: u32, name: &str, passed: bool, detail: String) {
    println!(
        "{} criterion {criterion:>2} {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} ({name}) failed: {detail}");
}

struct Blocked {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    qb: Tensor,
    kb: Tensor,
    vb: Tensor,
    layout: blockflow::bsa::BlockLayout,
    sizes: BlockSizes,
    nk: usize,
}

fn blocked(grid: GridSpec, blocks: BlockSpec, rng: &mut SeededRng) -> Blocked {
    let shape = [grid.batch, grid.heads, grid.tokens(), grid.head_dim];
    let q = gaussian_sample(rng, &shape).unwrap();
    let k = gaussian_sample(rng, &shape).unwrap();
    let v = gaussian_sample(rng, &shape).unwrap();
    let (qb, layout) = rearrange_to_blocks(&q, &grid, &blocks).unwrap();
    let kb = layout.apply(&k).unwrap();
    let vb = layout.apply(&v).unwrap();
    Blocked {
        q,
        k,
        v,
        qb,
        kb,
        vb,
        layout,
        sizes: BlockSizes::uniform(blocks.volume()),
        nk: blocks.num_blocks(&grid).unwrap(),
    }
}

fn grid(t: usize, h: usize, w: usize, head_dim: usize, heads: usize) -> GridSpec {
    GridSpec {
        t,
        h,
        w,
        head_dim,
        heads,
        batch: 1,
    }
}

#[test]
fn c01_dense_equivalence() {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for (t, h, w) in [(2, 4, 4), (4, 8, 8), (4, 16, 16), (8, 16, 16)] {
        let g = grid(t, h, w, 8, 1);
        let b = blocked(g, BlockSpec::new(2, 4, 4), &mut rng);
        let full = topr_mask(&b.qb, &b.kb, b.sizes, b.nk).unwrap();
        let (out, _) = sparse_attention_forward(&b.qb, &b.kb, &b.vb, &full, b.sizes).unwrap();
        let out = inverse_rearrange(&out, &b.layout).unwrap();
        let dense = dense_attention(&b.q, &b.k, &b.v).unwrap();
        worst = worst.max(out.max_abs_diff(&dense).unwrap());
        largest = largest.max(g.tokens());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "dense_equivalence",
        worst <= 1e-10 && secs < 5.0 && largest == 2048,
        format!("max |diff| {worst:e} (<= 1e-10), {largest} tokens, {secs:.2} s (< 5 s)"),
    );
}

#[test]
fn c02_mask_oracle_equivalence() {
    let mut rng = SeededRng::new(202);
    let g = grid(4, 8, 8, 8, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        for cdf in [false, true] {
            let b = blocked(g, BlockSpec::new(2, 2, 2), &mut rng);
            let mask = if cdf {
                cdf_mask(&b.qb, &b.kb, b.sizes, rng.uniform_range(0.3, 1.0)).unwrap()
            } else {
                topr_mask(&b.qb, &b.kb, b.sizes, 1 + rng.below(b.nk)).unwrap()
            };
            let (out, _) = sparse_attention_forward(&b.qb, &b.kb, &b.vb, &mask, b.sizes).unwrap();
            let expanded = mask.expand(b.sizes.query, b.sizes.key);
            let oracle = dense_attention_masked(&b.qb, &b.kb, &b.vb, Some(&expanded)).unwrap();
            worst = worst.max(out.max_abs_diff(&oracle).unwrap());
        }
    }
    verdict(
        2,
        "mask_oracle_equivalence",
        worst <= 1e-10,
        format!("20 top-r + 20 cdf-p cases, max |diff| {worst:e} (<= 1e-10)"),
    );
}

#[test]
fn c03_sparse_backward() {
    let mut rng = SeededRng::new(303);
    let g = grid(4, 4, 4, 4, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let b = blocked(g, BlockSpec::new(2, 2, 2), &mut rng);
        let d_out = gaussian_sample(&mut rng, b.qb.shape()).unwrap();
        let mask = topr_mask(&b.qb, &b.kb, b.sizes, 1 + rng.below(b.nk)).unwrap();
        let (out, stats) = sparse_attention_forward(&b.qb, &b.kb, &b.vb, &mask, b.sizes).unwrap();
        let (dq, dk, dv) = sparse_attention_backward(
            &b.qb, &b.kb, &b.vb, &mask, b.sizes, &out, &stats, &d_out,
        )
        .unwrap();
        let n = b.qb.numel();
        let shape = b.qb.shape().to_vec();
        let mut flat = b.qb.data().to_vec();
        flat.extend_from_slice(b.kb.data());
        flat.extend_from_slice(b.vb.data());
        let fd = finite_difference_gradient(
            |p| {
                let t = |s: &[f64]| Tensor::new(shape.clone(), s.to_vec()).unwrap();
                let (o, _) = sparse_attention_forward(
                    &t(&p[..n]),
                    &t(&p[n..2 * n]),
                    &t(&p[2 * n..]),
                    &mask,
                    b.sizes,
                )
                .unwrap();
                o.dot(&d_out).unwrap()
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let mut analytic = dq.into_data();
        analytic.extend(dk.into_data());
        analytic.extend(dv.into_data());
        worst = worst.max(relative_error(&analytic, &fd));
    }
    verdict(
        3,
        "sparse_backward",
        worst <= 1e-6,
        format!("64 tokens, 10 cases, max rel. error {worst:e} (<= 1e-6)"),
    );
}

#[test]
fn c04_flop_fraction() {
    let mut rng = SeededRng::new(404);
    let b = blocked(grid(8, 16, 16, 8, 1), BlockSpec::new(2, 4, 4), &mut rng);
    let r = b.nk / 16;
    let mask = topr_mask(&b.qb, &b.kb, b.sizes, r).unwrap();
    let est = flop_estimate(&mask, b.sizes, 8);
    verdict(
        4,
        "flop_fraction",
        est.selected_fraction == 0.0625 && est.selected_fraction < 0.10,
        format!(
            "N_k = {}, r = {r}, selected fraction {} (== 0.0625, < 0.10)",
            b.nk, est.selected_fraction
        ),
    );
}

#[test]
fn c05_ring_equivalence() {
    let mut rng = SeededRng::new(505);
    let b = blocked(grid(8, 8, 8, 8, 2), BlockSpec::new(2, 4, 4), &mut rng);
    let r = 4;
    let reference = ring_topr_attention(&b.qb, &b.kb, &b.vb, b.sizes, r, 1, Schedule::Sequential).unwrap();
    let ref_out = reference.output().unwrap();
    let ref_mask = reference.mask().unwrap();
    let mut worst: f64 = 0.0;
    let mut masks_exact = true;
    for n in [1, 2, 4] {
        for schedule in [Schedule::Sequential, Schedule::Concurrent] {
            let run = ring_topr_attention(&b.qb, &b.kb, &b.vb, b.sizes, r, n, schedule).unwrap();
            worst = worst.max(run.output().unwrap().max_abs_diff(&ref_out).unwrap());
            masks_exact &= run.mask().unwrap() == ref_mask;
        }
    }
    verdict(
        5,
        "ring_equivalence",
        worst <= 1e-10 && masks_exact,
        format!("N_cp in {{1,2,4}}, sequential + concurrent, max |diff| {worst:e} (<= 1e-10), masks exact: {masks_exact}"),
    );
}

#[test]
fn c06_kv_cache_equivalence() {
    let mut rng = SeededRng::new(606);
    let weights = ProjectionWeights::random(8, 2, 4, &mut rng);
    let cond = gaussian_sample(&mut rng, &[1, 6, 8]).unwrap();
    let base = UnifiedSequence::new(Some(cond.clone()), gaussian_sample(&mut rng, &[1, 10, 8]).unwrap(), 0.7).unwrap();
    let cache = build_kv_cache(&base, &weights).unwrap();
    let cond_ref = block_causal_attention(&base, &weights).unwrap().cond.unwrap();
    let mut worst: f64 = 0.0;
    let mut cond_invariant = true;
    for i in 0..5 {
        let noisy = gaussian_sample(&mut rng, &[1, 10, 8]).unwrap();
        let t = 0.1 + 0.2 * i as f64;
        let seq = UnifiedSequence::new(Some(cond.clone()), noisy.clone(), t).unwrap();
        let recomputed = block_causal_attention(&seq, &weights).unwrap();
        let cached = noisy_attention_cached(&noisy, t, &weights, &cache).unwrap();
        worst = worst.max(cached.max_abs_diff(&recomputed.noisy).unwrap());
        cond_invariant &= recomputed.cond.as_ref() == Some(&cond_ref);
    }
    verdict(
        6,
        "kv_cache_equivalence",
        worst <= 1e-12 && cond_invariant,
        format!("5 noisy variations, max |diff| {worst:e} (<= 1e-12), condition bitwise invariant: {cond_invariant}"),
    );
}

fn small_net(seed: u64) -> VelocityNet {
    VelocityNet::new(2, 4, [6, 5], &mut SeededRng::new(seed))
}

#[test]
fn c07_policy_gradient_identity() {
    let net = small_net(707);
    let task = MixtureTask::default();
    let cond = task.cond(2);
    let policy = Conditioned::plain(&net, &cond);
    let schedule = NoiseSchedule::new(1.0, f64::INFINITY).unwrap();
    let x = [0.3, -0.8];
    let eps = [-0.6, 1.2];
    let adv = 0.9;
    let dt = 0.05;
    let mut worst: f64 = 0.0;
    for t in [0.1, 0.5, 0.9] {
        let auto = policy_gradient(&policy, &x, t, dt, &eps, adv, &schedule, false).unwrap();
        // In the data-direction convention v = -u the closed form carries a
        // plus sign.
        let k = 1.5 * adv * (dt * (1.0 - t) / t).sqrt();
        let upstream: Vec<f64> = eps.iter().map(|e| k * e).collect();
        let oracle = net.backward(&x, t, &cond, &upstream).unwrap();
        worst = worst.max(relative_error(&auto, &oracle));
    }
    verdict(
        7,
        "policy_gradient_identity",
        worst <= 1e-8,
        format!("t in {{0.1, 0.5, 0.9}}, a = 1, max rel. error {worst:e} (<= 1e-8)"),
    );
}

#[test]
fn c08_reweighting_invariance() {
    // Zero the time input weights so v does not depend on t. Their own
    // gradient still scales with t, so they are left out of the comparison.
    let mut net = small_net(808);
    let n_in = net.input_dim();
    let t_col: Vec<usize> = (0..net.hidden()[0]).map(|j| j * n_in + net.dim()).collect();
    for &i in &t_col {
        net.params_mut()[i] = 0.0;
    }
    let keep = |g: Vec<f64>| -> Vec<f64> {
        g.into_iter()
            .enumerate()
            .filter(|(i, _)| !t_col.contains(i))
            .map(|(_, x)| x)
            .collect()
    };
    let cond = MixtureTask::default().cond(0);
    let policy = Conditioned::plain(&net, &cond);
    let schedule = NoiseSchedule::new(1.0, f64::INFINITY).unwrap();
    let x = [1.1, 0.2];
    let eps = [0.4, -0.9];
    let grads: Vec<Vec<f64>> = [0.1, 0.5, 0.9]
        .iter()
        .map(|&t| keep(policy_gradient(&policy, &x, t, 0.05, &eps, -0.7, &schedule, true).unwrap()))
        .collect();
    let worst = grads[1..]
        .iter()
        .map(|g| relative_error(g, &grads[0]))
        .fold(0.0, f64::max);
    let unweighted: Vec<Vec<f64>> = [0.1, 0.9]
        .iter()
        .map(|&t| keep(policy_gradient(&policy, &x, t, 0.05, &eps, -0.7, &schedule, false).unwrap()))
        .collect();
    let spread = relative_error(&unweighted[0], &unweighted[1]);
    verdict(
        8,
        "reweighting_invariance",
        worst <= 1e-8,
        format!("max rel. spread {worst:e} across t (<= 1e-8); without reweighting {spread:.3}"),
    );
}

#[test]
fn c09_kl_closed_form() {
    let mut rng = SeededRng::new(909);
    let task = MixtureTask::default();
    let schedule = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let p = small_net(1000 + case);
        let r = small_net(2000 + case);
        let cond = task.cond(case as usize % 4);
        let policy = Conditioned::plain(&p, &cond);
        let reference = Conditioned::plain(&r, &cond);
        let x = rng.normals(2);
        let t = rng.uniform_range(0.05, 0.95);
        let dt = rng.uniform_range(0.01, 0.05);
        let closed = kl_term(&policy, &reference, &x, t, dt, &schedule).unwrap();
        let a = step_distribution(&policy, &x, t, dt, &schedule).unwrap();
        let b = step_distribution(&reference, &x, t, dt, &schedule).unwrap();
        let sq: f64 = a.mean.iter().zip(&b.mean).map(|(m, n)| (m - n).powi(2)).sum();
        let direct = sq / (2.0 * a.std * a.std);
        worst = worst.max((closed - direct).abs());
    }
    verdict(
        9,
        "kl_closed_form",
        worst <= 1e-10,
        format!("20 cases, max |closed - direct| {worst:e} (<= 1e-10)"),
    );
}

#[test]
fn c10_multi_reward_linearity() {
    let task = MixtureTask::default();
    let net = small_net(1010);
    let reference = small_net(1011);
    let sampler = SamplerConfig::default();
    let rewards = RewardSpec::default();
    let mut rng = SeededRng::new(1012);
    let batch: Vec<_> = (0..6)
        .map(|i| rollout_group(&task, i % 4, 4, &sampler, false, &net, &rewards, &mut rng).unwrap())
        .collect();
    let weights = [0.7, -1.2, 2.5];
    let cfg = |w: Vec<f64>| ObjectiveConfig {
        beta: 0.0,
        reweight: true,
        norm: AdvantageNorm::MaxGroupStd,
        weights: w,
        schedule: sampler.schedule,
        guidance: sampler.guidance,
    };
    let total = grpo_loss(&batch, &task, &net, &reference, &cfg(weights.to_vec())).unwrap();
    let mut combined = vec![0.0; net.num_params()];
    for (k, w) in weights.iter().enumerate() {
        let mut one_hot = vec![0.0; 3];
        one_hot[k] = 1.0;
        let g = grpo_loss(&batch, &task, &net, &reference, &cfg(one_hot)).unwrap();
        for (c, v) in combined.iter_mut().zip(&g.grad) {
            *c += w * v;
        }
    }
    let diff = total
        .grad
        .iter()
        .zip(&combined)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        10,
        "multi_reward_linearity",
        diff <= 1e-10,
        format!("max |total - sum w_k grad_k| {diff:e} (<= 1e-10)"),
    );
}

#[test]
fn c11_truncation_anchor() {
    let schedule = NoiseSchedule::default();
    let hi = clipped_diffusion(0.9, 0.1, &schedule).unwrap();
    let lo = clipped_diffusion(0.5, 0.1, &schedule).unwrap();
    let coef_err = (hi.coefficient - 0.45).abs();
    let sigma_err = (hi.sigma - 0.45 / 0.1f64.sqrt()).abs();
    let ok = hi.clipped
        && coef_err <= 1e-12
        && sigma_err <= 1e-12
        && !lo.clipped
        && (lo.coefficient - 0.1f64.sqrt()).abs() <= 1e-12;
    verdict(
        11,
        "truncation_anchor",
        ok,
        format!(
            "t=0.9: coefficient {} sigma_eff {} (errors {coef_err:e}, {sigma_err:e}); t=0.5 clipped: {}",
            hi.coefficient, hi.sigma, lo.clipped
        ),
    );
}

#[test]
fn c12_max_std_advantage() {
    let adv = group_advantages(&[vec![1.0, 2.0, 3.0, 4.0]], &[2.0]).unwrap();
    let exact = adv[0][3] == 0.75;
    let mut rng = SeededRng::new(1212);
    let groups: Vec<Vec<Vec<f64>>> = (0..8)
        .map(|_| (0..2).map(|_| rng.normals(4).iter().map(|x| 3.0 * x + 1.0).collect()).collect())
        .collect();
    let refs: Vec<&[Vec<f64>]> = groups.iter().map(|g| g.as_slice()).collect();
    let all = batch_advantages(&refs, AdvantageNorm::MaxGroupStd).unwrap();
    let worst_sum = all
        .iter()
        .flatten()
        .map(|a| a.iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    verdict(
        12,
        "max_std_advantage",
        exact && worst_sum <= 1e-12,
        format!("A(4) = {} (== 0.75), max |group sum| {worst_sum:e} (<= 1e-12)", adv[0][3]),
    );
}

#[test]
fn c13_toy_grpo_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..3 {
        let settings = GrpoSettings {
            seeds: Some(vec![seed]),
            acceptance: true,
            ..GrpoSettings::default()
        };
        let start = Instant::now();
        let report = grpo_cmd::run(&settings, &dir.path().join(seed.to_string())).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let runs: Vec<RunSummary> = serde_json::from_value(report.metrics["runs"].clone()).unwrap();
        summaries.extend(runs);
    }
    let pick = |seed: u64, name: &str| {
        summaries
            .iter()
            .find(|s| s.seed == seed && s.variant.name() == name)
            .unwrap()
    };
    let gains: Vec<f64> = (0..3).map(|s| pick(s, "full").gain_in_std).collect();
    let improved = gains.iter().filter(|&&g| g >= 0.5).count();
    let ordered = (0..3)
        .filter(|&s| pick(s, "full").final_alignment >= pick(s, "no-reweight").final_alignment)
        .count();
    verdict(
        13,
        "toy_grpo_training",
        improved >= 2 && ordered >= 2 && slowest < 120.0,
        format!(
            "gains in initial std {gains:.3?} (>= 0.5 on {improved}/3), full >= no-reweight on {ordered}/3, slowest seed {slowest:.1} s (< 120 s)"
        ),
    );
}

#[test]
fn c14_refinement_identities() {
    let cfg = RefinementConfig::default();
    let mut rng = SeededRng::new(1414);
    let mut gauss = |e: [usize; 3]| GridSignal::from_fn(e, 3, |_, _| rng.normal()).unwrap();
    let x_lr = gauss([2, 4, 4]);
    let hr = upsample_trilinear(&x_lr, cfg.factors()).unwrap().extents();
    let x0 = gauss(hr);
    let eps = gauss(hr);
    let path = RefinementPath::new(&x0, &x_lr, &eps, &cfg).unwrap();

    let up = upsample_trilinear(&x_lr, cfg.factors()).unwrap();
    let x_thresh: Vec<f64> = up
        .values()
        .iter()
        .zip(eps.values())
        .map(|(u, e)| 0.5 * u + 0.5 * e)
        .collect();
    let endpoint = path
        .input_at(0.0)
        .unwrap()
        .max_abs_diff(&x0)
        .unwrap()
        .max(
            path.input_at(0.5)
                .unwrap()
                .values()
                .iter()
                .zip(&x_thresh)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );

    let unit = RefinementPath::new(&x0, &x_lr, &eps, &RefinementConfig { t_thresh: 1.0, ..cfg }).unwrap();
    let degeneracy = unit
        .target()
        .unwrap()
        .values()
        .iter()
        .zip(x0.values().iter().zip(eps.values()))
        .map(|(v, (a, e))| (v - (a - e)).abs())
        .fold(0.0, f64::max);

    let target = path.target().unwrap();
    let states = refine_trajectory(|_, _| Ok(target.clone()), &path.x_thresh, cfg.t_thresh, cfg.steps).unwrap();
    let recovery = states.last().unwrap().max_abs_diff(&x0).unwrap();

    let worst = endpoint.max(degeneracy).max(recovery);
    verdict(
        14,
        "refinement_identities",
        worst <= 1e-12 && cfg.t_thresh == 0.5 && cfg.steps == 5,
        format!("endpoint {endpoint:e}, degeneracy {degeneracy:e}, oracle recovery {recovery:e} (all <= 1e-12)"),
    );
}

fn run_cli(out: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_blockflow"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "7"])
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut all: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    all.sort();
    all
}

#[test]
fn c15_cli_determinism() {
    let commands: [(&str, &[&str]); 4] = [
        ("bsa-check", &["bsa-check", "--t", "4", "--h", "8", "--w", "8", "--cases", "5"]),
        ("ring-check", &["ring-check"]),
        (
            "grpo-train",
            &[
                "grpo-train",
                "--iterations",
                "4",
                "--eval-every",
                "2",
                "--prompts-per-update",
                "8",
                "--pretrain-iterations",
                "50",
            ],
        ),
        ("refine-demo", &["refine-demo"]),
    ];
    let mut mismatched = Vec::new();
    for (name, args) in commands {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let codes = (run_cli(a.path(), args), run_cli(b.path(), args));
        let same = codes == (0, 0) && files(&a.path().join(name)) == files(&b.path().join(name));
        if !same {
            mismatched.push(name);
        }
    }
    verdict(
        15,
        "cli_determinism",
        mismatched.is_empty(),
        format!("4 commands run twice with seed 7, differing outputs: {mismatched:?}"),
    );
}
