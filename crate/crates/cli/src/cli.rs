//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{bsa, grpo, refine, ring};
use crate::config::{load_file, resolve, Overrides};
use crate::error::CliResult;
use crate::report::Report;

#[derive(Debug, Parser)]
#[command(name = "blockflow", version, about = "Block-sparse attention, ring parallelism, flow GRPO and refinement checks")]
pub struct Cli {
    /// Output root; each command writes into `<out>/<command>`.
    #[arg(long, global = true, env = "BLOCKFLOW_OUT", default_value = "blockflow-out")]
    pub out: PathBuf,

    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sparse vs dense attention, mask oracles, backward and FLOP checks.
    BsaCheck(BsaArgs),
    /// Ring context-parallel attention against a single worker.
    RingCheck(RingArgs),
    /// GRPO training on the 2-D mixture task.
    GrpoTrain(GrpoArgs),
    /// Refinement path identities and a refined sample.
    RefineDemo(RefineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BsaCheck(_) => "bsa-check",
            Command::RingCheck(_) => "ring-check",
            Command::GrpoTrain(_) => "grpo-train",
            Command::RefineDemo(_) => "refine-demo",
        }
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub t: Option<i64>,
    #[arg(long)]
    pub h: Option<i64>,
    #[arg(long)]
    pub w: Option<i64>,
    #[arg(long)]
    pub head_dim: Option<i64>,
    #[arg(long)]
    pub heads: Option<i64>,
    #[arg(long)]
    pub batch: Option<i64>,
    #[arg(long)]
    pub block_t: Option<i64>,
    #[arg(long)]
    pub block_h: Option<i64>,
    #[arg(long)]
    pub block_w: Option<i64>,
}

impl GridArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("t", self.t)
            .set("h", self.h)
            .set("w", self.w)
            .set("head_dim", self.head_dim)
            .set("heads", self.heads)
            .set("batch", self.batch)
            .set("block_t", self.block_t)
            .set("block_h", self.block_h)
            .set("block_w", self.block_w);
    }
}

#[derive(Debug, Args)]
pub struct BsaArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// `topr` or `cdf`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub r: Option<i64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub cases: Option<i64>,
    #[arg(long)]
    pub backward_cases: Option<i64>,
}

#[derive(Debug, Args)]
pub struct RingArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub r: Option<i64>,
    /// Comma-separated worker counts.
    #[arg(long, value_delimiter = ',')]
    pub workers: Option<Vec<i64>>,
    #[arg(long)]
    pub constant: bool,
}

#[derive(Debug, Args)]
pub struct GrpoArgs {
    #[arg(long)]
    pub group_size: Option<i64>,
    #[arg(long)]
    pub prompts_per_update: Option<i64>,
    #[arg(long)]
    pub steps: Option<i64>,
    #[arg(long)]
    pub timeshift: Option<f64>,
    #[arg(long)]
    pub t_prime_max: Option<i64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iterations: Option<i64>,
    #[arg(long)]
    pub eval_every: Option<i64>,
    #[arg(long)]
    pub eval_per_prompt: Option<i64>,
    #[arg(long, value_delimiter = ',')]
    pub reward_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub on_target: Option<f64>,
    /// `full` (alias `none`), `no-reweight`, `per-group-std`,
    /// `all-steps-sde` or `no-truncation`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<i64>>,
    /// Base checkpoint to start from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Pretrain a base model when no checkpoint is given (the default).
    #[arg(long)]
    pub pretrain_first: bool,
    #[arg(long)]
    pub no_pretrain: bool,
    #[arg(long)]
    pub pretrain_iterations: Option<i64>,
    /// Three seeds, paired full / no-reweight runs and pass/fail checks.
    #[arg(long)]
    pub acceptance: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub t_thresh: Option<f64>,
    #[arg(long)]
    pub steps: Option<i64>,
    #[arg(long)]
    pub spatial_scale: Option<f64>,
    #[arg(long)]
    pub temporal_scale: Option<f64>,
    /// `repin` or `clean`.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub cond_frames: Option<i64>,
    #[arg(long)]
    pub expert_top_r: Option<i64>,
    #[arg(long)]
    pub reference_steps: Option<i64>,
}

fn flag(on: bool) -> Option<bool> {
    on.then_some(true)
}

/// Resolves settings and runs the selected command.
pub fn execute(cli: &Cli) -> CliResult<Report> {
    let file = load_file(cli.config.as_deref())?;
    let mut o = Overrides::default();
    o.set("seed", cli.seed.map(|s| s as i64));
    let out = cli.out.join(cli.command.name());
    match &cli.command {
        Command::BsaCheck(a) => {
            a.grid.apply(&mut o);
            o.set("mode", a.mode.clone())
                .set("r", a.r)
                .set("p", a.p)
                .set("cases", a.cases)
                .set("backward_cases", a.backward_cases);
            bsa::run(&resolve(file, o)?, &out)
        }
        Command::RingCheck(a) => {
            a.grid.apply(&mut o);
            o.set("r", a.r)
                .set_list("workers", a.workers.clone())
                .set("constant", flag(a.constant));
            ring::run(&resolve(file, o)?, &out)
        }
        Command::GrpoTrain(a) => {
            o.set("group_size", a.group_size)
                .set("prompts_per_update", a.prompts_per_update)
                .set("steps", a.steps)
                .set("timeshift", a.timeshift)
                .set("t_prime_max", a.t_prime_max)
                .set("guidance", a.guidance)
                .set("tau", a.tau)
                .set("beta", a.beta)
                .set("lr", a.lr)
                .set("iterations", a.iterations)
                .set("eval_every", a.eval_every)
                .set("eval_per_prompt", a.eval_per_prompt)
                .set_list("reward_weights", a.reward_weights.clone())
                .set("on_target", a.on_target)
                .set("variant", a.variant.clone())
                .set_list("variants", a.variants.clone())
                .set_list("seeds", a.seeds.clone())
                .set("base", a.base.as_ref().map(|p| p.display().to_string()))
                .set("pretrain_first", flag(a.pretrain_first))
                .set("pretrain_first", a.no_pretrain.then_some(false))
                .set("pretrain_iterations", a.pretrain_iterations)
                .set("acceptance", flag(a.acceptance));
            grpo::run(&resolve(file, o)?, &out)
        }
        Command::RefineDemo(a) => {
            o.set("t_thresh", a.t_thresh)
                .set("steps", a.steps)
                .set("spatial_scale", a.spatial_scale)
                .set("temporal_scale", a.temporal_scale)
                .set("condition", a.condition.clone())
                .set("cond_frames", a.cond_frames)
                .set("expert_top_r", a.expert_top_r)
                .set("reference_steps", a.reference_steps);
            refine::run(&resolve(file, o)?, &out)
        }
    }
}

/// Prints the per-check lines and returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(report) => {
            for c in &report.checks {
                println!(
                    "{} {} = {:e} ({} {:e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.relation,
                    c.threshold
                );
            }
            println!(
                "{}: {}",
                report.command,
                if report.passed { "all checks passed" } else { "checks failed" }
            );
            report.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
