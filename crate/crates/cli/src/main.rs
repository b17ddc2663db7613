//! `debiasmf`: generate semi-synthetic data, train and evaluate the
//! recommenders, and run the variance and gradient verification studies.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "debiasmf", version, about = "Exposure-debiased matrix factorization experiments")]
struct Cli {
    /// Flat `key=value` settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed reduction order. Every command is single-threaded, so this is always the case.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a semi-synthetic dataset (or pass real ratings through) and its splits.
    Generate(GenerateArgs),
    /// Train one or more methods over a list of seeds.
    Train(TrainArgs),
    /// Score trained checkpoints on the test split.
    Evaluate(EvaluateArgs),
    /// Closed-form against Monte Carlo gradient variances.
    VarianceStudy(VarianceArgs),
    /// Hypergradient and closed-form derivative checks.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Base ratings TSV; a synthetic stand-in base is generated when absent.
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Real test ratings; switches to passthrough mode (no simulation).
    #[arg(long)]
    test_ratings: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_user_interactions: Option<usize>,
    #[arg(long)]
    min_item_interactions: Option<usize>,
    #[arg(long)]
    max_users: Option<usize>,
    #[arg(long)]
    max_items: Option<usize>,
    #[arg(long)]
    relevance_scale: Option<f64>,
    #[arg(long)]
    relevance_offset: Option<f64>,
    /// Constant relevance on every cell.
    #[arg(long)]
    gamma_const: Option<f64>,
    /// Constant exposure on every cell.
    #[arg(long)]
    m_const: Option<f64>,
    #[arg(long)]
    item_power: Option<f64>,
    #[arg(long)]
    user_power: Option<f64>,
    #[arg(long)]
    activity_floor: Option<f64>,
    #[arg(long)]
    min_exposure: Option<f64>,
    #[arg(long)]
    test_items_per_user: Option<usize>,
    #[arg(long)]
    active_fraction: Option<f64>,
    #[arg(long)]
    hyper_fraction: Option<f64>,
    #[arg(long)]
    base_users: Option<usize>,
    #[arg(long)]
    base_items: Option<usize>,
    #[arg(long)]
    base_density: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated methods or `all`.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated seeds (default: `--seed`).
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// `sgd` or `adam`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    clip_floor: Option<f64>,
    #[arg(long)]
    pcc_iterations: Option<usize>,
    /// `full` or `observed`.
    #[arg(long)]
    pair_universe: Option<String>,
    #[arg(long)]
    ks: Option<String>,
    /// Comma-separated weight decay candidates scored by SNIPS on hyper-validation.
    #[arg(long)]
    tune_weight_decay: Option<String>,
    /// Also write a checkpoint every this many epochs (0: final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory of `train` (default: `--out`).
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    clip_floor: Option<f64>,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[arg(long)]
    gammas: Option<String>,
    #[arg(long)]
    m_bars: Option<String>,
    #[arg(long)]
    ps: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    /// `stratified` or `iid`.
    #[arg(long)]
    sampling: Option<String>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    zero_tol: Option<f64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::VarianceStudy(_) => "variance-study",
            Command::GradCheck(_) => "grad-check",
        }
    }

    /// Writes the command's flags into `s`.
    fn apply_flags(&self, s: &mut Settings) {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match self {
            Command::Generate(a) => {
                s.set("ratings", path(&a.ratings));
                s.set("test_ratings", path(&a.test_ratings));
                s.set("threshold", a.threshold);
                s.set("min_user_interactions", a.min_user_interactions);
                s.set("min_item_interactions", a.min_item_interactions);
                s.set("max_users", a.max_users);
                s.set("max_items", a.max_items);
                s.set("relevance_scale", a.relevance_scale);
                s.set("relevance_offset", a.relevance_offset);
                s.set("gamma_const", a.gamma_const);
                s.set("m_const", a.m_const);
                s.set("item_power", a.item_power);
                s.set("user_power", a.user_power);
                s.set("activity_floor", a.activity_floor);
                s.set("min_exposure", a.min_exposure);
                s.set("test_items_per_user", a.test_items_per_user);
                s.set("active_fraction", a.active_fraction);
                s.set("hyper_fraction", a.hyper_fraction);
                s.set("base_users", a.base_users);
                s.set("base_items", a.base_items);
                s.set("base_density", a.base_density);
            }
            Command::Train(a) => {
                s.set("data", path(&a.data));
                s.set("methods", a.methods.as_ref());
                s.set("seeds", a.seeds.as_ref());
                s.set("epochs", a.epochs);
                s.set("inner_lr", a.inner_lr);
                s.set("outer_lr", a.outer_lr);
                s.set("batch_size", a.batch_size);
                s.set("weight_decay", a.weight_decay);
                s.set("optimizer", a.optimizer.as_ref());
                s.set("dim", a.dim);
                s.set("init_scale", a.init_scale);
                s.set("clip_floor", a.clip_floor);
                s.set("pcc_iterations", a.pcc_iterations);
                s.set("pair_universe", a.pair_universe.as_ref());
                s.set("ks", a.ks.as_ref());
                s.set("tune_weight_decay", a.tune_weight_decay.as_ref());
                s.set("checkpoint_every", a.checkpoint_every);
            }
            Command::Evaluate(a) => {
                s.set("data", path(&a.data));
                s.set("runs", path(&a.runs));
                s.set("methods", a.methods.as_ref());
                s.set("seeds", a.seeds.as_ref());
                s.set("ks", a.ks.as_ref());
                s.set("clip_floor", a.clip_floor);
            }
            Command::VarianceStudy(a) => {
                s.set("gammas", a.gammas.as_ref());
                s.set("m_bars", a.m_bars.as_ref());
                s.set("ps", a.ps.as_ref());
                s.set("samples", a.samples);
                s.set("sampling", a.sampling.as_ref());
            }
            Command::GradCheck(a) => {
                s.set("instances", a.instances);
                s.set("rtol", a.rtol);
                s.set("zero_tol", a.zero_tol);
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.set("seed", cli.seed);
    if cli.deterministic {
        s.set("deterministic", Some(true));
    }
    cli.command.apply_flags(&mut s);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;

    let name = cli.command.name();
    let (settings, artifacts) = match &cli.command {
        Command::Generate(_) => (s.clone(), commands::generate(&s, &out)?),
        Command::Train(_) => {
            let s = commands::with_data_defaults(s)?;
            let a = commands::train(&s, &out)?;
            (s, a)
        }
        Command::Evaluate(_) => {
            let s = commands::with_data_defaults(s)?;
            let a = commands::evaluate(&s, &out)?;
            (s, a)
        }
        Command::VarianceStudy(_) => (s.clone(), commands::variance_study(&s, &out)?),
        Command::GradCheck(_) => (s.clone(), commands::grad_check(&s, &out)?),
    };
    manifest::record(
        &out,
        name,
        manifest::Entry {
            config_hash: settings.hash(),
            artifacts,
        },
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
