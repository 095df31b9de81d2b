mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Engine;

#[derive(Parser, Debug)]
#[command(name = "lrmix", version, about = "Low-rank latent-cluster regression for mixed-type responses")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for grid cells and replications.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one of the standard simulation scenarios.
    Simulate(SimulateArgs),
    /// Fit one model size.
    Fit(FitArgs),
    /// Fit a grid of model sizes and select one by WAIC.
    Select(SelectArgs),
    /// Partition the units of a fit through its similarity matrix.
    Cluster(ClusterArgs),
    /// Mixture-mean predictions from a fit.
    Predict(PredictArgs),
    /// Predictor and response energies of each cluster's coefficients.
    Interpret(InterpretArgs),
    /// Replicated comparison against the baseline clusterers.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u32,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Comma-separated families, one per Y column (gaussian, bernoulli, negbin:r).
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    /// Median-center and MAD-scale the Gaussian responses.
    #[arg(long)]
    robust_scale: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long, value_enum)]
    engine: Option<Engine>,
    /// Sampler iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    k_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    r_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    r_nb_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    min_prop: f64,
    #[arg(long, value_enum, default_value = "on")]
    one_se: OnOff,
    #[arg(long, value_enum)]
    engine: Option<Engine>,
}

#[derive(Args, Debug, Clone)]
pub struct PartitionArgs {
    /// Project embedded rows onto the unit sphere before mean shift.
    #[arg(long)]
    row_normalize: bool,
    /// `rms` (default), `median`, or a positive number.
    #[arg(long, default_value = "rms")]
    bandwidth: String,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Fit artifact (fit.json).
    #[arg(long)]
    fit: PathBuf,
    /// Embedding dimension; defaults to the fitted K.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    partition: PartitionArgs,
    /// Also draw the first two embedding coordinates as SVG.
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Observed responses; when given, clusters are weighted by posterior
    /// responsibilities instead of the mixing weights.
    #[arg(long)]
    y: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpretArgs {
    #[arg(long)]
    fit: PathBuf,
    /// CSV whose header names the predictors.
    #[arg(long)]
    x: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    scenarios: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "bmlc,kmeans,kmeans-xy,pca,gmm")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[command(flatten)]
    partition: PartitionArgs,
    #[arg(long, default_value_t = 0.05)]
    min_prop: f64,
    #[arg(long, value_enum, default_value = "on")]
    one_se: OnOff,
}

fn run(cli: Cli) -> lrmix::Result<()> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    let ctx = commands::Context { cfg, out: cli.out, workers: cli.workers };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a.scenario, a.n, a.p),
        Command::Fit(a) => {
            let mut cfg = ctx.cfg.clone();
            commands::apply_data(&mut cfg, &a.data);
            cfg.k = a.k.unwrap_or(cfg.k);
            cfg.r_max = a.r_max.unwrap_or(cfg.r_max);
            cfg.engine = a.engine.unwrap_or(cfg.engine);
            cfg.gibbs.iters = a.iters.unwrap_or(cfg.gibbs.iters);
            cfg.gibbs.burnin = a.burnin.or(cfg.gibbs.burnin);
            cfg.gibbs.thin = a.thin.unwrap_or(cfg.gibbs.thin);
            commands::fit(&commands::Context { cfg, ..ctx })
        }
        Command::Select(a) => {
            let mut cfg = ctx.cfg.clone();
            commands::apply_data(&mut cfg, &a.data);
            if a.engine == Some(Engine::Gibbs) {
                return Err(lrmix::Error::config("grid selection uses the variational engine only"));
            }
            if !a.k_grid.is_empty() {
                cfg.grid.k = a.k_grid;
            }
            if !a.r_grid.is_empty() {
                cfg.grid.r_max = a.r_grid;
            }
            if !a.r_nb_grid.is_empty() {
                cfg.grid.r_nb = a.r_nb_grid;
            }
            let opts = lrmix::selection::SelectOptions { min_prop: a.min_prop, one_se: matches!(a.one_se, OnOff::On) };
            commands::select(&commands::Context { cfg, ..ctx }, &opts)
        }
        Command::Cluster(a) => commands::cluster(&ctx, &a.fit, a.k, &commands::cluster_options(&a.partition)?, a.svg),
        Command::Predict(a) => commands::predict(&ctx, &a.fit, &a.x, a.offsets.as_deref(), a.y.as_deref()),
        Command::Interpret(a) => commands::interpret(&ctx, &a.fit, a.x.as_deref()),
        Command::Bench(a) => {
            let methods = a.methods.iter().map(|m| m.parse()).collect::<lrmix::Result<Vec<_>>>()?;
            let mut bcfg = lrmix::bench::BenchConfig {
                grid: ctx.cfg.grid.clone(),
                vi: ctx.cfg.vi,
                select: lrmix::selection::SelectOptions { min_prop: a.min_prop, one_se: matches!(a.one_se, OnOff::On) },
                cluster: commands::cluster_options(&a.partition)?,
                workers: ctx.workers,
            };
            bcfg.workers = bcfg.workers.max(1);
            commands::bench(&ctx, &a.scenarios, &methods, a.reps, a.n, a.p, &bcfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
