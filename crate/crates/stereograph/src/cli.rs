//! `stereograph train | generate | geomcheck`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stereograph_core::checks::{run_checks, CheckOptions, DistanceFn, SuiteResult};
use stereograph_core::data::{generate_sbm, Dataset, SbmConfig};
use stereograph_core::gnn::ModelSpec;
use stereograph_core::manifolds::{self, SpaceKind};
use stereograph_core::trainer::{repeat_runs, TrainConfig};
use stereograph_core::Error;

use crate::io::{load_dataset, save_dataset, IoError, MetricsFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "stereograph",
    version,
    about = "Latent graph inference over products of model spaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model over repeated seeded runs and report test accuracy.
    Train(TrainArgs),
    /// Write a stochastic block model dataset.
    Generate(GenerateArgs),
    /// Run the geometric and sampler invariant suites.
    Geomcheck(GeomcheckArgs),
}

/// Where `train` reads its dataset from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Sbm(SbmConfig),
}

impl DataSource {
    /// Accepts a path, `sbm:homophilic` or `sbm:heterophilic`, the presets
    /// optionally followed by `:<seed>` (default 0).
    pub fn parse(s: &str) -> Result<Self, String> {
        let Some(rest) = s.strip_prefix("sbm:") else {
            return Ok(DataSource::File(PathBuf::from(s)));
        };
        let (preset, seed) = match rest.split_once(':') {
            Some((p, seed)) => (
                p,
                seed.parse::<u64>()
                    .map_err(|e| format!("bad preset seed {seed:?}: {e}"))?,
            ),
            None => (rest, 0),
        };
        match preset {
            "homophilic" => Ok(DataSource::Sbm(SbmConfig::homophilic(seed))),
            "heterophilic" => Ok(DataSource::Sbm(SbmConfig::heterophilic(seed))),
            _ => Err(format!(
                "unknown preset {preset:?}, expected homophilic or heterophilic"
            )),
        }
    }

    fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataSource::File(p) => Ok(load_dataset(p)?),
            DataSource::Sbm(cfg) => Ok(generate_sbm(cfg)?),
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file, or `sbm:homophilic` / `sbm:heterophilic[:seed]`.
    #[arg(long, value_parser = DataSource::parse)]
    data: DataSource,
    /// Model name such as `MLP`, `GCN` or `GCN-dDGM*-EHP`.
    #[arg(long)]
    model: String,
    /// Sampled edges per node.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Seed of the first run; run r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Metrics JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GeomcheckArgs {
    /// Restrict to one model space (E, H, S, P or D).
    #[arg(long, value_parser = parse_space)]
    space: Option<SpaceKind>,
    /// Single curvature for the selected space.
    #[arg(long, allow_negative_numbers = true, requires = "space")]
    curvature: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 200_000)]
    gumbel_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_space(s: &str) -> Result<SpaceKind, String> {
    let mut chars = s.chars();
    match (chars.next().and_then(SpaceKind::from_letter), chars.next()) {
        (Some(kind), None) => Ok(kind),
        _ => Err(format!("expected one of E, H, S, P, D, got {s:?}")),
    }
}

/// Failure of a command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::Run { source, .. } => is_usage(source),
        Error::Config(_) | Error::Signature(_) | Error::Parse { .. } | Error::CurvatureSign { .. } => true,
        _ => false,
    }
}

impl CliError {
    /// 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if is_usage(e) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

/// Parses `args` (program name first) and runs the selected command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Generate(a) => cmd_generate(&a, stdout),
        Command::Geomcheck(a) => {
            let opts = CheckOptions {
                space: a.space,
                curvature: a.curvature,
                samples: a.samples,
                gumbel_draws: a.gumbel_draws,
                seed: a.seed,
            };
            geomcheck(&opts, &manifolds::distance, stdout)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = ModelSpec::parse(&a.model, a.k)?;
    let data = a.data.load()?;
    if model.needs_input_graph() && data.edges().is_none() {
        return Err(Error::Config(format!(
            "{model} needs an input graph but dataset {:?} has no edges",
            data.name
        ))
        .into());
    }
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        n_runs: a.runs,
        ..TrainConfig::new(model)
    };
    let summary = repeat_runs(&config, &data)?;
    let metrics = MetricsFile::from_summary(&config, &summary);
    if let Some(path) = &a.out {
        metrics.save(path)?;
    }
    writeln!(out, "{} {:.4}±{:.4}", config.model, metrics.mean_acc, metrics.std_acc)?;
    Ok(EXIT_OK)
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = SbmConfig {
        n: a.n,
        n_classes: a.classes,
        p_in: a.p_in,
        p_out: a.p_out,
        feature_dim: a.dim,
        noise: a.noise,
        seed: a.seed,
    };
    let data = generate_sbm(&cfg)?;
    save_dataset(&data, &a.out)?;
    let edges = data.edges().map_or(0, <[_]>::len);
    writeln!(out, "wrote {} ({} nodes, {} edges)", a.out.display(), data.n(), edges)?;
    Ok(EXIT_OK)
}

fn print_table(results: &[SuiteResult], out: &mut dyn Write) -> std::io::Result<()> {
    let suite_w = results.iter().map(|r| r.suite.len()).max().unwrap_or(5).max(5);
    let scope_w = results
        .iter()
        .map(|r| r.scope.chars().count())
        .max()
        .unwrap_or(5)
        .max(5);
    writeln!(out, "{:<suite_w$}  {:<scope_w$}  result  detail", "suite", "scope")?;
    for r in results {
        let status = if r.passed { "pass" } else { "FAIL" };
        let pad = scope_w - r.scope.chars().count();
        writeln!(
            out,
            "{:<suite_w$}  {}{:pad$}  {status:<6}  {}",
            r.suite, r.scope, "", r.detail
        )?;
    }
    Ok(())
}

/// Runs the invariant suites against `dist` and prints a table.
/// Exit code 1 when any suite fails.
pub fn geomcheck(opts: &CheckOptions, dist: DistanceFn, out: &mut dyn Write) -> Result<i32, CliError> {
    let results = run_checks(opts, dist)?;
    print_table(&results, out)?;
    let failed: Vec<&SuiteResult> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        writeln!(out, "all {} suites passed", results.len())?;
        return Ok(EXIT_OK);
    }
    for r in &failed {
        writeln!(
            out,
            "failed: {} ({}), reproduce with --seed {}",
            r.suite, r.scope, r.seed
        )?;
    }
    Ok(EXIT_FAILURE)
}
