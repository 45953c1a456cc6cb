mod commands;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use filematch::ingest::{Centering, Scaling};
use filematch::rng::DEFAULT_SEED;

/// Estimate the never-jointly-observed covariance block between two files
/// that share a set of variables.
#[derive(Debug, Parser)]
#[command(name = "filematch", version)]
struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true, env = "FILEMATCH_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Main output file; stdout when omitted. `simulate` treats it as a directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Repeat for more log detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only print errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Degrees-of-freedom and rank conditions for a partition and q.
    Check(CheckArgs),
    /// Fit the factor model to two CSV files and write a model file.
    Fit(FitArgs),
    /// Estimate the cross block from covariance files or a model file.
    Complete(CompleteArgs),
    /// Choose the number of factors by BIC.
    SelectQ(SelectArgs),
    /// Draw a factor model and write the two files it generates.
    Simulate(SimulateArgs),
    /// Compare estimators over random column splits of complete data.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, required_unless_present = "model")]
    pub px: Option<usize>,
    #[arg(long, required_unless_present = "model")]
    pub py: Option<usize>,
    #[arg(long, required_unless_present = "model")]
    pub pz: Option<usize>,
    /// Number of factors (taken from the model file when omitted).
    #[arg(long, required_unless_present = "model")]
    pub q: Option<usize>,
    /// Model file; adds the numeric rank checks on its loadings.
    #[arg(long, conflicts_with_all = ["px", "py", "pz"])]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenterArg {
    PerDataset,
    PooledX,
}

impl From<CenterArg> for Centering {
    fn from(c: CenterArg) -> Self {
        match c {
            CenterArg::PerDataset => Centering::PerDataset,
            CenterArg::PooledX => Centering::PooledX,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    None,
    Unit,
}

impl From<ScaleArg> for Scaling {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::None => Scaling::None,
            ScaleArg::Unit => Scaling::UnitVariance,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV observing the shared and Y variables.
    #[arg(long = "file-a")]
    pub file_a: PathBuf,
    /// CSV observing the shared and Z variables.
    #[arg(long = "file-b")]
    pub file_b: PathBuf,
    /// Comma-separated shared column names; every common name when omitted.
    #[arg(long, value_delimiter = ',')]
    pub shared: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = CenterArg::PerDataset)]
    pub center: CenterArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::None)]
    pub scale: ScaleArg,
}

#[derive(Debug, Args, Clone)]
pub struct EmArgs {
    /// Random starts.
    #[arg(long, default_value_t = 100)]
    pub restarts: usize,
    /// EM iterations run from every start before picking the best.
    #[arg(long, default_value_t = 50)]
    pub burn: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// Relative log-likelihood change treated as converged.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Uniqueness floor as a multiple of the largest variance.
    #[arg(long, default_value_t = 1e-8)]
    pub psi_floor: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub q: usize,
    #[command(flatten)]
    pub em: EmArgs,
    /// Start from this model file instead of random starts.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Write the log-likelihood trace here as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the estimated cross block here as CSV.
    #[arg(long)]
    pub yz: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompleteMode {
    Em,
    Gram,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long, value_enum, default_value_t = CompleteMode::Em)]
    pub mode: CompleteMode,
    /// Model file; the cross block comes from its loadings.
    #[arg(long, conflicts_with_all = ["cov_a", "cov_b"], required_unless_present_all = ["cov_a", "cov_b"])]
    pub model: Option<PathBuf>,
    /// Square CSV matrix over file A's variables, header naming them.
    #[arg(long, requires = "cov_b")]
    pub cov_a: Option<PathBuf>,
    #[arg(long, requires = "cov_a")]
    pub cov_b: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub shared: Option<Vec<String>>,
    /// Required with covariance input.
    #[arg(long)]
    pub q: Option<usize>,
    /// Sample sizes behind the covariance files (EM mode).
    #[arg(long, default_value_t = 1000)]
    pub na: usize,
    #[arg(long, default_value_t = 1000)]
    pub nb: usize,
    /// One-row CSV of uniquenesses subtracted before Gram completion,
    /// columns named like the variables.
    #[arg(long)]
    pub psi: Option<PathBuf>,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub q_min: usize,
    /// Defaults to the largest q meeting the rank-deletion dimension condition.
    #[arg(long)]
    pub q_max: Option<usize>,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Args, Clone)]
pub struct DesignArgs {
    #[arg(long)]
    pub px: usize,
    #[arg(long)]
    pub py: usize,
    #[arg(long)]
    pub pz: usize,
    /// Factors in the generating model.
    #[arg(long = "q-true")]
    pub q_true: usize,
    #[arg(long, default_value_t = 1000)]
    pub na: usize,
    #[arg(long, default_value_t = 1000)]
    pub nb: usize,
    /// Rescale the model to unit variances.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Complete-data CSV with columns laid out as X, then Y, then Z.
    #[arg(long, requires_all = ["px", "py", "pz", "na"])]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub px: Option<usize>,
    #[arg(long)]
    pub py: Option<usize>,
    #[arg(long)]
    pub pz: Option<usize>,
    /// Generating factors for a simulated design.
    #[arg(long = "q-true", conflicts_with = "data")]
    pub q_true: Option<usize>,
    #[arg(long)]
    pub na: Option<usize>,
    #[arg(long, conflicts_with = "data")]
    pub nb: Option<usize>,
    #[arg(long, conflicts_with = "data")]
    pub standardize: bool,
    /// Factors fitted by the low-rank methods.
    #[arg(long)]
    pub q: usize,
    #[arg(long, value_delimiter = ',', default_value = "fm,cia,als,softimpute")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub n_perms: usize,
    #[command(flatten)]
    pub em: EmArgs,
    /// Per-method median and quartiles as CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Box plot of the errors.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Add wall-clock seconds to the results (breaks byte reproducibility).
    #[arg(long)]
    pub runtime: bool,
}

pub struct Global {
    pub seed: u64,
    pub output: Option<PathBuf>,
    quiet: bool,
}

impl Global {
    pub fn quiet(&self) -> bool {
        self.quiet
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let global = Global { seed: cli.seed, output: cli.output, quiet: cli.quiet };
    let result = match cli.command {
        Command::Check(a) => commands::check(&global, &a),
        Command::Fit(a) => commands::fit(&global, &a),
        Command::Complete(a) => commands::complete(&global, &a),
        Command::SelectQ(a) => commands::select(&global, &a),
        Command::Simulate(a) => commands::simulate(&global, &a),
        Command::Benchmark(a) => commands::benchmark(&global, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
