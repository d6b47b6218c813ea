//! `regla`: variance and gate labs, mode-equivalence and gradient checks,
//! training, evaluation, ablations and the decode benchmark.

mod alloc;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regla_core::attention::GateKind;
use regla_lm::ablate::AblationAxis;
use regla_lm::bench::DecodeKind;

#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc::new();

#[derive(Parser, Debug)]
#[command(name = "regla", version, about = "Gated linear attention labs, training harness and benchmarks")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random stream of the invocation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file (CSV or JSON); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scalar type; defaults to f64 for labs and checks and f32 for training.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Experiment config (JSON) for train, eval, ablate and gates --hist.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Empirical std of random feature inner products against the closed forms.
    Variance(VarianceArgs),
    /// Gate gradient curves or forget-gate activation histograms.
    Gates(GatesArgs),
    /// Parallel, recurrent and chunked forwards of one attention block.
    Equiv(EquivArgs),
    /// Analytic block gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model; writes the metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes a JSON report.
    Eval(EvalArgs),
    /// One-axis ablation; writes one CSV row per grid value and seed.
    Ablate(AblateArgs),
    /// Greedy decoding time and attention-state memory.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub d: Vec<usize>,
    /// identity, exp or all.
    #[arg(long, default_value = "all")]
    pub feature: String,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// Also simulate the mean-shifted exponential features.
    #[arg(long)]
    pub shifted: bool,
    /// Exit 1 when any |ratio - 1| exceeds this.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["curves", "hist"]))]
pub struct GatesArgs {
    /// Tabulate refined and plain gate gradients.
    #[arg(long)]
    pub curves: bool,
    /// Forget-gate histograms before and after training from an extreme bias.
    #[arg(long)]
    pub hist: bool,
    /// Interior grid points for --curves.
    #[arg(long, default_value_t = 99)]
    pub points: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub r: Vec<f64>,
    #[arg(long, default_value = "regla")]
    pub gate: GateKind,
    /// Bias magnitude; heads alternate its sign.
    #[arg(long, default_value_t = 6.0, allow_negative_numbers = true)]
    pub bias: f64,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Overrides the configured number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EquivArgs {
    #[arg(long, default_value = "regla")]
    pub gate: GateKind,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub len: usize,
    #[arg(long, default_value_t = 16)]
    pub chunk: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Gate kinds to check; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub gate: Vec<GateKind>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 12)]
    pub len: usize,
    #[arg(long, default_value_t = 6)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Save a checkpoint here when training ends.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Byte-level text file to score; the task's evaluation batches otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    /// parallel, recurrent or chunked.
    #[arg(long, default_value = "chunked")]
    pub mode: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub axis: AblationAxis,
    /// Grid values; the axis default when omitted.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
    /// Training seeds per grid value.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "softmax,regla,fast_decay")]
    pub kinds: Vec<DecodeKind>,
    /// Generation lengths; powers of two from 64 to 2048 by default.
    #[arg(long, value_delimiter = ',')]
    pub gen_lens: Vec<usize>,
    /// Extend the default lengths up to 8192.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 512)]
    pub mlp_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli, &ALLOC) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
