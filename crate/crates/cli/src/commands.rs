//! Subcommand implementations. Each returns whether its checks passed.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use regla_core::attention::{AttentionConfig, ForwardMode, GateKind};
use regla_core::gradients::{forward_with_tape, gradcheck_block, FD_EPSILON};
use regla_core::rng::{normal_matrix, stream};
use regla_core::variance_lab::{
    shifted_theoretical_std, simulate_shifted_std, sweep_std_vs_dim, InnerProductFeature,
};
use regla_core::{AttentionBlock, Scalar};
use regla_lm::ablate::{ablate_with, AblationRow, ABLATION_HEADER};
use regla_lm::bench::{decode_benchmark, throughput_fit, BenchConfig, MemoryProbe, BENCH_HEADER};
use regla_lm::config::ExperimentConfig;
use regla_lm::gate_lab::{activation_histogram, apply_extreme_bias, default_grid, gradient_curves, CURVES_HEADER};
use regla_lm::tasks::Task;
use regla_lm::train::{evaluate, evaluate_ppl, metrics_csv};
use regla_lm::{Checkpoint, LmError, Model, Trainer};
use serde_json::json;

use crate::{AblateArgs, BenchArgs, Cli, Command, EquivArgs, EvalArgs, GatesArgs, GradcheckArgs, Precision, TrainArgs, VarianceArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config; exit code 2.
    Usage(String),
    /// Runtime failure; exit code 1.
    Run(String),
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Config(m) => CliError::Usage(format!("invalid config: {m}")),
            LmError::Json(e) => CliError::Usage(format!("config JSON: {e}")),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<regla_core::Error> for CliError {
    fn from(e: regla_core::Error) -> Self {
        match e {
            regla_core::Error::Config(m) | regla_core::Error::Domain(m) => CliError::Usage(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli, probe: &dyn MemoryProbe) -> Result<bool> {
    let lab = cli.precision.unwrap_or(Precision::F64);
    let training = cli.precision.unwrap_or(Precision::F32);
    macro_rules! dispatch {
        ($p:expr, $f:ident($($a:expr),*)) => {
            match $p {
                Precision::F32 => $f::<f32>($($a),*),
                Precision::F64 => $f::<f64>($($a),*),
            }
        };
    }
    let (text, passed) = match &cli.command {
        Command::Variance(a) => variance(cli, a)?,
        Command::Gates(a) if a.curves => gate_curves(a)?,
        Command::Gates(a) => dispatch!(training, gate_hist(cli, a))?,
        Command::Equiv(a) => dispatch!(lab, equiv(cli, a))?,
        Command::Gradcheck(a) => {
            if cli.precision == Some(Precision::F32) {
                return Err(CliError::Usage("gradcheck compares against finite differences and runs in f64 only".into()));
            }
            gradcheck(cli, a)?
        }
        Command::Train(a) => dispatch!(training, train(cli, a))?,
        Command::Eval(a) => dispatch!(training, eval(cli, a))?,
        Command::Ablate(a) => dispatch!(training, ablate(cli, a))?,
        Command::Bench(a) => dispatch!(training, bench(cli, a, probe))?,
    };
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(passed)
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::recall_preset(),
    };
    cfg.train.seed = cli.seed;
    Ok(cfg)
}

fn variance(cli: &Cli, a: &VarianceArgs) -> Result<(String, bool)> {
    let features: Vec<InnerProductFeature> = match a.feature.as_str() {
        "all" => InnerProductFeature::ALL.to_vec(),
        f => vec![f.parse()?],
    };
    let mut out = String::from("d,feature,n,empirical_std,theoretical_std,ratio\n");
    let mut worst: f64 = 0.0;
    for &feature in &features {
        for row in sweep_std_vs_dim(&a.d, feature, a.n, cli.seed)? {
            worst = worst.max((row.ratio - 1.0).abs());
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                row.d,
                feature.name(),
                row.n,
                row.empirical_std,
                row.theoretical_std,
                row.ratio
            );
        }
    }
    if a.shifted {
        for &d in &a.d {
            let emp = simulate_shifted_std(d, a.n, cli.seed)?;
            let theory = shifted_theoretical_std(d)?;
            let ratio = emp / theory;
            worst = worst.max((ratio - 1.0).abs());
            let _ = writeln!(out, "{d},exp_shifted,{},{emp:.6},{theory:.6},{ratio:.6}", a.n);
        }
    }
    Ok((out, a.tol.is_none_or(|t| worst <= t)))
}

fn gate_curves(a: &GatesArgs) -> Result<(String, bool)> {
    let rows = gradient_curves(&default_grid(a.points), &a.r)?;
    let mut out = format!("{CURVES_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{:.6},{:.6},{:.8},{:.8}", r.g, r.r, r.grad_refined, r.grad_vanilla);
    }
    Ok((out, true))
}

fn gate_hist<T: Scalar>(cli: &Cli, a: &GatesArgs) -> Result<(String, bool)> {
    let mut cfg = experiment(cli)?;
    cfg.model = cfg.model.with_gate(a.gate);
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let task = Task::from_config(&cfg.task)?;
    let mut model = Model::<T>::build(cfg.model.clone(), cfg.train.seed)?;
    apply_extreme_bias(&mut model, a.bias);
    let mut trainer = Trainer::from_parts(cfg, model, task);
    let pre = activation_histogram(&trainer.model, trainer.eval_batches(), a.bins)?;
    trainer.run()?;
    let post = activation_histogram(&trainer.model, trainer.eval_batches(), a.bins)?;
    let mut out = String::from("layer,bin_lo,bin_hi,count,phase\n");
    for (phase, hists) in [("pre", &pre), ("post", &post)] {
        for h in hists.iter() {
            for (i, c) in h.counts.iter().enumerate() {
                let (lo, hi) = h.bin_edges(i);
                let _ = writeln!(out, "{},{lo:.4},{hi:.4},{c},{phase}", h.layer);
            }
        }
    }
    for (p, q) in pre.iter().zip(&post) {
        eprintln!("layer {}: entropy {:.4} -> {:.4} nats", p.layer, p.entropy(), q.entropy());
    }
    Ok((out, true))
}

fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}

fn equiv<T: Scalar>(cli: &Cli, a: &EquivArgs) -> Result<(String, bool)> {
    if a.d == 0 || a.len == 0 || a.chunk == 0 || a.heads == 0 {
        return Err(CliError::Usage("d, len, chunk and heads must be positive".into()));
    }
    let cfg = AttentionConfig::regla(a.d, a.heads).with_gate(a.gate);
    let model_dim = a.d * a.heads;
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for instance in 0..a.instances {
        let mut rng = stream(cli.seed, &[instance as u64, a.gate as u64]);
        let block = AttentionBlock::<T>::init(cfg, model_dim, &mut rng)?;
        let x: Array2<T> = normal_matrix(&mut rng, model_dim, a.len, 1.0);
        let reference = block.forward(x.view(), ForwardMode::Recurrent)?;
        let mut record = |name, y: &Array2<T>| {
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(max_abs_diff(y, &reference));
        };
        if a.gate.has_parallel_form() {
            record("parallel", &block.forward(x.view(), ForwardMode::Parallel)?);
            record("chunked", &block.forward(x.view(), ForwardMode::Chunked(a.chunk))?);
        } else {
            // No parallel form: check against the independent taped loop.
            record("taped_loop", &forward_with_tape(&block, x.view())?.0);
        }
    }
    let max = worst.values().fold(0.0f64, |m, &v| m.max(v));
    let passed = max <= a.tol;
    let report = json!({
        "gate": a.gate.name(),
        "d": a.d,
        "heads": a.heads,
        "len": a.len,
        "chunk": a.chunk,
        "instances": a.instances,
        "precision": std::any::type_name::<T>(),
        "max_abs_diff": worst,
        "tol": a.tol,
        "passed": passed,
    });
    Ok((format!("{report:#}\n"), passed))
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<(String, bool)> {
    let gates = if a.gate.is_empty() { GateKind::ALL.to_vec() } else { a.gate.clone() };
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &gate in &gates {
        let cfg = AttentionConfig::regla(a.d, 2).with_gate(gate);
        for seed in 0..a.seeds {
            let mut rng = stream(cli.seed, &[seed, gate as u64, 0x6763]);
            let block = AttentionBlock::<f64>::init(cfg, a.model_dim, &mut rng)?;
            let x: Array2<f64> = normal_matrix(&mut rng, a.model_dim, a.len, 1.0);
            let report = gradcheck_block(&block, x.view(), ForwardMode::Recurrent, seed, FD_EPSILON)?;
            worst = worst.max(report.max_rel_err);
            rows.push(json!({
                "gate": gate.name(),
                "seed": seed,
                "max_rel_err": report.max_rel_err,
                "worst_param": report.worst_param,
            }));
        }
    }
    let passed = worst <= a.tol;
    let report = json!({ "tol": a.tol, "max_rel_err": worst, "passed": passed, "checks": rows });
    Ok((format!("{report:#}\n"), passed))
}

fn train<T: Scalar>(cli: &Cli, a: &TrainArgs) -> Result<(String, bool)> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let task = Task::from_config(&ck.config.task)?;
            ck.into_trainer(task)
        }
        None => Trainer::<T>::new(experiment(cli)?)?,
    };
    if let Some(steps) = a.steps {
        trainer.config.train.steps = steps;
    }
    let rows = trainer.run_with(|r| eprintln!("step {:>6}  loss {:.4}  acc {:.4}", r.step, r.loss, r.accuracy))?;
    if let Some(path) = &a.checkpoint {
        Checkpoint::from_trainer(&trainer).save(path)?;
    }
    Ok((metrics_csv(&rows), true))
}

fn parse_mode(s: &str) -> Result<ForwardMode> {
    match s {
        "parallel" => Ok(ForwardMode::Parallel),
        "recurrent" => Ok(ForwardMode::Recurrent),
        "chunked" => Ok(ForwardMode::Chunked(64)),
        other => Err(CliError::Usage(format!("unknown mode {other:?}"))),
    }
}

fn eval<T: Scalar>(_cli: &Cli, a: &EvalArgs) -> Result<(String, bool)> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let mode = parse_mode(&a.mode)?;
    let report = match &a.corpus {
        Some(path) => {
            let tokens: Vec<usize> = read(path)?.into_iter().map(usize::from).collect();
            if ck.config.model.vocab != 256 {
                return Err(CliError::Usage("corpus evaluation needs a byte-level (vocab 256) model".into()));
            }
            let ppl = evaluate_ppl(&ck.model, &tokens, a.max_len, mode)?;
            json!({ "step": ck.step, "tokens": tokens.len(), "max_len": a.max_len, "mode": mode.name(), "loss": ppl.ln(), "ppl": ppl })
        }
        None => {
            let task = Task::from_config(&ck.config.task)?;
            let step = ck.step;
            let model = ck.model.clone();
            let trainer = ck.into_trainer(task);
            let (loss, accuracy) = evaluate(&model, trainer.eval_batches(), mode)?;
            json!({ "step": step, "mode": mode.name(), "loss": loss, "accuracy": accuracy, "ppl": loss.exp() })
        }
    };
    Ok((format!("{report:#}\n"), true))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn ablate<T: Scalar>(cli: &Cli, a: &AblateArgs) -> Result<(String, bool)> {
    let mut base = experiment(cli)?;
    if let Some(steps) = a.steps {
        base.train.steps = steps;
    }
    let grid = if a.grid.is_empty() { a.axis.default_grid() } else { a.grid.clone() };
    let rows = ablate_with::<T>(a.axis, &grid, &base, &a.seeds, |r| eprintln!("{}", r.csv()))?;
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        out.push_str(&AblationRow::csv(r));
        out.push('\n');
    }
    Ok((out, true))
}

fn bench<T: Scalar>(cli: &Cli, a: &BenchArgs, probe: &dyn MemoryProbe) -> Result<(String, bool)> {
    let top = if a.full { 13 } else { 11 };
    let gen_lens = if a.gen_lens.is_empty() { (6..=top).map(|p| 1usize << p).collect() } else { a.gen_lens.clone() };
    let cfg = BenchConfig {
        kinds: a.kinds.clone(),
        prompt_len: a.prompt_len,
        gen_lens,
        trials: a.trials,
        warmup: 1,
        n_layers: a.layers,
        n_heads: a.heads,
        head_dim: a.head_dim,
        mlp_dim: a.mlp_dim,
        vocab: a.vocab,
        seed: cli.seed,
    };
    let rows = decode_benchmark::<T>(&cfg, probe)?;
    if let Ok(fit) = throughput_fit(&rows) {
        for (kind, slope) in fit {
            eprintln!("{}: log-log time slope {slope:.3}", kind.name());
        }
    }
    let mut out = format!("{BENCH_HEADER}\n");
    for r in &rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    Ok((out, true))
}
