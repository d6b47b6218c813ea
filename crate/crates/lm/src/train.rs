//! Training loop, evaluation and perplexity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regla_core::attention::ForwardMode;
use regla_core::rng::{mix64, stream};
use regla_core::{Error as CoreError, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{LmError, Result};
use crate::model::{cross_entropy, Model};
use crate::optim::{clip_global_norm, AdamW};
use crate::tasks::{windows, Batch, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub ppl: f64,
}

pub const METRICS_HEADER: &str = "step,loss,accuracy,ppl";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.step, self.loss, self.accuracy, self.ppl)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Loss and accuracy summed over batches, weighted by scored targets.
pub fn evaluate<T: Scalar>(model: &Model<T>, batches: &[Batch], mode: ForwardMode) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0;
    let mut count = 0;
    for b in batches {
        let logits = model.forward(&b.inputs, mode)?;
        let (loss, c, n, _) = cross_entropy(logits.view(), &b.targets)?;
        total += loss * n as f64;
        correct += c;
        count += n;
    }
    if count == 0 {
        return Err(LmError::Task("no scored targets".into()));
    }
    Ok((total / count as f64, correct as f64 / count as f64))
}

/// `exp` of the mean next-token cross-entropy over non-overlapping windows.
pub fn evaluate_ppl<T: Scalar>(model: &Model<T>, tokens: &[usize], max_len: usize, mode: ForwardMode) -> Result<f64> {
    let (loss, _) = evaluate(model, &windows(tokens, max_len)?, mode)?;
    Ok(loss.exp())
}

/// Model, optimizer, task and the single random stream driving data and dropout.
pub struct Trainer<T> {
    pub config: ExperimentConfig,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub task: Task,
    pub rng: ChaCha8Rng,
    pub step: usize,
    eval_set: Vec<Batch>,
}

fn optimizer_for<T: Scalar>(model: &Model<T>, t: &TrainConfig) -> AdamW<T> {
    AdamW::new(model, t.lr, (t.beta1, t.beta2), t.adam_eps, t.weight_decay, t.warmup_steps)
}

fn eval_set(task: &Task, t: &TrainConfig) -> Vec<Batch> {
    let mut rng = stream(t.seed, &[0x6576_616c]);
    (0..t.eval_batches).map(|_| task.batch(&mut rng, t.batch, t.max_len)).collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let task = Task::from_config(&config.task)?;
        Self::with_task(config, task)
    }

    /// Uses an already materialized task (the config's task only names it).
    pub fn with_task(config: ExperimentConfig, task: Task) -> Result<Self> {
        config.validate()?;
        if task.vocab() != config.model.vocab {
            return Err(LmError::Config(format!(
                "task vocab {} differs from model vocab {}",
                task.vocab(),
                config.model.vocab
            )));
        }
        let model = Model::build(config.model.clone(), config.train.seed)?;
        Ok(Self::from_parts(config, model, task))
    }

    /// Starts training from an existing model (e.g. after re-initializing gates).
    pub fn from_parts(config: ExperimentConfig, model: Model<T>, task: Task) -> Self {
        let optimizer = optimizer_for(&model, &config.train);
        let rng = ChaCha8Rng::seed_from_u64(mix64(config.train.seed ^ 0x7472_6169_6e));
        let eval_set = eval_set(&task, &config.train);
        Self {
            config,
            model,
            optimizer,
            task,
            rng,
            step: 0,
            eval_set,
        }
    }

    pub(crate) fn restore(config: ExperimentConfig, model: Model<T>, optimizer: AdamW<T>, task: Task, rng: ChaCha8Rng, step: usize) -> Self {
        let eval_set = eval_set(&task, &config.train);
        Self {
            config,
            model,
            optimizer,
            task,
            rng,
            step,
            eval_set,
        }
    }

    pub fn eval_batches(&self) -> &[Batch] {
        &self.eval_set
    }

    pub fn eval(&self) -> Result<MetricsRow> {
        let (loss, accuracy) = evaluate(&self.model, &self.eval_set, self.config.model.default_mode())?;
        Ok(MetricsRow {
            step: self.step,
            loss,
            accuracy,
            ppl: loss.exp(),
        })
    }

    /// One optimizer update; returns the training-batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let t = &self.config.train;
        let batch = self.task.batch(&mut self.rng, t.batch, t.max_len);
        let fail = |this: &Self, why: String| LmError::NonFiniteLoss {
            step: this.step,
            diagnostic: diagnostic(&this.model, &batch, &why),
        };
        let (logits, tape) = match self.model.forward_train(&batch.inputs, t.dropout, &mut self.rng) {
            Ok(x) => x,
            Err(LmError::Core(e @ (CoreError::NonFinite(_) | CoreError::Degenerate { .. }))) => return Err(fail(self, e.to_string())),
            Err(e) => return Err(e),
        };
        let (loss, _, _, dlogits) = cross_entropy(logits.view(), &batch.targets)?;
        if !loss.is_finite() {
            return Err(fail(self, format!("loss {loss}")));
        }
        let mut grads = match self.model.backward(&tape, dlogits.view()) {
            Ok(g) => g,
            Err(LmError::Core(e @ (CoreError::NonFinite(_) | CoreError::Degenerate { .. }))) => return Err(fail(self, e.to_string())),
            Err(e) => return Err(e),
        };
        if let Some(max) = t.clip_norm {
            let norm = clip_global_norm(&mut grads, max);
            if !norm.is_finite() {
                return Err(fail(self, format!("gradient norm {norm}")));
            }
        }
        self.optimizer.step(&mut self.model, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `config.train.steps`, evaluating at the current step, every
    /// `eval_every` updates and at the end.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        self.run_with(|_| {})
    }

    pub fn run_with(&mut self, mut on_eval: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let total = self.config.train.steps;
        let every = self.config.train.eval_every.max(1);
        let mut rows = vec![self.eval()?];
        on_eval(&rows[0]);
        while self.step < total {
            self.train_step()?;
            if self.step % every == 0 || self.step == total {
                let row = self.eval()?;
                on_eval(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

fn diagnostic<T: Scalar>(model: &Model<T>, batch: &Batch, why: &str) -> String {
    let stats = model.activation_stats(&batch.inputs);
    serde_json::json!({
        "reason": why,
        "batch_inputs": batch.inputs,
        "batch_targets": batch.targets,
        "layer_stats": stats,
    })
    .to_string()
}

/// Builds a model and trains it according to `config`.
pub fn train<T: Scalar>(config: ExperimentConfig) -> Result<(Model<T>, Vec<MetricsRow>)> {
    let mut trainer = Trainer::<T>::new(config)?;
    let rows = trainer.run()?;
    Ok((trainer.model, rows))
}
