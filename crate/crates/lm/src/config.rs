//! Model, training and task configuration (JSON on disk).

use regla_core::attention::{AttentionConfig, ForwardMode, GateKind, ScalingKind};
use regla_core::FeatureMapKind;
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Softmax,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    /// Template for every linear-attention layer; `d` and `n_heads` are
    /// taken from `head_dim` / `n_heads`. Its `rope` flag governs linear layers.
    pub attention: AttentionConfig,
    /// RoPE in softmax layers.
    pub rope: bool,
    pub hybrid_pattern: Vec<LayerKind>,
}

impl ModelConfig {
    /// 4 layers, 4 heads of width 32, MLP 512, all ReGLA.
    pub fn desk(vocab: usize) -> Self {
        Self::new(4, 4, 32, 512, vocab)
    }

    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, mlp_dim: usize, vocab: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim,
            mlp_dim,
            vocab,
            attention: AttentionConfig::regla(head_dim, n_heads),
            rope: true,
            hybrid_pattern: vec![LayerKind::Linear; n_layers],
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn with_gate(mut self, gate: GateKind) -> Self {
        self.attention.gate = gate;
        if gate != GateKind::ReglaRefined {
            return self;
        }
        self.attention.sum_norm = false;
        self.attention.stable_norm = true;
        self
    }

    pub fn with_feature(mut self, feature: FeatureMapKind) -> Self {
        self.attention.feature = feature;
        self
    }

    pub fn with_scaling(mut self, scaling: ScalingKind) -> Self {
        self.attention.scaling = scaling;
        self
    }

    pub fn with_pattern(mut self, pattern: Vec<LayerKind>) -> Self {
        self.hybrid_pattern = pattern;
        self
    }

    /// Alternating pattern with `round(fraction · n_layers)` linear layers,
    /// starting from the softmax side. `0.0` is all softmax, `1.0` all linear.
    pub fn with_replacement(mut self, fraction: f64) -> Self {
        let n = self.n_layers;
        let n_linear = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut pattern = vec![LayerKind::Softmax; n];
        if n_linear > 0 {
            // Spread the linear layers evenly, last layer first.
            for i in 0..n_linear {
                let idx = n - 1 - (i * n) / n_linear;
                pattern[idx] = LayerKind::Linear;
            }
        }
        self.hybrid_pattern = pattern;
        self
    }

    /// Attention config of linear layers, with dimensions filled in.
    pub fn linear_attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.head_dim,
            n_heads: self.n_heads,
            ..self.attention
        }
    }

    /// Fastest exact evaluation mode: chunked where the rule allows it.
    pub fn default_mode(&self) -> ForwardMode {
        if self.attention.gate.has_parallel_form() {
            ForwardMode::Chunked(64)
        } else {
            ForwardMode::Recurrent
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.mlp_dim == 0 || self.vocab == 0 {
            return Err(LmError::Config("all model dimensions must be positive".into()));
        }
        if self.hybrid_pattern.len() != self.n_layers {
            return Err(LmError::Config(format!(
                "hybrid_pattern has {} entries for {} layers",
                self.hybrid_pattern.len(),
                self.n_layers
            )));
        }
        if self.rope && self.head_dim % 2 == 1 {
            return Err(LmError::Config("RoPE needs an even head_dim".into()));
        }
        if self.attention.rope && self.head_dim % 2 == 1 {
            return Err(LmError::Config("RoPE needs an even head_dim".into()));
        }
        self.linear_attention().validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Linear warmup length; 0 disables.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            steps: 1000,
            batch: 8,
            max_len: 64,
            dropout: 0.1,
            seed: 0,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            eval_every: 100,
            eval_batches: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch > 0
            && self.max_len > 0
            && (0.0..1.0).contains(&self.dropout)
            && self.eval_every > 0
            && self.eval_batches > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(LmError::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    /// Key/value pairs followed by queries; every query is answered by the
    /// value paired with its key.
    AssocRecall {
        n_pairs: usize,
        n_queries: usize,
        vocab: usize,
    },
    /// Random prefix, separator, then the prefix again.
    Copy { prefix_len: usize, vocab: usize },
    /// Byte-level windows of a text file.
    CharCorpus { path: String },
}

impl TaskConfig {
    pub fn vocab(&self) -> usize {
        match self {
            TaskConfig::AssocRecall { vocab, .. } | TaskConfig::Copy { vocab, .. } => *vocab,
            TaskConfig::CharCorpus { .. } => 256,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::AssocRecall { .. } => "assoc_recall",
            TaskConfig::Copy { .. } => "copy",
            TaskConfig::CharCorpus { .. } => "char_corpus",
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl ExperimentConfig {
    /// Two-layer ReGLA model (2 heads of width 16) on associative recall with
    /// 8 pairs, 4 queries and 32 symbols: 3000 steps of batch 16 at lr 3e-3
    /// without dropout. Trains in well under a minute per run on one core.
    pub fn recall_preset() -> Self {
        Self {
            model: ModelConfig::new(2, 2, 16, 64, 32),
            train: TrainConfig {
                lr: 3e-3,
                steps: 3000,
                batch: 16,
                dropout: 0.0,
                eval_every: 250,
                ..TrainConfig::default()
            },
            task: TaskConfig::AssocRecall {
                n_pairs: 8,
                n_queries: 4,
                vocab: 32,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab != self.task.vocab() {
            return Err(LmError::Config(format!(
                "model vocab {} differs from the task vocab {}",
                self.model.vocab,
                self.task.vocab()
            )));
        }
        Ok(())
    }
}
