//! Desk-scale decoder-only language models built on gated linear attention,
//! with synthetic tasks, training, checkpoints, the gate lab, ablations and
//! the decode benchmark.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ablate;
pub mod bench;
pub mod gate_lab;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod train;

pub use config::{ExperimentConfig, LayerKind, ModelConfig, TaskConfig, TrainConfig};
pub use error::{LmError, Result};
pub use checkpoint::Checkpoint;
pub use model::{Attention, Layer, Model, ModelDecoder};
pub use tasks::{Batch, Task};
pub use train::{evaluate_ppl, train, MetricsRow, Trainer};

pub type ModelF32 = Model<f32>;
pub type ModelF64 = Model<f64>;
