//! One-axis ablations over the linear-attention configuration.

use std::str::FromStr;

use ndarray::Array2;
use regla_core::attention::{GateKind, ScalingKind};
use regla_core::variance_lab::{accumulate_causal_products, unshifted_features, Welford};
use regla_core::{FeatureMapKind, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelConfig};
use crate::error::{LmError, Result};
use crate::model::{Attention, Model};
use crate::tasks::Batch;
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    FeatureDim,
    FeatureMap,
    ScalingFactor,
    SumNorm,
    StableNorm,
    GateKind,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::FeatureDim,
        AblationAxis::FeatureMap,
        AblationAxis::ScalingFactor,
        AblationAxis::SumNorm,
        AblationAxis::StableNorm,
        AblationAxis::GateKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::FeatureDim => "feature_dim",
            AblationAxis::FeatureMap => "feature_map",
            AblationAxis::ScalingFactor => "scaling_factor",
            AblationAxis::SumNorm => "sum_norm",
            AblationAxis::StableNorm => "stable_norm",
            AblationAxis::GateKind => "gate_kind",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::FeatureDim => &["16", "32", "64"],
            AblationAxis::FeatureMap => &["identity", "relu", "elu_plus_one", "cos_sin", "safe_exp"],
            AblationAxis::ScalingFactor => &["inv_sqrt_d", "variance_reduction"],
            AblationAxis::SumNorm | AblationAxis::StableNorm => &["on", "off"],
            AblationAxis::GateKind => &["none", "scalar_rfa", "delta_rule", "fast_decay", "regla"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| LmError::Config(format!("unknown ablation axis {s:?}")))
    }
}

fn parse_flag(value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(LmError::Config(format!("expected on/off, got {value:?}"))),
    }
}

pub fn parse_scaling(value: &str) -> Result<ScalingKind> {
    match value.to_ascii_lowercase().replace('-', "_").as_str() {
        "inv_sqrt_d" | "sqrt_d" => Ok(ScalingKind::InvSqrtD),
        "variance_reduction" | "vr" => Ok(ScalingKind::VarianceReduction),
        _ => Err(LmError::Config(format!("unknown scaling {value:?}"))),
    }
}

/// `base` with one axis set to `value`. The refined gate only exists with
/// stable normalization on and sum normalization off, so the two
/// normalization axes run both arms with the fast-decay gate instead.
pub fn apply_axis(base: &ModelConfig, axis: AblationAxis, value: &str) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::FeatureDim => {
            cfg.head_dim = value
                .parse()
                .map_err(|_| LmError::Config(format!("feature dim {value:?} is not an integer")))?;
        }
        AblationAxis::FeatureMap => cfg.attention.feature = FeatureMapKind::from_str(value)?,
        AblationAxis::ScalingFactor => cfg.attention.scaling = parse_scaling(value)?,
        AblationAxis::SumNorm | AblationAxis::StableNorm => {
            if cfg.attention.gate == GateKind::ReglaRefined {
                cfg.attention.gate = GateKind::FastDecay;
            }
            let on = parse_flag(value)?;
            if axis == AblationAxis::SumNorm {
                cfg.attention.sum_norm = on;
            } else {
                cfg.attention.stable_norm = on;
            }
        }
        AblationAxis::GateKind => cfg = cfg.with_gate(GateKind::from_str(value)?),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub seed: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Std of the scaled causal feature inner products of the first linear
    /// layer at initialization (no max shift).
    pub prenorm_std: f64,
}

pub const ABLATION_HEADER: &str = "axis,value,seed,final_loss,final_accuracy,prenorm_std";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.axis.name(),
            self.value,
            self.seed,
            self.final_loss,
            self.final_accuracy,
            self.prenorm_std
        )
    }
}

/// Std of `scale · φ(q_i)ᵀ φ(k_j)` (`j ≤ i`) in the first linear layer, with
/// unshifted features, over `batches`. `NaN` when the model has no linear layer.
pub fn prenorm_std<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let Some(idx) = model.layers.iter().position(|l| matches!(l.attn, Attention::Linear(_))) else {
        return Ok(f64::NAN);
    };
    let Attention::Linear(block) = &model.layers[idx].attn else {
        unreachable!("position found a linear layer")
    };
    let cfg = block.config;
    let scale: f64 = cfg.scale();
    let mut acc = Welford::default();
    for b in batches {
        let (inputs, seq_len) = model.attention_inputs(&b.inputs)?;
        let h = inputs[idx].mapv(|v| v.as_f64());
        for start in (0..h.ncols()).step_by(seq_len) {
            let x = h.slice(ndarray::s![.., start..start + seq_len]);
            for head in &block.heads {
                let to64 = |w: &Array2<T>| w.mapv(|v| v.as_f64());
                let zq = to64(&head.feature.w_q).dot(&x);
                let zk = to64(&head.feature.w_k).dot(&x);
                let phi_q = unshifted_features(cfg.feature, zq.view()) * scale;
                let phi_k = unshifted_features(cfg.feature, zk.view());
                accumulate_causal_products(&mut acc, &phi_q, &phi_k);
            }
        }
    }
    Ok(acc.std())
}

/// Trains one model per (grid value, seed) and reports final eval metrics.
pub fn ablate(axis: AblationAxis, grid: &[String], base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablate_with::<f32>(axis, grid, base, seeds, |_| {})
}

pub fn ablate_with<T: Scalar>(
    axis: AblationAxis,
    grid: &[String],
    base: &ExperimentConfig,
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for value in grid {
        let model = apply_axis(&base.model, axis, value)?;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model = model.clone();
            cfg.train.seed = seed;
            let mut trainer = Trainer::<T>::new(cfg)?;
            let std = prenorm_std(&trainer.model, trainer.eval_batches())?;
            let metrics = trainer.run()?;
            let last = metrics.last().expect("at least the initial evaluation");
            let row = AblationRow {
                axis,
                value: value.clone(),
                seed,
                final_loss: last.loss,
                final_accuracy: last.accuracy,
                prenorm_std: std,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Per grid value medians over seeds, in grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub value: String,
    pub median_loss: f64,
    pub median_accuracy: f64,
    pub median_prenorm_std: f64,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.value == v).collect();
            let col = |f: fn(&AblationRow) -> f64| median(&mut sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationSummary {
                value: v.to_string(),
                median_loss: col(|r| r.final_loss),
                median_accuracy: col(|r| r.final_accuracy),
                median_prenorm_std: col(|r| r.prenorm_std),
            }
        })
        .collect()
}
