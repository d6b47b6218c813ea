//! Gate gradient curves, extreme-bias initialization and forget-gate
//! activation histograms.

use ndarray::s;
use regla_core::attention::{GateActivations, GateParams};
use regla_core::gradients::{refined_gate_grad, vanilla_gate_grad};
use regla_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};
use crate::model::{Attention, Model};
use crate::tasks::Batch;

pub const DEFAULT_EXTREME_BIAS: f64 = 6.0;
pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub g: f64,
    pub r: f64,
    pub grad_refined: f64,
    pub grad_vanilla: f64,
}

pub const CURVES_HEADER: &str = "g,r,grad_refined,grad_vanilla";

/// Refined and plain sigmoid-gate gradients over `g_grid × r_values`;
/// `g` must lie in (0,1) and `r` in [0,1].
pub fn gradient_curves(g_grid: &[f64], r_values: &[f64]) -> Result<Vec<CurveRow>> {
    if let Some(bad) = g_grid.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(LmError::Core(regla_core::Error::Domain(format!("gate value {bad} outside (0,1)"))));
    }
    if let Some(bad) = r_values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(LmError::Core(regla_core::Error::Domain(format!("refining gate {bad} outside [0,1]"))));
    }
    let mut rows = Vec::with_capacity(g_grid.len() * r_values.len());
    for &r in r_values {
        for &g in g_grid {
            rows.push(CurveRow {
                g,
                r,
                grad_refined: refined_gate_grad(g, r),
                grad_vanilla: vanilla_gate_grad(g),
            });
        }
    }
    Ok(rows)
}

/// `n` evenly spaced interior points of (0,1).
pub fn default_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// Sets the forget-gate biases to `bias`: `b_g` for the refined gate and
/// both `b_z` and `b_f` for the fast-decay gate. Gates without a bias are
/// returned unchanged.
pub fn extreme_bias_init<T: Scalar>(params: &GateParams<T>, bias: f64) -> GateParams<T> {
    let mut out = params.clone();
    match &mut out {
        GateParams::Regla { b_g, .. } => b_g.fill(T::lit(bias)),
        GateParams::FastDecay { b_z, b_f, .. } => {
            b_z.fill(T::lit(bias));
            b_f.fill(T::lit(bias));
        }
        _ => {}
    }
    out
}

/// Extreme-bias initialization of every linear layer, alternating the
/// sign by head so both saturated regimes are present.
pub fn apply_extreme_bias<T: Scalar>(model: &mut Model<T>, bias: f64) {
    for layer in &mut model.layers {
        if let Attention::Linear(block) = &mut layer.attn {
            for (h, head) in block.heads.iter_mut().enumerate() {
                let b = if h % 2 == 0 { bias } else { -bias };
                head.gate = extreme_bias_init(&head.gate, b);
            }
        }
    }
}

/// Binned forget-gate activations of one layer over `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    pub counts: Vec<u64>,
}

impl LayerHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let n = self.n_bins() as f64;
        (i as f64 / n, (i + 1) as f64 / n)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.counts)
    }

    fn add(&mut self, v: f64) {
        let n = self.counts.len();
        let bin = ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        self.counts[bin] += 1;
    }
}

/// Shannon entropy (nats) of the empirical distribution given by `counts`.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Histogram per linear layer of the effective forget-gate values over the
/// batches: `f` for the refined gate, every entry of `z fᵀ` for fast decay,
/// `g` for the scalar gate and `β` for the delta rule.
pub fn activation_histogram<T: Scalar>(model: &Model<T>, batches: &[Batch], n_bins: usize) -> Result<Vec<LayerHistogram>> {
    if n_bins < 2 {
        return Err(LmError::Config("a histogram needs at least two bins".into()));
    }
    let mut hists: Vec<LayerHistogram> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(&l.attn, Attention::Linear(b) if !matches!(b.heads[0].gate, GateParams::None)))
        .map(|(layer, _)| LayerHistogram {
            layer,
            counts: vec![0; n_bins],
        })
        .collect();
    for batch in batches {
        let (inputs, _) = model.attention_inputs(&batch.inputs)?;
        for hist in &mut hists {
            let Attention::Linear(block) = &model.layers[hist.layer].attn else {
                unreachable!("histograms are built for linear layers only")
            };
            let h = &inputs[hist.layer];
            for head in &block.heads {
                match head.gate.activations(h.view()) {
                    GateActivations::Regla { f, .. } => f.iter().for_each(|v| hist.add(v.as_f64())),
                    GateActivations::ScalarRfa { g } => g.iter().for_each(|v| hist.add(v.as_f64())),
                    GateActivations::DeltaRule { beta } => beta.iter().for_each(|v| hist.add(v.as_f64())),
                    GateActivations::FastDecay { z, f } => {
                        for t in 0..z.ncols() {
                            let (zc, fc) = (z.slice(s![.., t]), f.slice(s![.., t]));
                            for &zi in zc {
                                for &fj in fc {
                                    hist.add((zi * fj).as_f64());
                                }
                            }
                        }
                    }
                    GateActivations::None { .. } => {}
                }
            }
        }
    }
    Ok(hists)
}

/// Mean forget-gate activation of every linear layer over the batches.
pub fn mean_activation<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let hists = activation_histogram(model, batches, 1000)?;
    let (mut sum, mut n) = (0.0, 0u64);
    for h in &hists {
        for (i, &c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(i);
            sum += c as f64 * 0.5 * (lo + hi);
            n += c;
        }
    }
    Ok(sum / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_examples() {
        let rows = gradient_curves(&[0.1, 0.5, 0.9], &[0.0, 1.0]).unwrap();
        let at = |g: f64, r: f64| rows.iter().find(|c| c.g == g && c.r == r).unwrap();
        assert!((at(0.5, 0.0).grad_refined - 0.25).abs() < 1e-15);
        assert!((at(0.9, 0.0).grad_refined - 0.162).abs() < 1e-12);
        assert!((at(0.1, 1.0).grad_refined - 0.162).abs() < 1e-12);
        assert!((at(0.9, 0.0).grad_vanilla - 0.09).abs() < 1e-12);
        assert!(gradient_curves(&[1.0], &[0.5]).is_err());
        assert!(gradient_curves(&[0.0], &[0.5]).is_err());
        assert!(gradient_curves(&[0.5], &[1.5]).is_err());
    }

    #[test]
    fn entropy_of_uniform_and_point() {
        assert!((entropy(&[5, 5, 5, 5]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0, 9, 0]), 0.0);
        assert_eq!(entropy(&[]), 0.0);
    }
}
