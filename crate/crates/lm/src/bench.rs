//! Decode-path benchmark: bounded recurrent state against a growing KV cache.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use regla_core::attention::GateKind;
use regla_core::rng::stream;
use regla_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{LayerKind, ModelConfig};
use crate::error::{LmError, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Softmax,
    Regla,
    FastDecay,
}

impl DecodeKind {
    pub const ALL: [DecodeKind; 3] = [DecodeKind::Softmax, DecodeKind::Regla, DecodeKind::FastDecay];

    pub fn name(self) -> &'static str {
        match self {
            DecodeKind::Softmax => "softmax",
            DecodeKind::Regla => "regla",
            DecodeKind::FastDecay => "fast_decay",
        }
    }
}

impl std::str::FromStr for DecodeKind {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "softmax" | "kv" => Ok(DecodeKind::Softmax),
            "regla" => Ok(DecodeKind::Regla),
            "fast_decay" | "fastdecay" => Ok(DecodeKind::FastDecay),
            other => Err(LmError::Config(format!("unknown decode kind {other:?}"))),
        }
    }
}

/// Source of a measured allocation peak, e.g. a counting global allocator.
pub trait MemoryProbe {
    fn reset_peak(&self);
    /// Peak bytes allocated above the level at the last reset.
    fn peak_bytes(&self) -> Option<usize>;
}

/// Probe for platforms without allocator instrumentation.
pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset_peak(&self) {}

    fn peak_bytes(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub kinds: Vec<DecodeKind>,
    pub prompt_len: usize,
    pub gen_lens: Vec<usize>,
    pub trials: usize,
    /// Untimed runs before the timed trials.
    pub warmup: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kinds: DecodeKind::ALL.to_vec(),
            prompt_len: 5,
            gen_lens: (6..=11).map(|p| 1 << p).collect(),
            trials: 3,
            warmup: 1,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            mlp_dim: 512,
            vocab: 256,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn model_config(&self, kind: DecodeKind) -> ModelConfig {
        let base = ModelConfig::new(self.n_layers, self.n_heads, self.head_dim, self.mlp_dim, self.vocab);
        match kind {
            DecodeKind::Softmax => base.with_pattern(vec![LayerKind::Softmax; self.n_layers]),
            DecodeKind::Regla => base,
            DecodeKind::FastDecay => base.with_gate(GateKind::FastDecay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: DecodeKind,
    pub gen_len: usize,
    pub analytic_state_bytes: usize,
    pub measured_peak_bytes: Option<usize>,
    pub median_ms: f64,
}

pub const BENCH_HEADER: &str = "kind,gen_len,analytic_state_bytes,measured_peak_bytes,median_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        let peak = self.measured_peak_bytes.map_or(String::new(), |p| p.to_string());
        format!("{},{},{},{},{:.4}", self.kind.name(), self.gen_len, self.analytic_state_bytes, peak, self.median_ms)
    }
}

/// KV cache for `len` positions: `2 · len · d · heads · layers · bytes`.
pub fn kv_cache_bytes(len: usize, head_dim: usize, n_heads: usize, n_layers: usize, elem_bytes: usize) -> usize {
    2 * len * head_dim * n_heads * n_layers * elem_bytes
}

/// Recurrent state plus accumulator: `(d · m + m) · heads · layers · bytes`.
pub fn linear_state_bytes(head_dim: usize, feature_dim: usize, n_heads: usize, n_layers: usize, elem_bytes: usize) -> usize {
    (head_dim * feature_dim + feature_dim) * n_heads * n_layers * elem_bytes
}

/// Attention-state bytes attributable to `gen_len` generated tokens. The
/// KV count covers the generated positions only so it is exactly linear in
/// `gen_len`; the linear-attention count does not depend on it.
pub fn analytic_state_bytes(model: &ModelConfig, gen_len: usize, elem_bytes: usize) -> usize {
    let (d, h) = (model.head_dim, model.n_heads);
    let m = model.linear_attention().m();
    model
        .hybrid_pattern
        .iter()
        .map(|k| match k {
            LayerKind::Softmax => kv_cache_bytes(gen_len, d, h, 1, elem_bytes),
            LayerKind::Linear => linear_state_bytes(d, m, h, 1, elem_bytes),
        })
        .sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Greedy decoding timings per kind and generation length.
pub fn decode_benchmark<T: Scalar>(cfg: &BenchConfig, probe: &dyn MemoryProbe) -> Result<Vec<BenchRow>> {
    if cfg.gen_lens.iter().any(|&g| g < 1) {
        return Err(LmError::Config("gen_len must be at least 1".into()));
    }
    if cfg.gen_lens.windows(2).any(|w| w[0] > w[1]) {
        return Err(LmError::Config("gen_lens must be sorted ascending".into()));
    }
    if cfg.trials == 0 || cfg.prompt_len == 0 {
        return Err(LmError::Config("trials and prompt_len must be positive".into()));
    }
    let mut rng = stream(cfg.seed, &[0x7072_6f6d_7074]);
    let prompt: Vec<usize> = (0..cfg.prompt_len).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let model_cfg = cfg.model_config(kind);
        let model = Model::<T>::build(model_cfg.clone(), cfg.seed)?;
        for &gen_len in &cfg.gen_lens {
            let mut reference: Option<Vec<usize>> = None;
            let mut times = Vec::with_capacity(cfg.trials);
            let mut peak = None;
            for trial in 0..cfg.warmup + cfg.trials {
                probe.reset_peak();
                let t0 = Instant::now();
                let tokens = model.generate_greedy(&prompt, gen_len)?;
                let elapsed = t0.elapsed().as_secs_f64() * 1e3;
                match &reference {
                    None => reference = Some(tokens),
                    Some(r) if *r != tokens => {
                        return Err(LmError::Config("greedy decoding diverged between trials".into()));
                    }
                    Some(_) => {}
                }
                if trial >= cfg.warmup {
                    times.push(elapsed);
                    peak = peak.max(probe.peak_bytes());
                }
            }
            rows.push(BenchRow {
                kind,
                gen_len,
                analytic_state_bytes: analytic_state_bytes(&model_cfg, gen_len, std::mem::size_of::<T>()),
                measured_peak_bytes: peak,
                median_ms: median(times),
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln(time)` against `ln(gen_len)` per kind.
pub fn throughput_fit(rows: &[BenchRow]) -> Result<BTreeMap<DecodeKind, f64>> {
    let mut by_kind: BTreeMap<DecodeKind, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_kind
            .entry(r.kind)
            .or_default()
            .push(((r.gen_len as f64).ln(), r.median_ms.max(f64::MIN_POSITIVE).ln()));
    }
    let mut out = BTreeMap::new();
    for (kind, pts) in by_kind {
        out.insert(kind, log_log_slope(&pts).map_err(|e| LmError::Config(format!("{}: {e}", kind.name())))?);
    }
    Ok(out)
}

/// Ordinary least-squares slope; needs at least three points with distinct `x`.
pub fn log_log_slope(pts: &[(f64, f64)]) -> std::result::Result<f64, String> {
    if pts.len() < 3 {
        return Err(format!("need at least 3 points, got {}", pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err("all x values coincide".into());
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(kind: DecodeKind, power: f64) -> Vec<BenchRow> {
        (6..=11)
            .map(|p| BenchRow {
                kind,
                gen_len: 1 << p,
                analytic_state_bytes: 0,
                measured_peak_bytes: None,
                median_ms: 0.01 * ((1u64 << p) as f64).powf(power),
            })
            .collect()
    }

    #[test]
    fn fit_recovers_exponents() {
        let mut rows = synthetic(DecodeKind::Regla, 1.0);
        rows.extend(synthetic(DecodeKind::Softmax, 2.0));
        let fit = throughput_fit(&rows).unwrap();
        assert!((fit[&DecodeKind::Regla] - 1.0).abs() < 0.01);
        assert!((fit[&DecodeKind::Softmax] - 2.0).abs() < 0.01);
        assert!(throughput_fit(&rows[..2]).is_err());
    }

    #[test]
    fn analytic_counts() {
        let cfg = BenchConfig::default();
        let soft = cfg.model_config(DecodeKind::Softmax);
        assert_eq!(analytic_state_bytes(&soft, 1 << 13, 4), 128 * analytic_state_bytes(&soft, 1 << 6, 4));
        let regla = cfg.model_config(DecodeKind::Regla);
        assert_eq!(analytic_state_bytes(&regla, 1 << 6, 4), analytic_state_bytes(&regla, 1 << 13, 4));
        assert_eq!(analytic_state_bytes(&regla, 64, 4), (32 * 32 + 32) * 4 * 4 * 4);
        let fd = cfg.model_config(DecodeKind::FastDecay);
        let (a, b) = (analytic_state_bytes(&regla, 64, 4) as f64, analytic_state_bytes(&fd, 64, 4) as f64);
        assert!((a - b).abs() <= 0.1 * a);
    }
}
