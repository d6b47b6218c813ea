//! Multi-head linear attention block: per-head projections, feature maps,
//! update rule and stable normalization, then an output projection.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::chunked::chunked_decay_attention;
use super::config::{AttentionConfig, ForwardMode, GateKind};
use super::gates::GateParams;
use super::norm::stable_norm_inplace;
use super::parallel::{gated_parallel, linear_attention_parallel};
use super::rope::apply_rope;
use super::rules::{gated_update, read_out};
use super::state::RecurrentState;
use crate::error::{Error, Result};
use crate::feature_maps::{column_max, column_safe_exp, elementwise_features, global_safe_exp, FeatureMapKind, FeatureParams};
use crate::params::Params;
use crate::rng::normal_matrix;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `W_q`, `W_k`: `d × model_dim`; they double as the query/key projections.
    pub feature: FeatureParams<T>,
    /// `d × model_dim`.
    pub w_v: Array2<T>,
    pub gate: GateParams<T>,
    /// Stable-norm gain, length `d`.
    pub gain: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<T> {
    pub config: AttentionConfig,
    pub model_dim: usize,
    pub heads: Vec<HeadParams<T>>,
    /// `model_dim × (n_heads · d)`.
    pub w_o: Array2<T>,
}

/// How the safe-exp key max is taken for a given rule.
pub(crate) fn key_uses_global_max(config: &AttentionConfig) -> bool {
    config.feature == FeatureMapKind::SafeExp && config.gate != GateKind::DeltaRule
}

/// Feature-space inputs of one head over one sequence.
#[derive(Clone, Debug)]
pub(crate) struct HeadFeatures<T> {
    pub q_raw: Array2<T>,
    pub k_raw: Array2<T>,
    pub v: Array2<T>,
    /// Scaled query features, `m × L`.
    pub phi_q: Array2<T>,
    pub phi_k: Array2<T>,
    pub key_shift: KeyShift<T>,
}

/// Global key max bookkeeping. Pre-norm outputs at position `t` are
/// multiplied by `correction[t] = exp(max - running[t])`, which turns the
/// whole-sequence normalization into the causal running one.
#[derive(Clone, Debug)]
pub(crate) struct KeyShift<T> {
    pub argmax: (usize, usize),
    pub running_argmax: Vec<(usize, usize)>,
    pub correction: Array1<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, model_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if model_dim == 0 {
            return Err(Error::Config("model_dim must be positive".into()));
        }
        let (d, m) = (config.d, config.m());
        let std_in = 1.0 / (model_dim as f64).sqrt();
        let heads = (0..config.n_heads)
            .map(|_| HeadParams {
                feature: FeatureParams::init(rng, d, model_dim),
                w_v: normal_matrix(rng, d, model_dim, std_in),
                gate: GateParams::init(config.gate, rng, d, m, model_dim),
                gain: Array1::ones(d),
            })
            .collect();
        let inner = config.n_heads * d;
        let w_o = normal_matrix(rng, model_dim, inner, 1.0 / (inner as f64).sqrt());
        Ok(Self {
            config,
            model_dim,
            heads,
            w_o,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            model_dim: self.model_dim,
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    feature: FeatureParams {
                        w_q: Array2::zeros(h.feature.w_q.raw_dim()),
                        w_k: Array2::zeros(h.feature.w_k.raw_dim()),
                    },
                    w_v: Array2::zeros(h.w_v.raw_dim()),
                    gate: h.gate.zeros_like(),
                    gain: Array1::zeros(h.gain.raw_dim()),
                })
                .collect(),
            w_o: Array2::zeros(self.w_o.raw_dim()),
        }
    }

    fn check_input(&self, x: ArrayView2<T>) -> Result<()> {
        if x.nrows() != self.model_dim {
            return Err(Error::Shape(format!(
                "block expects {} input rows, got {}",
                self.model_dim,
                x.nrows()
            )));
        }
        crate::error::ensure_finite(x.iter(), "block input")
    }

    /// Forward pass over one sequence `x` (`model_dim × L`).
    pub fn forward(&self, x: ArrayView2<T>, mode: ForwardMode) -> Result<Array2<T>> {
        self.check_input(x)?;
        if x.ncols() == 0 {
            return Ok(Array2::zeros((self.model_dim, 0)));
        }
        match mode {
            ForwardMode::Recurrent => {
                let mut dec = BlockDecoder::new(self);
                let mut out = Array2::zeros((self.model_dim, x.ncols()));
                for (t, col) in x.columns().into_iter().enumerate() {
                    out.column_mut(t).assign(&dec.step(self, col)?);
                }
                Ok(out)
            }
            ForwardMode::Parallel | ForwardMode::Chunked(_) => {
                if !self.config.gate.has_parallel_form() {
                    return Err(Error::UnsupportedMode {
                        mode: mode.name(),
                        gate: self.config.gate.name(),
                    });
                }
                if let ForwardMode::Chunked(0) = mode {
                    return Err(Error::Domain("chunk_size must be >= 1".into()));
                }
                let mut heads = Vec::with_capacity(self.heads.len());
                for h in 0..self.heads.len() {
                    let feats = self.head_features(h, x, 0);
                    let mut out = self.head_pre_norm(h, &feats, x, mode)?;
                    self.head_post(h, &mut out);
                    heads.push(out);
                }
                let views: Vec<_> = heads.iter().map(|a| a.view()).collect();
                Ok(self.w_o.dot(&concatenate(Axis(0), &views).expect("equal widths")))
            }
        }
    }

    /// Forward over `x` holding consecutive sequences of `seq_len` columns.
    pub fn forward_batch(&self, x: ArrayView2<T>, seq_len: usize, mode: ForwardMode) -> Result<Array2<T>> {
        if seq_len == 0 || x.ncols() % seq_len != 0 {
            return Err(Error::Shape(format!("{} columns is not a multiple of {seq_len}", x.ncols())));
        }
        let mut out = Array2::zeros((self.model_dim, x.ncols()));
        for start in (0..x.ncols()).step_by(seq_len) {
            let y = self.forward(x.slice(s![.., start..start + seq_len]), mode)?;
            out.slice_mut(s![.., start..start + seq_len]).assign(&y);
        }
        Ok(out)
    }

    /// Projections and feature maps of head `h` over a whole sequence.
    pub(crate) fn head_features(&self, h: usize, x: ArrayView2<T>, start_pos: usize) -> HeadFeatures<T> {
        let head = &self.heads[h];
        let cfg = &self.config;
        let mut q_raw = head.feature.w_q.dot(&x);
        let mut k_raw = head.feature.w_k.dot(&x);
        if cfg.rope {
            apply_rope(q_raw.view_mut(), start_pos);
            apply_rope(k_raw.view_mut(), start_pos);
        }
        let v = head.w_v.dot(&x);
        let scale: T = cfg.scale();
        let mut phi_q = match cfg.feature {
            FeatureMapKind::SafeExp => column_safe_exp(q_raw.view()),
            kind => elementwise_features(kind, q_raw.view()).expect("not safe exp"),
        };
        phi_q *= scale;
        let (phi_k, key_shift) = match cfg.feature {
            FeatureMapKind::SafeExp if key_uses_global_max(cfg) => {
                let (phi, max) = global_safe_exp(k_raw.view());
                (phi, Some(key_shift(k_raw.view(), max)))
            }
            FeatureMapKind::SafeExp => (column_safe_exp(k_raw.view()), None),
            kind => (elementwise_features(kind, k_raw.view()).expect("not safe exp"), None),
        };
        HeadFeatures {
            q_raw,
            k_raw,
            v,
            phi_q,
            phi_k,
            key_shift: key_shift.unwrap_or(KeyShift {
                argmax: (0, 0),
                running_argmax: Vec::new(),
                correction: Array1::zeros(0),
            }),
        }
    }

    /// Pre-normalization output of head `h` in a parallel or chunked mode,
    /// including sum normalization and the causal key-max correction.
    fn head_pre_norm(&self, h: usize, feats: &HeadFeatures<T>, x: ArrayView2<T>, mode: ForwardMode) -> Result<Array2<T>> {
        let cfg = &self.config;
        let head = &self.heads[h];
        let mut out = match (mode, &head.gate) {
            (ForwardMode::Parallel, GateParams::None) => linear_attention_parallel(
                feats.phi_q.view(),
                feats.phi_k.view(),
                feats.v.view(),
                cfg.sum_norm,
                true,
                T::one(),
            )?,
            (ForwardMode::Parallel, gate) => {
                let decays = gate.activations(x).decays(cfg.d, cfg.m()).expect("elementwise rule");
                gated_parallel(feats.phi_q.view(), feats.phi_k.view(), feats.v.view(), &decays, cfg.sum_norm)?
            }
            (ForwardMode::Chunked(c), gate) => {
                let decays = gate.activations(x).decays(cfg.d, cfg.m()).expect("elementwise rule");
                chunked_decay_attention(
                    feats.phi_q.view(),
                    feats.phi_k.view(),
                    feats.v.view(),
                    &decays,
                    cfg.sum_norm,
                    c,
                )?
            }
            (ForwardMode::Recurrent, _) => unreachable!("recurrent mode goes through the decoder"),
        };
        if !cfg.sum_norm && !feats.key_shift.correction.is_empty() {
            out *= &feats.key_shift.correction.view().insert_axis(Axis(0));
        }
        Ok(out)
    }

    fn head_post(&self, h: usize, out: &mut Array2<T>) {
        if self.config.stable_norm {
            let gain = self.heads[h].gain.view();
            for col in out.columns_mut() {
                stable_norm_inplace(col, gain);
            }
        }
    }

    pub fn decoder(&self) -> BlockDecoder<T> {
        BlockDecoder::new(self)
    }
}

pub(crate) fn key_shift<T: Scalar>(k_raw: ArrayView2<T>, max: T) -> KeyShift<T> {
    let mut argmax = None;
    let mut running = T::neg_infinity();
    let mut running_arg = (0, 0);
    let mut running_argmax = Vec::with_capacity(k_raw.ncols());
    let mut correction = Array1::zeros(k_raw.ncols());
    for (t, col) in k_raw.columns().into_iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if v > running {
                running = v;
                running_arg = (i, t);
            }
            if argmax.is_none() && v == max {
                argmax = Some((i, t));
            }
        }
        running_argmax.push(running_arg);
        correction[t] = (max - running).exp();
    }
    KeyShift {
        argmax: argmax.unwrap_or((0, 0)),
        running_argmax,
        correction,
    }
}

/// Incremental decoder: one recurrent state per head, constant memory in
/// the number of decoded positions.
#[derive(Clone, Debug)]
pub struct BlockDecoder<T> {
    pub states: Vec<RecurrentState<T>>,
    pos: usize,
}

impl<T: Scalar> BlockDecoder<T> {
    pub fn new(block: &AttentionBlock<T>) -> Self {
        let (d, m) = (block.config.d, block.config.m());
        Self {
            states: (0..block.heads.len()).map(|_| RecurrentState::new(d, m)).collect(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Bytes held by all per-head states.
    pub fn state_bytes(&self) -> usize {
        self.states.iter().map(RecurrentState::state_bytes).sum()
    }

    /// Consumes one input column and returns the block output for it.
    pub fn step(&mut self, block: &AttentionBlock<T>, x: ArrayView1<T>) -> Result<Array1<T>> {
        let cfg = &block.config;
        let scale: T = cfg.scale();
        let xc = x.insert_axis(Axis(1));
        let mut inner = Array1::zeros(cfg.n_heads * cfg.d);
        for (h, (head, state)) in block.heads.iter().zip(self.states.iter_mut()).enumerate() {
            let mut q = head.feature.w_q.dot(&xc);
            let mut k = head.feature.w_k.dot(&xc);
            if cfg.rope {
                apply_rope(q.view_mut(), self.pos);
                apply_rope(k.view_mut(), self.pos);
            }
            let v = head.w_v.dot(&x);
            let mut phi_q = match cfg.feature {
                FeatureMapKind::SafeExp => column_safe_exp(q.view()),
                kind => elementwise_features(kind, q.view())?,
            };
            phi_q *= scale;
            let phi_k = match cfg.feature {
                FeatureMapKind::SafeExp if key_uses_global_max(cfg) => {
                    let rescale = state.key_max.observe(column_max(k.column(0)));
                    state.rescale(rescale);
                    let mx = state.key_max.running_max().expect("observed");
                    k.mapv(|v| (v - mx).exp())
                }
                FeatureMapKind::SafeExp => column_safe_exp(k.view()),
                kind => elementwise_features(kind, k.view())?,
            };
            gated_update(state, &head.gate, phi_k.column(0), v.view(), x);
            let mut out = read_out(state, phi_q.column(0), cfg.sum_norm)?;
            if cfg.stable_norm {
                stable_norm_inplace(out.view_mut(), head.gain.view());
            }
            inner.slice_mut(s![h * cfg.d..(h + 1) * cfg.d]).assign(&out);
        }
        self.pos += 1;
        Ok(block.w_o.dot(&inner))
    }
}

impl<T: Scalar> Params<T> for AttentionBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let stable = self.config.stable_norm;
        for (h, head) in self.heads.iter().enumerate() {
            for (name, a) in [("w_q", &head.feature.w_q), ("w_k", &head.feature.w_k), ("w_v", &head.w_v)] {
                let shape = [a.nrows(), a.ncols()];
                f(&format!("head{h}.{name}"), &shape, a.as_slice().expect("contiguous"));
            }
            for (name, shape, data) in head.gate.tensors() {
                f(&format!("head{h}.{name}"), &shape, data);
            }
            if stable {
                f(&format!("head{h}.gain"), &[head.gain.len()], head.gain.as_slice().expect("contiguous"));
            }
        }
        f("w_o", &[self.w_o.nrows(), self.w_o.ncols()], self.w_o.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let stable = self.config.stable_norm;
        for (h, head) in self.heads.iter_mut().enumerate() {
            for (name, a) in [
                ("w_q", &mut head.feature.w_q),
                ("w_k", &mut head.feature.w_k),
                ("w_v", &mut head.w_v),
            ] {
                let shape = [a.nrows(), a.ncols()];
                f(&format!("head{h}.{name}"), &shape, a.as_slice_mut().expect("contiguous"));
            }
            for (name, shape, data) in head.gate.tensors_mut() {
                f(&format!("head{h}.{name}"), &shape, data);
            }
            if stable {
                let n = head.gain.len();
                f(&format!("head{h}.gain"), &[n], head.gain.as_slice_mut().expect("contiguous"));
            }
        }
        let shape = [self.w_o.nrows(), self.w_o.ncols()];
        f("w_o", &shape, self.w_o.as_slice_mut().expect("contiguous"));
    }
}
