//! Pre-norm decoder-only stack mixing softmax and linear attention layers.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use regla_core::attention::{AttentionBlock, BlockDecoder, ForwardMode};
use regla_core::gradients::{backward_accumulate, forward_with_tape, BlockTape};
use regla_core::rng::{normal_matrix, stream};
use regla_core::{Params, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{LayerKind, ModelConfig};
use crate::error::{LmError, Result};
use crate::layers::{rms_norm, rms_norm_backward, KvCache, Mlp, MlpTape, SoftmaxBlock, SoftmaxTape};

/// Standard deviation of the output head at initialization; keeps initial
/// logits near zero so the starting loss is close to `ln(vocab)`.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum Attention<T> {
    Softmax(SoftmaxBlock<T>),
    Linear(AttentionBlock<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub norm1: Array1<T>,
    pub attn: Attention<T>,
    pub norm2: Array1<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `model_dim × vocab`.
    pub embed: Array2<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Array1<T>,
    /// `vocab × model_dim`.
    pub head: Array2<T>,
}

struct LayerTape<T> {
    x_in: Array2<T>,
    h1: Array2<T>,
    rms1: Array1<T>,
    attn: Vec<AttnTape<T>>,
    drop1: Option<Array2<T>>,
    x_mid: Array2<T>,
    h2: Array2<T>,
    rms2: Array1<T>,
    mlp: MlpTape<T>,
    drop2: Option<Array2<T>>,
}

enum AttnTape<T> {
    Softmax(SoftmaxTape<T>),
    Linear(BlockTape<T>),
}

/// Recorded training forward.
pub struct ModelTape<T> {
    tokens: Vec<usize>,
    seq_len: usize,
    layers: Vec<LayerTape<T>>,
    x_last: Array2<T>,
    final_rms: Array1<T>,
    x_final: Array2<T>,
}

/// Per-layer activation summary used in diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: LayerKind,
    pub residual_rms: f64,
    pub residual_max_abs: f64,
    pub attn_rms: f64,
    pub non_finite: usize,
    pub error: Option<String>,
}

fn flatten_tokens(inputs: &[Vec<usize>]) -> Result<(Vec<usize>, usize)> {
    let seq_len = inputs.first().map_or(0, Vec::len);
    if seq_len == 0 || inputs.iter().any(|s| s.len() != seq_len) {
        return Err(LmError::Task("batch sequences must be non-empty and of equal length".into()));
    }
    Ok((inputs.iter().flatten().copied().collect(), seq_len))
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep })
}

fn rms_of<T: Scalar>(a: &Array2<T>) -> (f64, f64, usize) {
    let mut sum = 0.0;
    let mut mx = 0.0f64;
    let mut bad = 0;
    for &v in a.iter() {
        let v = v.as_f64();
        if v.is_finite() {
            sum += v * v;
            mx = mx.max(v.abs());
        } else {
            bad += 1;
        }
    }
    ((sum / a.len().max(1) as f64).sqrt(), mx, bad)
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = config.model_dim();
        let mut rng = stream(seed, &[0x656d_6265_64]);
        let embed = normal_matrix(&mut rng, dim, config.vocab, 1.0);
        let head = normal_matrix(&mut rng, config.vocab, dim, HEAD_INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, kind) in config.hybrid_pattern.iter().enumerate() {
            let mut rng = stream(seed, &[i as u64, *kind as u64 + 1]);
            let attn = match kind {
                LayerKind::Softmax => {
                    Attention::Softmax(SoftmaxBlock::init(&mut rng, dim, config.n_heads, config.head_dim, config.rope))
                }
                LayerKind::Linear => Attention::Linear(AttentionBlock::init(config.linear_attention(), dim, &mut rng)?),
            };
            let mlp = Mlp::init(&mut rng, dim, config.mlp_dim);
            layers.push(Layer {
                norm1: Array1::ones(dim),
                attn,
                norm2: Array1::ones(dim),
                mlp,
            });
        }
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: Array1::ones(dim),
            head,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: Array2::zeros(self.embed.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    norm1: Array1::zeros(l.norm1.raw_dim()),
                    attn: match &l.attn {
                        Attention::Softmax(b) => Attention::Softmax(b.zeros_like()),
                        Attention::Linear(b) => Attention::Linear(b.zeros_like()),
                    },
                    norm2: Array1::zeros(l.norm2.raw_dim()),
                    mlp: l.mlp.zeros_like(),
                })
                .collect(),
            final_norm: Array1::zeros(self.final_norm.raw_dim()),
            head: Array2::zeros(self.head.raw_dim()),
        }
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Array2<T>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(LmError::Task(format!("token {bad} outside vocab {}", self.config.vocab)));
        }
        Ok(self.embed.select(Axis(1), tokens))
    }

    /// Logits (`vocab × (batch · L)`) for equal-length token sequences.
    /// `mode` selects how linear layers are evaluated.
    pub fn forward(&self, inputs: &[Vec<usize>], mode: ForwardMode) -> Result<Array2<T>> {
        let (tokens, seq_len) = flatten_tokens(inputs)?;
        let mut x = self.embed_tokens(&tokens)?;
        for layer in &self.layers {
            let (h, _) = rms_norm(x.view(), layer.norm1.view());
            let a = attention_forward(&layer.attn, h.view(), seq_len, mode)?;
            x += &a;
            let (h2, _) = rms_norm(x.view(), layer.norm2.view());
            let (m, _) = layer.mlp.forward(h2.view());
            x += &m;
        }
        let (xf, _) = rms_norm(x.view(), self.final_norm.view());
        Ok(self.head.dot(&xf))
    }

    /// Training forward with dropout on both residual branches, recording a tape.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        inputs: &[Vec<usize>],
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Array2<T>, ModelTape<T>)> {
        let (tokens, seq_len) = flatten_tokens(inputs)?;
        let mut x = self.embed_tokens(&tokens)?;
        let n = x.ncols();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            let (h1, rms1) = rms_norm(x.view(), layer.norm1.view());
            let mut a = Array2::zeros(x.raw_dim());
            let mut attn = Vec::with_capacity(n / seq_len);
            for start in (0..n).step_by(seq_len) {
                let cols = s![.., start..start + seq_len];
                match &layer.attn {
                    Attention::Softmax(b) => {
                        let (y, t) = b.forward(h1.slice(cols));
                        a.slice_mut(cols).assign(&y);
                        attn.push(AttnTape::Softmax(t));
                    }
                    Attention::Linear(b) => {
                        let (y, t) = forward_with_tape(b, h1.slice(cols))?;
                        a.slice_mut(cols).assign(&y);
                        attn.push(AttnTape::Linear(t));
                    }
                }
            }
            let drop1 = (dropout > 0.0).then(|| dropout_mask(rng, a.dim(), dropout));
            if let Some(mask) = &drop1 {
                a *= mask;
            }
            x += &a;
            let x_mid = x.clone();
            let (h2, rms2) = rms_norm(x.view(), layer.norm2.view());
            let (mut m, mlp) = layer.mlp.forward(h2.view());
            let drop2 = (dropout > 0.0).then(|| dropout_mask(rng, m.dim(), dropout));
            if let Some(mask) = &drop2 {
                m *= mask;
            }
            x += &m;
            tapes.push(LayerTape {
                x_in,
                h1,
                rms1,
                attn,
                drop1,
                x_mid,
                h2,
                rms2,
                mlp,
                drop2,
            });
        }
        let (xf, final_rms) = rms_norm(x.view(), self.final_norm.view());
        let logits = self.head.dot(&xf);
        Ok((
            logits,
            ModelTape {
                tokens,
                seq_len,
                layers: tapes,
                x_last: x,
                final_rms,
                x_final: xf,
            },
        ))
    }

    /// Gradients of a loss with upstream `dlogits`, in a model-shaped container.
    pub fn backward(&self, tape: &ModelTape<T>, dlogits: ArrayView2<T>) -> Result<Model<T>> {
        let mut g = self.zeros_like();
        g.head = dlogits.dot(&tape.x_final.t());
        let dxf = self.head.t().dot(&dlogits);
        let mut dx = Array2::zeros(tape.x_last.raw_dim());
        rms_norm_backward(
            tape.x_last.view(),
            tape.final_rms.view(),
            self.final_norm.view(),
            dxf.view(),
            dx.view_mut(),
            &mut g.final_norm,
        );
        let seq_len = tape.seq_len;
        for (i, (layer, lt)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let gl = &mut g.layers[i];
            let mut dm = dx.clone();
            if let Some(mask) = &lt.drop2 {
                dm *= mask;
            }
            let dh2 = layer.mlp.backward(lt.h2.view(), &lt.mlp, dm.view(), &mut gl.mlp);
            rms_norm_backward(lt.x_mid.view(), lt.rms2.view(), layer.norm2.view(), dh2.view(), dx.view_mut(), &mut gl.norm2);
            let mut da = dx.clone();
            if let Some(mask) = &lt.drop1 {
                da *= mask;
            }
            let mut dh1 = Array2::zeros(lt.h1.raw_dim());
            for (b, at) in lt.attn.iter().enumerate() {
                let cols = s![.., b * seq_len..(b + 1) * seq_len];
                match (&layer.attn, at, &mut gl.attn) {
                    (Attention::Softmax(blk), AttnTape::Softmax(t), Attention::Softmax(gb)) => {
                        let d = blk.backward(lt.h1.slice(cols), t, da.slice(cols), gb);
                        dh1.slice_mut(cols).assign(&d);
                    }
                    (Attention::Linear(blk), AttnTape::Linear(t), Attention::Linear(gb)) => {
                        backward_accumulate(blk, t, da.slice(cols), gb, dh1.slice_mut(cols))?;
                    }
                    _ => return Err(LmError::Config("tape does not match the model".into())),
                }
            }
            rms_norm_backward(lt.x_in.view(), lt.rms1.view(), layer.norm1.view(), dh1.view(), dx.view_mut(), &mut gl.norm1);
        }
        for (col, &tok) in dx.columns().into_iter().zip(&tape.tokens) {
            let mut e = g.embed.column_mut(tok);
            e += &col;
        }
        Ok(g)
    }

    /// Activation summary per layer; stops at the first failing layer.
    pub fn activation_stats(&self, inputs: &[Vec<usize>]) -> Vec<LayerStats> {
        let mut out = Vec::new();
        let Ok((tokens, seq_len)) = flatten_tokens(inputs) else {
            return out;
        };
        let Ok(mut x) = self.embed_tokens(&tokens) else {
            return out;
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = match layer.attn {
                Attention::Softmax(_) => LayerKind::Softmax,
                Attention::Linear(_) => LayerKind::Linear,
            };
            let (h, _) = rms_norm(x.view(), layer.norm1.view());
            let (rms, mx, bad) = rms_of(&x);
            let mut stats = LayerStats {
                layer: i,
                kind,
                residual_rms: rms,
                residual_max_abs: mx,
                attn_rms: f64::NAN,
                non_finite: bad,
                error: None,
            };
            match attention_forward(&layer.attn, h.view(), seq_len, ForwardMode::Recurrent) {
                Ok(a) => {
                    let (ar, _, abad) = rms_of(&a);
                    stats.attn_rms = ar;
                    stats.non_finite += abad;
                    x += &a;
                    let (h2, _) = rms_norm(x.view(), layer.norm2.view());
                    x += &layer.mlp.forward(h2.view()).0;
                    out.push(stats);
                }
                Err(e) => {
                    stats.error = Some(e.to_string());
                    out.push(stats);
                    break;
                }
            }
        }
        out
    }

    /// Normalized attention inputs of every layer for one batch.
    pub fn attention_inputs(&self, inputs: &[Vec<usize>]) -> Result<(Vec<Array2<T>>, usize)> {
        let (tokens, seq_len) = flatten_tokens(inputs)?;
        let mut x = self.embed_tokens(&tokens)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (h, _) = rms_norm(x.view(), layer.norm1.view());
            let a = attention_forward(&layer.attn, h.view(), seq_len, self.config.default_mode())?;
            out.push(h);
            x += &a;
            let (h2, _) = rms_norm(x.view(), layer.norm2.view());
            x += &layer.mlp.forward(h2.view()).0;
        }
        Ok((out, seq_len))
    }

    pub fn decoder(&self) -> ModelDecoder<T> {
        ModelDecoder {
            layers: self
                .layers
                .iter()
                .map(|l| match &l.attn {
                    Attention::Softmax(_) => LayerDecoder::Softmax(KvCache::default()),
                    Attention::Linear(b) => LayerDecoder::Linear(b.decoder()),
                })
                .collect(),
        }
    }

    /// Greedy continuation of `prompt` by `gen_len` tokens.
    pub fn generate_greedy(&self, prompt: &[usize], gen_len: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(LmError::Task("empty prompt".into()));
        }
        let mut dec = self.decoder();
        let mut logits = Array1::zeros(0);
        for &t in prompt {
            logits = dec.step(self, t)?;
        }
        let mut out = Vec::with_capacity(gen_len);
        for i in 0..gen_len {
            let next = argmax(logits.view());
            out.push(next);
            if i + 1 < gen_len {
                logits = dec.step(self, next)?;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax<T: Scalar>(v: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn attention_forward<T: Scalar>(attn: &Attention<T>, h: ArrayView2<T>, seq_len: usize, mode: ForwardMode) -> Result<Array2<T>> {
    Ok(match attn {
        Attention::Linear(b) => b.forward_batch(h, seq_len, mode)?,
        Attention::Softmax(b) => {
            let mut out = Array2::zeros(h.raw_dim());
            for start in (0..h.ncols()).step_by(seq_len) {
                let cols = s![.., start..start + seq_len];
                out.slice_mut(cols).assign(&b.forward(h.slice(cols)).0);
            }
            out
        }
    })
}

enum LayerDecoder<T> {
    Softmax(KvCache<T>),
    Linear(BlockDecoder<T>),
}

/// Incremental decoder over a whole model.
pub struct ModelDecoder<T> {
    layers: Vec<LayerDecoder<T>>,
}

impl<T: Scalar> ModelDecoder<T> {
    /// Consumes one token; returns next-token logits.
    pub fn step(&mut self, model: &Model<T>, token: usize) -> Result<Array1<T>> {
        if token >= model.config.vocab {
            return Err(LmError::Task(format!("token {token} outside vocab")));
        }
        let mut x = model.embed.column(token).to_owned();
        for (layer, dec) in model.layers.iter().zip(self.layers.iter_mut()) {
            let h = norm_vec(&x, &layer.norm1);
            let a = match (&layer.attn, dec) {
                (Attention::Softmax(b), LayerDecoder::Softmax(c)) => c.step(b, h.view()),
                (Attention::Linear(b), LayerDecoder::Linear(d)) => d.step(b, h.view())?,
                _ => unreachable!("decoder built from this model"),
            };
            x += &a;
            let h2 = norm_vec(&x, &layer.norm2);
            let m = layer.mlp.forward(h2.view().insert_axis(Axis(1))).0;
            x += &m.column(0);
        }
        let xf = norm_vec(&x, &model.final_norm);
        Ok(model.head.dot(&xf))
    }

    /// Attention-state bytes currently held (KV caches plus recurrent states).
    pub fn state_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerDecoder::Softmax(c) => c.state_bytes(),
                LayerDecoder::Linear(d) => d.state_bytes(),
            })
            .sum()
    }
}

fn norm_vec<T: Scalar>(x: &Array1<T>, gain: &Array1<T>) -> Array1<T> {
    let mut h = x.clone();
    regla_core::attention::stable_norm_inplace(h.view_mut(), gain.view());
    h
}

fn visit_mat<T>(f: &mut dyn FnMut(&str, &[usize], &[T]), name: &str, a: &Array2<T>) {
    f(name, &[a.nrows(), a.ncols()], a.as_slice().expect("contiguous"));
}

fn visit_vec<T>(f: &mut dyn FnMut(&str, &[usize], &[T]), name: &str, a: &Array1<T>) {
    f(name, &[a.len()], a.as_slice().expect("contiguous"));
}

fn visit_mat_mut<T>(f: &mut dyn FnMut(&str, &[usize], &mut [T]), name: &str, a: &mut Array2<T>) {
    let shape = [a.nrows(), a.ncols()];
    f(name, &shape, a.as_slice_mut().expect("contiguous"));
}

fn visit_vec_mut<T>(f: &mut dyn FnMut(&str, &[usize], &mut [T]), name: &str, a: &mut Array1<T>) {
    let shape = [a.len()];
    f(name, &shape, a.as_slice_mut().expect("contiguous"));
}

impl<T: Scalar> Params<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_mat(f, "embed", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            visit_vec(f, &format!("layer{i}.norm1"), &l.norm1);
            match &l.attn {
                Attention::Softmax(b) => {
                    for (n, a) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_o", &b.w_o)] {
                        visit_mat(f, &format!("layer{i}.attn.{n}"), a);
                    }
                }
                Attention::Linear(b) => b.visit(&mut |n, s, v| f(&format!("layer{i}.attn.{n}"), s, v)),
            }
            visit_vec(f, &format!("layer{i}.norm2"), &l.norm2);
            visit_mat(f, &format!("layer{i}.mlp.w1"), &l.mlp.w1);
            visit_vec(f, &format!("layer{i}.mlp.b1"), &l.mlp.b1);
            visit_mat(f, &format!("layer{i}.mlp.w2"), &l.mlp.w2);
            visit_vec(f, &format!("layer{i}.mlp.b2"), &l.mlp.b2);
        }
        visit_vec(f, "final_norm", &self.final_norm);
        visit_mat(f, "head", &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_mat_mut(f, "embed", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_vec_mut(f, &format!("layer{i}.norm1"), &mut l.norm1);
            match &mut l.attn {
                Attention::Softmax(b) => {
                    for (n, a) in [("w_q", &mut b.w_q), ("w_k", &mut b.w_k), ("w_v", &mut b.w_v), ("w_o", &mut b.w_o)] {
                        visit_mat_mut(f, &format!("layer{i}.attn.{n}"), a);
                    }
                }
                Attention::Linear(b) => b.visit_mut(&mut |n, s, v| f(&format!("layer{i}.attn.{n}"), s, v)),
            }
            visit_vec_mut(f, &format!("layer{i}.norm2"), &mut l.norm2);
            visit_mat_mut(f, &format!("layer{i}.mlp.w1"), &mut l.mlp.w1);
            visit_vec_mut(f, &format!("layer{i}.mlp.b1"), &mut l.mlp.b1);
            visit_mat_mut(f, &format!("layer{i}.mlp.w2"), &mut l.mlp.w2);
            visit_vec_mut(f, &format!("layer{i}.mlp.b2"), &mut l.mlp.b2);
        }
        visit_vec_mut(f, "final_norm", &mut self.final_norm);
        visit_mat_mut(f, "head", &mut self.head);
    }
}

/// Mean cross-entropy over positions with a target, the number of correct
/// argmax predictions, the number of targets and `∂loss/∂logits`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<T>, targets: &[Option<usize>]) -> Result<(f64, usize, usize, Array2<T>)> {
    if targets.len() != logits.ncols() {
        return Err(LmError::Task("targets do not match logits".into()));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    if count == 0 {
        return Ok((0.0, 0, 0, dlogits));
    }
    let inv = T::one() / T::from_usize_lossy(count);
    let mut loss = 0.0;
    let mut correct = 0;
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let col = logits.column(t);
        let mx = col.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        let mut dcol = dlogits.column_mut(t);
        Zip::from(&mut dcol).and(&col).for_each(|d, &l| {
            *d = (l - mx).exp();
            z += *d;
        });
        loss += (z.ln() + mx - col[y]).as_f64();
        if argmax(col) == y {
            correct += 1;
        }
        dcol.mapv_inplace(|p| p / z * inv);
        dcol[y] -= inv;
    }
    Ok((loss / count as f64, correct, count, dlogits))
}
