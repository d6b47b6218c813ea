//! Sub-layers of the decoder: causal softmax attention (with a KV-cache
//! decoder), the GELU MLP and RMS normalization over columns.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use regla_core::attention::{apply_rope, apply_rope_inverse, rms_floor, stable_norm_backward};
use regla_core::rng::normal_matrix;
use regla_core::Scalar;

/// Columnwise `gain ⊙ x / rms(x)`; returns the output and the denominators.
pub fn rms_norm<T: Scalar>(x: ArrayView2<T>, gain: ArrayView1<T>) -> (Array2<T>, Array1<T>) {
    let mut out = x.to_owned();
    let mut denom = Array1::zeros(x.ncols());
    for (t, mut col) in out.columns_mut().into_iter().enumerate() {
        let r = rms_floor(col.view());
        denom[t] = r;
        let inv = T::one() / r;
        Zip::from(&mut col).and(&gain).for_each(|v, &g| *v = *v * inv * g);
    }
    (out, denom)
}

/// Adds the input gradient into `dx` and the gain gradient into `dgain`.
pub fn rms_norm_backward<T: Scalar>(
    x: ArrayView2<T>,
    denom: ArrayView1<T>,
    gain: ArrayView1<T>,
    dy: ArrayView2<T>,
    mut dx: ArrayViewMut2<T>,
    dgain: &mut Array1<T>,
) {
    let mut buf = Array1::zeros(x.nrows());
    for t in 0..x.ncols() {
        stable_norm_backward(x.column(t), denom[t], gain, dy.column(t), buf.view_mut(), dgain.view_mut());
        let mut col = dx.column_mut(t);
        col += &buf;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    pub pre: Array2<T>,
    pub act: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            w1: normal_matrix(rng, hidden, dim, 1.0 / (dim as f64).sqrt()),
            b1: Array1::zeros(hidden),
            w2: normal_matrix(rng, dim, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, MlpTape<T>) {
        let mut pre = self.w1.dot(&x);
        pre += &self.b1.view().insert_axis(Axis(1));
        let act = pre.mapv(gelu);
        let mut out = self.w2.dot(&act);
        out += &self.b2.view().insert_axis(Axis(1));
        (out, MlpTape { pre, act })
    }

    /// Returns the input gradient; accumulates parameter gradients into `g`.
    pub fn backward(&self, x: ArrayView2<T>, tape: &MlpTape<T>, dy: ArrayView2<T>, g: &mut Mlp<T>) -> Array2<T> {
        g.w2 += &dy.dot(&tape.act.t());
        g.b2 += &dy.sum_axis(Axis(1));
        let mut dpre = self.w2.t().dot(&dy);
        Zip::from(&mut dpre).and(&tape.pre).for_each(|d, &p| *d = *d * gelu_grad(p));
        g.w1 += &dpre.dot(&x.t());
        g.b1 += &dpre.sum_axis(Axis(1));
        self.w1.t().dot(&dpre)
    }
}

/// Multi-head causal softmax attention with optional RoPE.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxBlock<T> {
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope: bool,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct SoftmaxTape<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per head, `[j, i]` attention weights of query `i` on key `j`.
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
}

impl<T: Scalar> SoftmaxBlock<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, model_dim: usize, n_heads: usize, head_dim: usize, rope: bool) -> Self {
        let inner = n_heads * head_dim;
        let std_in = 1.0 / (model_dim as f64).sqrt();
        Self {
            n_heads,
            head_dim,
            rope,
            w_q: normal_matrix(rng, inner, model_dim, std_in),
            w_k: normal_matrix(rng, inner, model_dim, std_in),
            w_v: normal_matrix(rng, inner, model_dim, std_in),
            w_o: normal_matrix(rng, model_dim, inner, 1.0 / (inner as f64).sqrt()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        Self {
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            rope: self.rope,
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_o: z(&self.w_o),
        }
    }

    fn rope_heads(&self, mut x: ArrayViewMut2<T>, start: usize, inverse: bool) {
        if !self.rope {
            return;
        }
        for h in 0..self.n_heads {
            let view = x.slice_mut(s![h * self.head_dim..(h + 1) * self.head_dim, ..]);
            if inverse {
                apply_rope_inverse(view, start);
            } else {
                apply_rope(view, start);
            }
        }
    }

    /// Forward over one sequence (`model_dim × L`).
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, SoftmaxTape<T>) {
        let mut q = self.w_q.dot(&x);
        let mut k = self.w_k.dot(&x);
        let v = self.w_v.dot(&x);
        self.rope_heads(q.view_mut(), 0, false);
        self.rope_heads(k.view_mut(), 0, false);
        let len = x.ncols();
        let dh = self.head_dim;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut concat = Array2::zeros((self.n_heads * dh, len));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let rows = s![h * dh..(h + 1) * dh, ..];
            let mut p = k.slice(rows).t().dot(&q.slice(rows));
            for i in 0..len {
                let mut col = p.column_mut(i);
                let mx = (0..=i).fold(T::neg_infinity(), |a, j| a.max(col[j] * scale));
                let mut z = T::zero();
                for j in 0..len {
                    col[j] = if j <= i { (col[j] * scale - mx).exp() } else { T::zero() };
                    z += col[j];
                }
                col.mapv_inplace(|e| e / z);
            }
            concat.slice_mut(rows).assign(&v.slice(rows).dot(&p));
            probs.push(p);
        }
        let y = self.w_o.dot(&concat);
        (y, SoftmaxTape { q, k, v, probs, concat })
    }

    /// Returns the input gradient; accumulates parameter gradients into `g`.
    pub fn backward(&self, x: ArrayView2<T>, tape: &SoftmaxTape<T>, dy: ArrayView2<T>, g: &mut SoftmaxBlock<T>) -> Array2<T> {
        g.w_o += &dy.dot(&tape.concat.t());
        let dconcat = self.w_o.t().dot(&dy);
        let dh = self.head_dim;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dq = Array2::zeros(tape.q.raw_dim());
        let mut dk = Array2::zeros(tape.k.raw_dim());
        let mut dv = Array2::zeros(tape.v.raw_dim());
        for h in 0..self.n_heads {
            let rows = s![h * dh..(h + 1) * dh, ..];
            let p = &tape.probs[h];
            let dout = dconcat.slice(rows);
            dv.slice_mut(rows).assign(&dout.dot(&p.t()));
            let mut ds = tape.v.slice(rows).t().dot(&dout);
            for i in 0..p.ncols() {
                let col_p = p.column(i);
                let mut col = ds.column_mut(i);
                let dot = col_p.dot(&col);
                Zip::from(&mut col).and(&col_p).for_each(|d, &pp| *d = pp * (*d - dot) * scale);
            }
            dq.slice_mut(rows).assign(&tape.k.slice(rows).dot(&ds));
            dk.slice_mut(rows).assign(&tape.q.slice(rows).dot(&ds.t()));
        }
        self.rope_heads(dq.view_mut(), 0, true);
        self.rope_heads(dk.view_mut(), 0, true);
        g.w_q += &dq.dot(&x.t());
        g.w_k += &dk.dot(&x.t());
        g.w_v += &dv.dot(&x.t());
        let mut dx = self.w_q.t().dot(&dq);
        dx += &self.w_k.t().dot(&dk);
        dx += &self.w_v.t().dot(&dv);
        dx
    }
}

/// Growing key/value cache for incremental softmax decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

impl<T: Scalar> Default for KvCache<T> {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes held by cached keys and values.
    pub fn state_bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<T>()
    }

    /// One decoding step; returns the block output for `x` (length `model_dim`).
    pub fn step(&mut self, block: &SoftmaxBlock<T>, x: ArrayView1<T>) -> Array1<T> {
        let xc = x.insert_axis(Axis(1));
        let mut q = block.w_q.dot(&xc);
        let mut k = block.w_k.dot(&xc);
        let v = block.w_v.dot(&x);
        block.rope_heads(q.view_mut(), self.len, false);
        block.rope_heads(k.view_mut(), self.len, false);
        self.keys.extend(k.iter());
        self.values.extend(v.iter());
        self.len += 1;
        let inner = block.n_heads * block.head_dim;
        let keys = ArrayView2::from_shape((self.len, inner), &self.keys).expect("cache layout");
        let values = ArrayView2::from_shape((self.len, inner), &self.values).expect("cache layout");
        let dh = block.head_dim;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut concat = Array1::zeros(inner);
        for h in 0..block.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores: Array1<T> = keys.slice(cols).dot(&q.slice(s![h * dh..(h + 1) * dh, 0])) * scale;
            let mx = scores.fold(T::neg_infinity(), |a, &b| a.max(b));
            let w = scores.mapv(|e| (e - mx).exp());
            let z = w.sum();
            let out = values.slice(cols).t().dot(&w) / z;
            concat.slice_mut(s![h * dh..(h + 1) * dh]).assign(&out);
        }
        block.w_o.dot(&concat)
    }
}
