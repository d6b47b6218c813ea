//! Kernel feature maps `φ` for linear attention, including the max-shifted
//! ("safe") exponential map and the variance-reduction scaling factors.
//!
//! Matrices follow the column-per-position convention: a `d × L` input holds
//! one position per column.

use std::f64::consts::E;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::normal_matrix;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    Identity,
    Relu,
    EluPlusOne,
    CosSin,
    SafeExp,
}

impl FeatureMapKind {
    pub const ALL: [FeatureMapKind; 5] = [
        FeatureMapKind::Identity,
        FeatureMapKind::Relu,
        FeatureMapKind::EluPlusOne,
        FeatureMapKind::CosSin,
        FeatureMapKind::SafeExp,
    ];

    /// Output dimension `m` for an input of dimension `d`.
    pub fn feature_dim(self, d: usize) -> usize {
        match self {
            FeatureMapKind::CosSin => 2 * d,
            _ => d,
        }
    }

    /// Whether every feature value is bounded for arbitrary finite input.
    pub fn is_bounded(self) -> bool {
        matches!(self, FeatureMapKind::CosSin | FeatureMapKind::SafeExp)
    }

    /// Whether every feature value is `>= 0`.
    pub fn is_non_negative(self) -> bool {
        matches!(
            self,
            FeatureMapKind::Relu | FeatureMapKind::EluPlusOne | FeatureMapKind::SafeExp
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMapKind::Identity => "identity",
            FeatureMapKind::Relu => "relu",
            FeatureMapKind::EluPlusOne => "elu_plus_one",
            FeatureMapKind::CosSin => "cos_sin",
            FeatureMapKind::SafeExp => "safe_exp",
        }
    }
}

impl std::str::FromStr for FeatureMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" | "id" => FeatureMapKind::Identity,
            "relu" => FeatureMapKind::Relu,
            "elu" | "elu_plus_one" | "elu1" => FeatureMapKind::EluPlusOne,
            "cos_sin" | "cossin" => FeatureMapKind::CosSin,
            "safe_exp" | "exp" | "safeexp" => FeatureMapKind::SafeExp,
            other => return Err(Error::Domain(format!("unknown feature map {other:?}"))),
        })
    }
}

/// Learnable transforms applied inside `φ_q` and `φ_k`. Each is `d × in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
}

impl<T: Scalar> FeatureParams<T> {
    /// Gaussian initialization with standard deviation `1/sqrt(in_dim)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, in_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            w_q: normal_matrix(rng, d, in_dim, std),
            w_k: normal_matrix(rng, d, in_dim, std),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
        }
    }
}

/// Running maximum of the key pre-activations seen so far in a decode stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamingMaxState<T> {
    running_max: T,
    initialized: bool,
}

impl<T: Scalar> Default for StreamingMaxState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> StreamingMaxState<T> {
    pub fn new() -> Self {
        Self {
            running_max: T::neg_infinity(),
            initialized: false,
        }
    }

    pub fn running_max(&self) -> Option<T> {
        self.initialized.then_some(self.running_max)
    }

    /// Folds the maximum of a new key column into the running max and returns
    /// the factor `exp(M_prev - M_new) <= 1` that previously accumulated key
    /// features (and anything linear in them) must be multiplied by.
    pub fn observe(&mut self, column_max: T) -> T {
        if !self.initialized {
            self.running_max = column_max;
            self.initialized = true;
            return T::one();
        }
        if column_max > self.running_max {
            let rescale = (self.running_max - column_max).exp();
            self.running_max = column_max;
            rescale
        } else {
            T::one()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyMaxMode {
    /// One max over every dimension and position of the sequence.
    FullSequence,
    /// Causal running max, updated position by position.
    Streaming,
}

/// Applies an elementwise feature map columnwise. `SafeExp` is rejected: it
/// needs the query/key-specific max subtraction.
pub fn apply_feature_map<T: Scalar>(kind: FeatureMapKind, z: ArrayView2<T>) -> Result<Array2<T>> {
    ensure_finite(z.iter(), "feature map input")?;
    elementwise_features(kind, z)
}

pub(crate) fn elementwise_features<T: Scalar>(
    kind: FeatureMapKind,
    z: ArrayView2<T>,
) -> Result<Array2<T>> {
    let zero = T::zero();
    Ok(match kind {
        FeatureMapKind::Identity => z.to_owned(),
        FeatureMapKind::Relu => z.mapv(|v| v.max(zero)),
        FeatureMapKind::EluPlusOne => z.mapv(elu_plus_one),
        FeatureMapKind::CosSin => {
            let (d, l) = z.dim();
            let mut out = Array2::zeros((2 * d, l));
            out.slice_mut(ndarray::s![..d, ..]).assign(&z.mapv(|v| v.cos()));
            out.slice_mut(ndarray::s![d.., ..]).assign(&z.mapv(|v| v.sin()));
            out
        }
        FeatureMapKind::SafeExp => return Err(Error::SafeExpNeedsDedicatedOp),
    })
}

#[inline]
pub(crate) fn elu_plus_one<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + T::one()
    } else {
        v.exp()
    }
}

/// Per-column max subtraction followed by `exp`. Every column attains 1.
pub(crate) fn column_safe_exp<T: Scalar>(y: ArrayView2<T>) -> Array2<T> {
    let mut out = y.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let m = column_max(col.view());
        col.mapv_inplace(|v| (v - m).exp());
    }
    out
}

pub(crate) fn column_max<T: Scalar>(col: ArrayView1<T>) -> T {
    col.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
}

/// Global max subtraction followed by `exp`; returns the features and the max.
pub(crate) fn global_safe_exp<T: Scalar>(y: ArrayView2<T>) -> (Array2<T>, T) {
    let m = y.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    (y.mapv(|v| (v - m).exp()), m)
}

/// `φ_q(X) = exp(W_q X - max_i (W_q X)_i)`, max taken per position.
pub fn safe_exp_query<T: Scalar>(params: &FeatureParams<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    ensure_finite(x.iter(), "safe_exp_query input")?;
    check_cols(&params.w_q, x)?;
    Ok(column_safe_exp(params.w_q.dot(&x).view()))
}

/// `φ_k(X) = exp(W_k X - M)`.
///
/// In `FullSequence` mode `M` is the max over all dimensions and positions and
/// the returned rescale sequence is all ones. In `Streaming` mode `M` is the
/// running max up to each position; entry `t` of the rescale sequence is the
/// factor the caller must apply to state accumulated before position `t`.
pub fn safe_exp_key<T: Scalar>(
    params: &FeatureParams<T>,
    x: ArrayView2<T>,
    mode: KeyMaxMode,
    state: Option<&mut StreamingMaxState<T>>,
) -> Result<(Array2<T>, Vec<T>)> {
    ensure_finite(x.iter(), "safe_exp_key input")?;
    check_cols(&params.w_k, x)?;
    let y = params.w_k.dot(&x);
    match mode {
        KeyMaxMode::FullSequence => {
            let (features, _) = global_safe_exp(y.view());
            Ok((features, vec![T::one(); y.ncols()]))
        }
        KeyMaxMode::Streaming => {
            let state = state.ok_or(Error::MissingStreamingState)?;
            let mut out = y;
            let mut rescale = Vec::with_capacity(out.ncols());
            for mut col in out.axis_iter_mut(Axis(1)) {
                rescale.push(state.observe(column_max(col.view())));
                let m = state.running_max;
                col.mapv_inplace(|v| (v - m).exp());
            }
            Ok((out, rescale))
        }
    }
}

fn check_cols<T>(w: &Array2<T>, x: ArrayView2<T>) -> Result<()> {
    if w.ncols() != x.nrows() {
        return Err(Error::Shape(format!(
            "feature transform is {}x{} but input has {} rows",
            w.nrows(),
            w.ncols(),
            x.nrows()
        )));
    }
    Ok(())
}

/// Multiplier applied to the feature inner product.
///
/// Identity uses `1/sqrt(d)`; SafeExp uses the variance-reduction factor
/// `1/(e*sqrt(d(e^2-1)))` that gives unit variance to a sum of `d` products of
/// exponentials of standard normals; the remaining maps use `1/sqrt(m)`.
pub fn scaling_factor<T: Scalar>(kind: FeatureMapKind, d: usize) -> Result<T> {
    if d == 0 {
        return Err(Error::Domain("scaling factor needs d >= 1".into()));
    }
    let df = d as f64;
    let s = match kind {
        FeatureMapKind::Identity => 1.0 / df.sqrt(),
        FeatureMapKind::SafeExp => variance_reduction_factor(d),
        other => 1.0 / (other.feature_dim(d) as f64).sqrt(),
    };
    Ok(T::lit(s))
}

pub fn variance_reduction_factor(d: usize) -> f64 {
    1.0 / (E * (d as f64 * (E * E - 1.0)).sqrt())
}
