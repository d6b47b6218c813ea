//! Gate parameters and their per-position activations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::config::GateKind;
use crate::rng::{normal_matrix, normal_vector};
use crate::Scalar;

/// Default bias of the forget gate `g` (mild remember bias).
pub const DEFAULT_FORGET_BIAS: f64 = 1.0;
/// Default bias of the refining gate `r`.
pub const DEFAULT_REFINE_BIAS: f64 = 0.0;

/// Learnable gate parameters. Weight matrices map the block input
/// (`in_dim`) to gate logits. Only the variant of the configured rule exists.
#[derive(Clone, Debug, PartialEq)]
pub enum GateParams<T> {
    None,
    ScalarRfa {
        w_g: Array1<T>,
    },
    DeltaRule {
        w_beta: Array1<T>,
    },
    FastDecay {
        w_z: Array2<T>,
        b_z: Array1<T>,
        w_f: Array2<T>,
        b_f: Array1<T>,
    },
    Regla {
        w_g: Array2<T>,
        b_g: Array1<T>,
        w_r: Array2<T>,
        b_r: Array1<T>,
    },
}

impl<T: Scalar> GateParams<T> {
    pub fn init<R: Rng + ?Sized>(kind: GateKind, rng: &mut R, d: usize, m: usize, in_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        match kind {
            GateKind::None => GateParams::None,
            GateKind::ScalarRfa => GateParams::ScalarRfa {
                w_g: normal_vector(rng, in_dim, std),
            },
            GateKind::DeltaRule => GateParams::DeltaRule {
                w_beta: normal_vector(rng, in_dim, std),
            },
            GateKind::FastDecay => GateParams::FastDecay {
                w_z: normal_matrix(rng, d, in_dim, std),
                b_z: Array1::from_elem(d, T::lit(DEFAULT_FORGET_BIAS)),
                w_f: normal_matrix(rng, m, in_dim, std),
                b_f: Array1::from_elem(m, T::lit(DEFAULT_FORGET_BIAS)),
            },
            GateKind::ReglaRefined => GateParams::Regla {
                w_g: normal_matrix(rng, d, in_dim, std),
                b_g: Array1::from_elem(d, T::lit(DEFAULT_FORGET_BIAS)),
                w_r: normal_matrix(rng, d, in_dim, std),
                b_r: Array1::from_elem(d, T::lit(DEFAULT_REFINE_BIAS)),
            },
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            GateParams::None => GateKind::None,
            GateParams::ScalarRfa { .. } => GateKind::ScalarRfa,
            GateParams::DeltaRule { .. } => GateKind::DeltaRule,
            GateParams::FastDecay { .. } => GateKind::FastDecay,
            GateParams::Regla { .. } => GateKind::ReglaRefined,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        match self {
            GateParams::None => GateParams::None,
            GateParams::ScalarRfa { w_g } => GateParams::ScalarRfa { w_g: z1(w_g) },
            GateParams::DeltaRule { w_beta } => GateParams::DeltaRule { w_beta: z1(w_beta) },
            GateParams::FastDecay { w_z, b_z, w_f, b_f } => GateParams::FastDecay {
                w_z: z2(w_z),
                b_z: z1(b_z),
                w_f: z2(w_f),
                b_f: z1(b_f),
            },
            GateParams::Regla { w_g, b_g, w_r, b_r } => GateParams::Regla {
                w_g: z2(w_g),
                b_g: z1(b_g),
                w_r: z2(w_r),
                b_r: z1(b_r),
            },
        }
    }

    /// Named tensors in a fixed order: `(name, shape, values)`.
    pub(crate) fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        let v1 = |a: &'_ Array1<T>| vec![a.len()];
        let v2 = |a: &'_ Array2<T>| vec![a.nrows(), a.ncols()];
        match self {
            GateParams::None => vec![],
            GateParams::ScalarRfa { w_g } => vec![("gate.w_g", v1(w_g), slice1(w_g))],
            GateParams::DeltaRule { w_beta } => vec![("gate.w_beta", v1(w_beta), slice1(w_beta))],
            GateParams::FastDecay { w_z, b_z, w_f, b_f } => vec![
                ("gate.w_z", v2(w_z), slice2(w_z)),
                ("gate.b_z", v1(b_z), slice1(b_z)),
                ("gate.w_f", v2(w_f), slice2(w_f)),
                ("gate.b_f", v1(b_f), slice1(b_f)),
            ],
            GateParams::Regla { w_g, b_g, w_r, b_r } => vec![
                ("gate.w_g", v2(w_g), slice2(w_g)),
                ("gate.b_g", v1(b_g), slice1(b_g)),
                ("gate.w_r", v2(w_r), slice2(w_r)),
                ("gate.b_r", v1(b_r), slice1(b_r)),
            ],
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, Vec<usize>, &mut [T])> {
        fn m1<T>(a: &mut Array1<T>) -> (Vec<usize>, &mut [T]) {
            (vec![a.len()], a.as_slice_mut().expect("contiguous"))
        }
        fn m2<T>(a: &mut Array2<T>) -> (Vec<usize>, &mut [T]) {
            (vec![a.nrows(), a.ncols()], a.as_slice_mut().expect("contiguous"))
        }
        let tag = |name, (shape, data)| (name, shape, data);
        match self {
            GateParams::None => vec![],
            GateParams::ScalarRfa { w_g } => vec![tag("gate.w_g", m1(w_g))],
            GateParams::DeltaRule { w_beta } => vec![tag("gate.w_beta", m1(w_beta))],
            GateParams::FastDecay { w_z, b_z, w_f, b_f } => vec![
                tag("gate.w_z", m2(w_z)),
                tag("gate.b_z", m1(b_z)),
                tag("gate.w_f", m2(w_f)),
                tag("gate.b_f", m1(b_f)),
            ],
            GateParams::Regla { w_g, b_g, w_r, b_r } => vec![
                tag("gate.w_g", m2(w_g)),
                tag("gate.b_g", m1(b_g)),
                tag("gate.w_r", m2(w_r)),
                tag("gate.b_r", m1(b_r)),
            ],
        }
    }

    /// Gate activations for every column of `x` (`in_dim × L`).
    pub fn activations(&self, x: ArrayView2<T>) -> GateActivations<T> {
        let len = x.ncols();
        match self {
            GateParams::None => GateActivations::None { len },
            GateParams::ScalarRfa { w_g } => GateActivations::ScalarRfa {
                g: w_g.dot(&x).mapv(Scalar::sigmoid),
            },
            GateParams::DeltaRule { w_beta } => GateActivations::DeltaRule {
                beta: w_beta.dot(&x).mapv(Scalar::sigmoid),
            },
            GateParams::FastDecay { w_z, b_z, w_f, b_f } => GateActivations::FastDecay {
                z: affine_sigmoid(w_z, b_z, x),
                f: affine_sigmoid(w_f, b_f, x),
            },
            GateParams::Regla { w_g, b_g, w_r, b_r } => {
                let g = affine_sigmoid(w_g, b_g, x);
                let r = affine_sigmoid(w_r, b_r, x);
                let f = ndarray::Zip::from(&g).and(&r).map_collect(|&g, &r| refined_forget_gate(g, r));
                GateActivations::Regla { g, r, f }
            }
        }
    }
}

fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("contiguous")
}

fn slice2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("contiguous")
}

fn affine_sigmoid<T: Scalar>(w: &Array2<T>, b: &Array1<T>, x: ArrayView2<T>) -> Array2<T> {
    let mut out = w.dot(&x);
    out += &b.view().insert_axis(Axis(1));
    out.mapv_inplace(Scalar::sigmoid);
    out
}

/// `f = (1 - r) g² + r (1 - (1 - g)²)`: interpolates between the lower band
/// `g²` and the upper band `1 - (1 - g)²`.
#[inline]
pub fn refined_forget_gate<T: Scalar>(g: T, r: T) -> T {
    let one = T::one();
    let lower = g * g;
    let upper = one - (one - g) * (one - g);
    (one - r) * lower + r * upper
}

/// Per-position gate activations of one head over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum GateActivations<T> {
    None { len: usize },
    ScalarRfa { g: Array1<T> },
    DeltaRule { beta: Array1<T> },
    FastDecay { z: Array2<T>, f: Array2<T> },
    Regla { g: Array2<T>, r: Array2<T>, f: Array2<T> },
}

/// Elementwise-decay form shared by every rule except the delta rule:
/// `S_t = (row_t colᵀ_t) ⊙ S_{t-1} + write_t v_t φ(k_t)ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decays<T> {
    /// Decay along the value axis, `d × L`.
    pub row: Array2<T>,
    /// Decay along the feature axis, `m × L`.
    pub col: Array2<T>,
    /// Write strength, length `L`.
    pub write: Array1<T>,
}

impl<T: Scalar> GateActivations<T> {
    pub fn len(&self) -> usize {
        match self {
            GateActivations::None { len } => *len,
            GateActivations::ScalarRfa { g } => g.len(),
            GateActivations::DeltaRule { beta } => beta.len(),
            GateActivations::FastDecay { z, .. } => z.ncols(),
            GateActivations::Regla { g, .. } => g.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elementwise-decay view, `None` for the delta rule.
    pub fn decays(&self, d: usize, m: usize) -> Option<Decays<T>> {
        let len = self.len();
        let ones = |r| Array2::ones((r, len));
        Some(match self {
            GateActivations::None { .. } => Decays {
                row: ones(d),
                col: ones(m),
                write: Array1::ones(len),
            },
            GateActivations::ScalarRfa { g } => Decays {
                row: ones(d),
                col: Array2::from_shape_fn((m, len), |(_, t)| g[t]),
                write: g.mapv(|g| T::one() - g),
            },
            GateActivations::DeltaRule { .. } => return None,
            GateActivations::FastDecay { z, f } => Decays {
                row: z.clone(),
                col: f.clone(),
                write: Array1::ones(len),
            },
            GateActivations::Regla { f, .. } => Decays {
                row: f.clone(),
                col: ones(m),
                write: Array1::ones(len),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refined_gate_bands() {
        assert_eq!(refined_forget_gate(0.5f64, 0.0), 0.25);
        assert_eq!(refined_forget_gate(0.5f64, 1.0), 0.75);
        for g in [0.01f64, 0.2, 0.5, 0.77, 0.999] {
            assert!((refined_forget_gate(g, 0.5) - g).abs() < 1e-15);
        }
    }
}
