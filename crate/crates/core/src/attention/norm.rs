use ndarray::{Array1, ArrayView1, ArrayViewMut1};

use crate::Scalar;

/// Floor on the root-mean-square below which the input is treated as zero scale.
pub const STABLE_NORM_EPS: f64 = 1e-6;

/// RMS-style normalization with a learnable gain and no bias:
/// `gain ⊙ h / max(rms(h), ε)`.
///
/// The floor (rather than an additive `ε` under the square root) keeps the
/// output exactly invariant to positive rescaling of `h` whenever
/// `rms(h) >= ε`, which is what makes the key-max choice output-neutral.
pub fn stable_norm<T: Scalar>(h: ArrayView1<T>, gain: ArrayView1<T>) -> Array1<T> {
    let mut out = h.to_owned();
    stable_norm_inplace(out.view_mut(), gain);
    out
}

/// Normalizes in place and returns the denominator used.
pub fn stable_norm_inplace<T: Scalar>(mut h: ArrayViewMut1<T>, gain: ArrayView1<T>) -> T {
    let denom = rms_floor(h.view());
    let inv = T::one() / denom;
    for (v, &g) in h.iter_mut().zip(gain.iter()) {
        *v = *v * inv * g;
    }
    denom
}

pub fn rms_floor<T: Scalar>(h: ArrayView1<T>) -> T {
    let n = T::from_usize_lossy(h.len().max(1));
    let ms = h.iter().fold(T::zero(), |a, &v| a + v * v) / n;
    ms.sqrt().max(T::lit(STABLE_NORM_EPS))
}

/// Adjoint of [`stable_norm_inplace`] given the pre-norm input `h`, the
/// denominator returned by the forward pass and upstream `dy`. Writes the
/// input gradient into `dh` and accumulates into `dgain`.
pub fn stable_norm_backward<T: Scalar>(
    h: ArrayView1<T>,
    denom: T,
    gain: ArrayView1<T>,
    dy: ArrayView1<T>,
    mut dh: ArrayViewMut1<T>,
    mut dgain: ArrayViewMut1<T>,
) {
    let inv = T::one() / denom;
    for i in 0..h.len() {
        dgain[i] += dy[i] * h[i] * inv;
    }
    let floor_active = denom <= T::lit(STABLE_NORM_EPS);
    if floor_active {
        for i in 0..h.len() {
            dh[i] = dy[i] * gain[i] * inv;
        }
        return;
    }
    let n = T::from_usize_lossy(h.len());
    let dot = (0..h.len()).fold(T::zero(), |a, i| a + dy[i] * gain[i] * h[i]);
    let k = dot * inv * inv * inv / n;
    for i in 0..h.len() {
        dh[i] = dy[i] * gain[i] * inv - h[i] * k;
    }
}
