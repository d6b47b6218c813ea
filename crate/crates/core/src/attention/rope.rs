//! Rotary position embedding on `d × L` column-per-position matrices.
//! Pairs `(2i, 2i+1)` rotate by `pos · base^(-2i/d)`; an odd trailing
//! dimension is left untouched.

use ndarray::ArrayViewMut2;

use crate::Scalar;

pub const ROPE_BASE: f64 = 10_000.0;

fn rotate<T: Scalar>(mut x: ArrayViewMut2<T>, start_pos: usize, sign: f64) {
    let d = x.nrows();
    for (l, mut col) in x.columns_mut().into_iter().enumerate() {
        let pos = (start_pos + l) as f64;
        for i in 0..d / 2 {
            let theta = pos * ROPE_BASE.powf(-2.0 * i as f64 / d as f64) * sign;
            let (sn, cs) = theta.sin_cos();
            let (sn, cs) = (T::lit(sn), T::lit(cs));
            let a = col[2 * i];
            let b = col[2 * i + 1];
            col[2 * i] = a * cs - b * sn;
            col[2 * i + 1] = a * sn + b * cs;
        }
    }
}

pub fn apply_rope<T: Scalar>(x: ArrayViewMut2<T>, start_pos: usize) {
    rotate(x, start_pos, 1.0);
}

/// Inverse rotation; also the adjoint, since each rotation is orthogonal.
pub fn apply_rope_inverse<T: Scalar>(x: ArrayViewMut2<T>, start_pos: usize) {
    rotate(x, start_pos, -1.0);
}
