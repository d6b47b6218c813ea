//! Whole-sequence (non-recurrent) forms of linear attention.

use ndarray::{Array1, Array2, ArrayView2};

use super::gates::Decays;
use super::rules::SUM_NORM_EPS;
use crate::error::{Error, Result};
use crate::Scalar;

fn check_shapes<T>(phi_q: ArrayView2<T>, phi_k: ArrayView2<T>, v: ArrayView2<T>) -> Result<()> {
    if phi_q.dim() != phi_k.dim() || v.ncols() != phi_k.ncols() {
        return Err(Error::Shape(format!(
            "phi_q {:?}, phi_k {:?}, v {:?}",
            phi_q.dim(),
            phi_k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Divides numerators by denominators, flagging degenerate positions.
pub(crate) fn sum_normalize<T: Scalar>(num: &mut Array2<T>, den: &Array1<T>) -> Result<()> {
    for (i, mut col) in num.columns_mut().into_iter().enumerate() {
        let z = den[i];
        if !(z >= T::lit(SUM_NORM_EPS)) {
            return Err(Error::Degenerate {
                position: i,
                value: z.as_f64(),
                eps: SUM_NORM_EPS,
            });
        }
        col.mapv_inplace(|x| x / z);
    }
    Ok(())
}

/// `h_i = Σ_{j≤i} v_j φ(k_j)ᵀφ(q_i)·scale`, divided by
/// `Σ_{j≤i} φ(k_j)ᵀφ(q_i)·scale` when `sum_norm` is on.
pub fn linear_attention_parallel<T: Scalar>(
    phi_q: ArrayView2<T>,
    phi_k: ArrayView2<T>,
    v: ArrayView2<T>,
    sum_norm: bool,
    causal: bool,
    scale: T,
) -> Result<Array2<T>> {
    check_shapes(phi_q, phi_k, v)?;
    let mut a = phi_k.t().dot(&phi_q) * scale;
    if causal {
        for ((j, i), x) in a.indexed_iter_mut() {
            if j > i {
                *x = T::zero();
            }
        }
    }
    let mut h = v.dot(&a);
    if sum_norm {
        let den = a.sum_axis(ndarray::Axis(0));
        sum_normalize(&mut h, &den)?;
    }
    Ok(h)
}

/// Causal parallel form of an elementwise-decay rule. Pairwise decays are
/// evaluated as `exp(Λ_i - Λ_j)` from cumulative log-decays, which requires
/// strictly positive decays. `phi_q` is expected to be scaled.
pub fn gated_parallel<T: Scalar>(
    phi_q: ArrayView2<T>,
    phi_k: ArrayView2<T>,
    v: ArrayView2<T>,
    decays: &Decays<T>,
    sum_norm: bool,
) -> Result<Array2<T>> {
    check_shapes(phi_q, phi_k, v)?;
    let (m, len) = phi_q.dim();
    let d = v.nrows();
    if decays.row.dim() != (d, len) || decays.col.dim() != (m, len) || decays.write.len() != len {
        return Err(Error::Shape("decays do not match the sequence".into()));
    }
    let cum_row = cumulative_log(&decays.row);
    let cum_col = cumulative_log(&decays.col);
    let mut out = Array2::zeros((d, len));
    let mut den = Array1::zeros(len);
    for i in 0..len {
        for j in 0..=i {
            let mut kappa = T::zero();
            for b in 0..m {
                kappa += (cum_col[[b, i]] - cum_col[[b, j]]).exp() * phi_k[[b, j]] * phi_q[[b, i]];
            }
            let wk = decays.write[j] * kappa;
            den[i] += wk;
            for a in 0..d {
                out[[a, i]] += (cum_row[[a, i]] - cum_row[[a, j]]).exp() * v[[a, j]] * wk;
            }
        }
    }
    if sum_norm {
        sum_normalize(&mut out, &den)?;
    }
    Ok(out)
}

fn cumulative_log<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.mapv(|v| v.ln());
    for mut row in out.rows_mut() {
        let mut acc = T::zero();
        for v in row.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    out
}
