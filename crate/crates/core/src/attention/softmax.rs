use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::Scalar;

/// Reference softmax attention: `H[:,i] = Σ_j softmax_j(q_iᵀk_j/√d) v_j`,
/// with `j ≤ i` when `causal`. Inputs are `d × L`, one position per column.
pub fn softmax_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    causal: bool,
) -> Result<Array2<T>> {
    let (d, lq) = q.dim();
    if k.nrows() != d || k.ncols() != v.ncols() || (causal && lq != k.ncols()) {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let scores = k.t().dot(&q) * scale;
    let lk = k.ncols();
    let mut out = Array2::zeros((v.nrows(), lq));
    let mut p = vec![T::zero(); lk];
    for i in 0..lq {
        let last = if causal { i + 1 } else { lk };
        let mx = (0..last).fold(T::neg_infinity(), |a, j| a.max(scores[[j, i]]));
        let mut z = T::zero();
        for j in 0..last {
            p[j] = (scores[[j, i]] - mx).exp();
            z += p[j];
        }
        let mut col = out.column_mut(i);
        for j in 0..last {
            col.scaled_add(p[j] / z, &v.column(j));
        }
    }
    Ok(out)
}
