//! Chunkwise form: state is carried across chunk boundaries and each chunk
//! is evaluated with an inter-chunk matrix product plus masked intra-chunk
//! contributions.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::gates::{Decays, GateParams};
use super::norm::stable_norm_inplace;
use super::parallel::sum_normalize;
use crate::error::{Error, Result};
use crate::Scalar;

/// Chunked evaluation of an elementwise-decay rule. `phi_q` is expected to
/// be scaled. With `sum_norm` the accumulator `c` is carried as an extra
/// state row whose value is always 1 and whose row decay is 1.
pub fn chunked_decay_attention<T: Scalar>(
    phi_q: ArrayView2<T>,
    phi_k: ArrayView2<T>,
    v: ArrayView2<T>,
    decays: &Decays<T>,
    sum_norm: bool,
    chunk_size: usize,
) -> Result<Array2<T>> {
    if chunk_size == 0 {
        return Err(Error::Domain("chunk_size must be >= 1".into()));
    }
    let (m, len) = phi_q.dim();
    let d = v.nrows();
    if phi_k.dim() != (m, len) || v.ncols() != len {
        return Err(Error::Shape("phi_q, phi_k and v disagree".into()));
    }
    if decays.row.dim() != (d, len) || decays.col.dim() != (m, len) || decays.write.len() != len {
        return Err(Error::Shape("decays do not match the sequence".into()));
    }

    let rows = if sum_norm { d + 1 } else { d };
    let (v_aug, row_aug) = augment(v, decays.row.view(), sum_norm);
    let mut state = Array2::<T>::zeros((rows, m));
    let mut out = Array2::<T>::zeros((rows, len));

    let mut start = 0;
    while start < len {
        let end = (start + chunk_size).min(len);
        let c = end - start;

        // Cumulative decays from the chunk start through each position.
        let mut cum_row = Array2::<T>::ones((rows, c));
        let mut cum_col = Array2::<T>::ones((m, c));
        let mut acc_r = Array1::<T>::ones(rows);
        let mut acc_c = Array1::<T>::ones(m);
        for t in 0..c {
            acc_r *= &row_aug.column(start + t);
            acc_c *= &decays.col.column(start + t);
            cum_row.column_mut(t).assign(&acc_r);
            cum_col.column_mut(t).assign(&acc_c);
        }

        // Inter-chunk: (A_t ⊙ S0 (B_t ⊙ q_t)) for all t at once.
        let q_dec = &cum_col * &phi_q.slice(s![.., start..end]);
        let mut block = state.dot(&q_dec);
        block *= &cum_row;

        // Intra-chunk: masked pairwise contributions.
        let mut dec_r = Array1::<T>::ones(rows);
        let mut dec_c = Array1::<T>::ones(m);
        for t in 0..c {
            let q_t = phi_q.column(start + t);
            dec_r.fill(T::one());
            dec_c.fill(T::one());
            for s_ in (0..=t).rev() {
                let js = start + s_;
                let kappa = weighted_dot(dec_c.view(), phi_k.column(js), q_t);
                let w = decays.write[js] * kappa;
                for a in 0..rows {
                    block[[a, t]] += w * dec_r[a] * v_aug[[a, js]];
                }
                dec_r *= &row_aug.column(js);
                dec_c *= &decays.col.column(js);
            }
        }
        out.slice_mut(s![.., start..end]).assign(&block);

        // Carry: S_end = (A_C B_Cᵀ) ⊙ S0 + Σ_s w_s (DA(s) ⊙ v_s)(DB(s) ⊙ k_s)ᵀ.
        let last = c - 1;
        for a in 0..rows {
            for b in 0..m {
                state[[a, b]] = state[[a, b]] * cum_row[[a, last]] * cum_col[[b, last]];
            }
        }
        dec_r.fill(T::one());
        dec_c.fill(T::one());
        for s_ in (0..c).rev() {
            let js = start + s_;
            let w = decays.write[js];
            for a in 0..rows {
                let va = w * dec_r[a] * v_aug[[a, js]];
                for b in 0..m {
                    state[[a, b]] += va * dec_c[b] * phi_k[[b, js]];
                }
            }
            dec_r *= &row_aug.column(js);
            dec_c *= &decays.col.column(js);
        }
        start = end;
    }

    if sum_norm {
        let den = out.row(d).to_owned();
        let mut num = out.slice(s![..d, ..]).to_owned();
        sum_normalize(&mut num, &den)?;
        Ok(num)
    } else {
        Ok(out)
    }
}

fn weighted_dot<T: Scalar>(w: ArrayView1<T>, a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let mut acc = T::zero();
    for i in 0..w.len() {
        acc += w[i] * a[i] * b[i];
    }
    acc
}

fn augment<T: Scalar>(v: ArrayView2<T>, row: ArrayView2<T>, sum_norm: bool) -> (Array2<T>, Array2<T>) {
    if !sum_norm {
        return (v.to_owned(), row.to_owned());
    }
    let ones = Array2::ones((1, v.ncols()));
    (
        ndarray::concatenate(Axis(0), &[v, ones.view()]).expect("same width"),
        ndarray::concatenate(Axis(0), &[row, ones.view()]).expect("same width"),
    )
}

/// Chunked refined-gate attention over a whole sequence, equal to running
/// [`super::rules::regla_step`] position by position. `phi_q` is unscaled;
/// `gate_inputs` is `in_dim × L`.
#[allow(clippy::too_many_arguments)]
pub fn regla_chunked<T: Scalar>(
    phi_q: ArrayView2<T>,
    phi_k: ArrayView2<T>,
    v: ArrayView2<T>,
    gate_inputs: ArrayView2<T>,
    params: &GateParams<T>,
    gain: ArrayView1<T>,
    scale: T,
    chunk_size: usize,
) -> Result<Array2<T>> {
    if !matches!(params, GateParams::Regla { .. }) {
        return Err(Error::Config("regla_chunked needs refined-gate parameters".into()));
    }
    let decays = params
        .activations(gate_inputs)
        .decays(v.nrows(), phi_q.nrows())
        .expect("elementwise rule");
    let q = &phi_q * scale;
    let mut h = chunked_decay_attention(q.view(), phi_k, v, &decays, false, chunk_size)?;
    for col in h.columns_mut() {
        stable_norm_inplace(col, gain);
    }
    Ok(h)
}
