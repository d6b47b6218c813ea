//! One-position state updates for every rule, operating on a
//! [`RecurrentState`]. `phi_q` arguments are expected to already carry the
//! scaling factor unless an op says otherwise.

use ndarray::{Array1, ArrayView1, Axis};

use super::config::GateKind;
use super::gates::{refined_forget_gate, GateParams};
use super::norm::stable_norm;
use super::state::RecurrentState;
use crate::error::{Error, Result};
use crate::Scalar;

/// Below this the sum-normalization denominator is reported as degenerate.
pub const SUM_NORM_EPS: f64 = 1e-6;

fn check_len<T>(what: &str, v: ArrayView1<T>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} has length {} but expected {n}", v.len())));
    }
    Ok(())
}

fn check_step<T: Scalar>(
    state: &RecurrentState<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
) -> Result<()> {
    check_len("phi_k", phi_k, state.m())?;
    check_len("v", v, state.d())
}

fn standard_slice<T: Scalar>(state: &mut RecurrentState<T>) -> &mut [T] {
    if !state.s.is_standard_layout() {
        state.s = state.s.as_standard_layout().into_owned();
    }
    state.s.as_slice_mut().expect("standard layout")
}

/// `S ← (row colᵀ) ⊙ S + write · v φ(k)ᵀ`, `c ← col ⊙ c + write · φ(k)`.
/// Missing decays are treated as all-ones.
pub(crate) fn decay_update<T: Scalar>(
    state: &mut RecurrentState<T>,
    row: Option<ArrayView1<T>>,
    col: Option<ArrayView1<T>>,
    write: T,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
) {
    let (d, m) = state.s.dim();
    let s = standard_slice(state);
    for i in 0..d {
        let a = row.map_or(T::one(), |r| r[i]);
        let wv = write * v[i];
        let srow = &mut s[i * m..(i + 1) * m];
        match col {
            Some(col) => {
                for j in 0..m {
                    srow[j] = a * col[j] * srow[j] + wv * phi_k[j];
                }
            }
            None => {
                for j in 0..m {
                    srow[j] = a * srow[j] + wv * phi_k[j];
                }
            }
        }
    }
    for j in 0..m {
        let b = col.map_or(T::one(), |c| c[j]);
        state.c[j] = b * state.c[j] + write * phi_k[j];
    }
    state.t += 1;
}

/// `S ← S - β S φ φᵀ + β v φᵀ`. The accumulator `c` is updated as an extra
/// state row whose value is always 1: `c ← c - β (cᵀφ) φ + β φ`.
pub(crate) fn delta_update<T: Scalar>(
    state: &mut RecurrentState<T>,
    beta: T,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
) {
    let (d, m) = state.s.dim();
    let s = standard_slice(state);
    for i in 0..d {
        let srow = &mut s[i * m..(i + 1) * m];
        let u: T = srow.iter().zip(phi_k.iter()).fold(T::zero(), |a, (&x, &p)| a + x * p);
        let coef = beta * (v[i] - u);
        for j in 0..m {
            srow[j] += coef * phi_k[j];
        }
    }
    let cu = state.c.dot(&phi_k);
    let coef = beta * (T::one() - cu);
    state.c.scaled_add(coef, &phi_k);
    state.t += 1;
}

/// `h = S φ(q)`, divided by `cᵀφ(q)` when `sum_norm` is on.
pub(crate) fn read_out<T: Scalar>(
    state: &RecurrentState<T>,
    phi_q: ArrayView1<T>,
    sum_norm: bool,
) -> Result<Array1<T>> {
    check_len("phi_q", phi_q, state.m())?;
    let h = state.s.dot(&phi_q);
    if !sum_norm {
        return Ok(h);
    }
    let den = state.c.dot(&phi_q);
    if !(den >= T::lit(SUM_NORM_EPS)) {
        return Err(Error::Degenerate {
            position: state.t.saturating_sub(1),
            value: den.as_f64(),
            eps: SUM_NORM_EPS,
        });
    }
    Ok(h / den)
}

/// Ungated linear attention step.
pub fn linear_attention_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    phi_q: ArrayView1<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    sum_norm: bool,
) -> Result<Array1<T>> {
    check_step(state, phi_k, v)?;
    decay_update(state, None, None, T::one(), phi_k, v);
    read_out(state, phi_q, sum_norm)
}

fn wrong_gate(expected: GateKind, got: GateKind) -> Error {
    Error::Config(format!("expected {} gate parameters, got {}", expected.name(), got.name()))
}

/// Scalar-gated step: `g = σ(w_g·x)`, `S ← g S + (1-g) v φ(k)ᵀ`,
/// `c ← g c + (1-g) φ(k)`, sum-normalized output.
pub fn rfa_gate_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    phi_q: ArrayView1<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    x: ArrayView1<T>,
    params: &GateParams<T>,
) -> Result<Array1<T>> {
    let GateParams::ScalarRfa { w_g } = params else {
        return Err(wrong_gate(GateKind::ScalarRfa, params.kind()));
    };
    check_step(state, phi_k, v)?;
    check_len("x", x, w_g.len())?;
    let g = w_g.dot(&x).sigmoid();
    rfa_update(state, g, phi_k, v);
    read_out(state, phi_q, true)
}

pub(crate) fn rfa_update<T: Scalar>(state: &mut RecurrentState<T>, g: T, phi_k: ArrayView1<T>, v: ArrayView1<T>) {
    let m = state.m();
    let col = Array1::from_elem(m, g);
    decay_update(state, None, Some(col.view()), T::one() - g, phi_k, v);
}

/// Delta-rule step with write strength `β = σ(w_β·x)`.
pub fn delta_rule_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    x: ArrayView1<T>,
    params: &GateParams<T>,
) -> Result<()> {
    let GateParams::DeltaRule { w_beta } = params else {
        return Err(wrong_gate(GateKind::DeltaRule, params.kind()));
    };
    check_step(state, phi_k, v)?;
    check_len("x", x, w_beta.len())?;
    let beta = w_beta.dot(&x).sigmoid();
    delta_update(state, beta, phi_k, v);
    Ok(())
}

/// Outer-product gate step: `G = σ(W_z x + b_z) σ(W_f x + b_f)ᵀ`,
/// `S ← G ⊙ S + v φ(k)ᵀ`.
pub fn fast_decay_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    x: ArrayView1<T>,
    params: &GateParams<T>,
) -> Result<()> {
    let GateParams::FastDecay { w_z, w_f, .. } = params else {
        return Err(wrong_gate(GateKind::FastDecay, params.kind()));
    };
    check_step(state, phi_k, v)?;
    check_len("x", x, w_z.ncols())?;
    if w_f.nrows() != state.m() || w_z.nrows() != state.d() {
        return Err(Error::Shape("fast-decay gate does not match state dims".into()));
    }
    gated_update(state, params, phi_k, v, x);
    Ok(())
}

/// Refined-gate step. `phi_q` is unscaled here: the output is
/// `stable_norm(S φ(q) · scale, gain)`.
#[allow(clippy::too_many_arguments)]
pub fn regla_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    phi_q: ArrayView1<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    x: ArrayView1<T>,
    params: &GateParams<T>,
    gain: ArrayView1<T>,
    scale: T,
) -> Result<Array1<T>> {
    let GateParams::Regla { w_g, .. } = params else {
        return Err(wrong_gate(GateKind::ReglaRefined, params.kind()));
    };
    check_step(state, phi_k, v)?;
    check_len("x", x, w_g.ncols())?;
    check_len("gain", gain, state.d())?;
    gated_update(state, params, phi_k, v, x);
    let h = read_out(state, (&phi_q * scale).view(), false)?;
    Ok(stable_norm(h.view(), gain))
}

/// Applies whichever update rule `params` describes.
pub(crate) fn gated_update<T: Scalar>(
    state: &mut RecurrentState<T>,
    params: &GateParams<T>,
    phi_k: ArrayView1<T>,
    v: ArrayView1<T>,
    x: ArrayView1<T>,
) {
    match params {
        GateParams::None => decay_update(state, None, None, T::one(), phi_k, v),
        GateParams::ScalarRfa { w_g } => rfa_update(state, w_g.dot(&x).sigmoid(), phi_k, v),
        GateParams::DeltaRule { w_beta } => delta_update(state, w_beta.dot(&x).sigmoid(), phi_k, v),
        GateParams::FastDecay { .. } | GateParams::Regla { .. } => {
            let acts = params.activations(x.insert_axis(Axis(1)));
            let decays = acts.decays(state.d(), state.m()).expect("elementwise rule");
            let write = decays.write[0];
            match (params, decays) {
                (GateParams::FastDecay { .. }, dec) => decay_update(
                    state,
                    Some(dec.row.column(0)),
                    Some(dec.col.column(0)),
                    write,
                    phi_k,
                    v,
                ),
                (_, dec) => decay_update(state, Some(dec.row.column(0)), None, write, phi_k, v),
            }
        }
    }
}

/// Forget-gate value of the refined rule for a single `(g, r)` pair.
pub fn refined_gate_value<T: Scalar>(g: T, r: T) -> T {
    refined_forget_gate(g, r)
}
