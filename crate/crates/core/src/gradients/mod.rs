//! Reverse-mode gradients for the attention block and a central
//! finite-difference oracle to check them against.

mod tape;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, ForwardMode};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::{normal_matrix, stream};
use crate::Scalar;

pub use tape::{backward, backward_accumulate, forward_with_tape, BlockGrads, BlockTape};

/// Default step for central differences.
pub const FD_EPSILON: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central differences `(f(θ+εe) − f(θ−εe)) / 2ε` for every coordinate.
pub fn finite_difference_grad<T, F>(mut loss: F, params: &[T], epsilon: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(epsilon > T::zero()) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    let two_eps = epsilon + epsilon;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let up = loss(&theta);
        theta[i] = orig - epsilon;
        let down = loss(&theta);
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference loss"));
        }
        grad.push((up - down) / two_eps);
    }
    Ok(grad)
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `∂f/∂a` of the refined forget gate with respect to the pre-activation of
/// `g`: `[2(1−r)g + 2r(1−g)] · g(1−g)`.
pub fn refined_gate_grad(g: f64, r: f64) -> f64 {
    (2.0 * (1.0 - r) * g + 2.0 * r * (1.0 - g)) * vanilla_gate_grad(g)
}

/// Sigmoid derivative expressed through its output.
pub fn vanilla_gate_grad(g: f64) -> f64 {
    g * (1.0 - g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub per_param_errs: BTreeMap<String, f64>,
}

impl GradReport {
    /// Builds the report from per-tensor analytic and numeric gradients.
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [f64], &'a [f64])>,
    {
        let mut per_param_errs = BTreeMap::new();
        let mut worst = (String::new(), 0.0f64);
        for (name, a, f) in pairs {
            let err = a.iter().zip(f).map(|(&a, &f)| relative_error(a, f)).fold(0.0, f64::max);
            if worst.0.is_empty() || err > worst.1 {
                worst = (name.to_string(), err);
            }
            per_param_errs.insert(name.to_string(), err);
        }
        GradReport {
            max_rel_err: worst.1,
            worst_param: worst.0,
            per_param_errs,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Loss used by the gradient check: `Σ w ⊙ block(x)` with fixed weights `w`.
fn weighted_output<T: Scalar>(block: &AttentionBlock<T>, x: ArrayView2<T>, w: &Array2<T>, mode: ForwardMode) -> T {
    match block.forward(x, mode) {
        Ok(y) => (&y * w).sum(),
        Err(_) => T::nan(),
    }
}

/// Analytic and numeric gradient of one tensor (or of the input).
#[derive(Clone, Debug)]
pub struct GradPair {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Analytic backward of `block` at input `x` next to central differences of
/// the `mode` forward, for every parameter tensor and the input (named
/// `"input"`). The loss is `Σ w ⊙ block(x)` with `w` drawn from `seed`.
pub fn gradient_pairs<T: Scalar>(
    block: &AttentionBlock<T>,
    x: ArrayView2<T>,
    mode: ForwardMode,
    seed: u64,
    epsilon: T,
) -> Result<Vec<GradPair>> {
    let mut rng = stream(seed, &[0x6772_6164]);
    let w: Array2<T> = normal_matrix(&mut rng, block.model_dim, x.ncols(), 1.0);
    let (_, tape) = forward_with_tape(block, x)?;
    let grads = backward(block, &tape, w.view())?;

    let theta = block.flatten();
    let mut probe = block.clone();
    let numeric = finite_difference_grad(
        |p| {
            probe.assign_flat(p);
            weighted_output(&probe, x, &w, mode)
        },
        &theta,
        epsilon,
    )?;
    let x_flat: Vec<T> = x.iter().copied().collect();
    let numeric_x = finite_difference_grad(
        |p| {
            let xi = ArrayView2::from_shape(x.raw_dim(), p).expect("same shape");
            weighted_output(block, xi, &w, mode)
        },
        &x_flat,
        epsilon,
    )?;

    let to64 = |v: &[T]| v.iter().map(|e| e.as_f64()).collect::<Vec<f64>>();
    let analytic = grads.params.flatten();
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, n) in block.layout() {
        out.push(GradPair {
            name,
            analytic: to64(&analytic[offset..offset + n]),
            numeric: to64(&numeric[offset..offset + n]),
        });
        offset += n;
    }
    out.push(GradPair {
        name: "input".into(),
        analytic: grads.dx.iter().map(|e| e.as_f64()).collect(),
        numeric: to64(&numeric_x),
    });
    Ok(out)
}

/// [`gradient_pairs`] summarized as a [`GradReport`].
pub fn gradcheck_block<T: Scalar>(
    block: &AttentionBlock<T>,
    x: ArrayView2<T>,
    mode: ForwardMode,
    seed: u64,
    epsilon: T,
) -> Result<GradReport> {
    let pairs = gradient_pairs(block, x, mode, seed, epsilon)?;
    Ok(GradReport::from_pairs(
        pairs.iter().map(|p| (p.name.as_str(), p.analytic.as_slice(), p.numeric.as_slice())),
    ))
}
