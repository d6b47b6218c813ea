//! AdamW with decoupled weight decay, linear warmup and global-norm clipping.

use regla_core::{Params, Scalar};

use crate::error::{LmError, Result};

/// First and second moments for one named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Completed updates.
    pub t: usize,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: Params<T>>(model: &P, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64, warmup_steps: usize) -> Self {
        let mut moments = Vec::new();
        model.visit(&mut |name, shape, data| {
            moments.push(Moments {
                name: name.to_string(),
                shape: shape.to_vec(),
                m: vec![T::zero(); data.len()],
                v: vec![T::zero(); data.len()],
            })
        });
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            warmup_steps,
            t: 0,
            moments,
        }
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((self.t + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }

    /// One update of `model` with `grads` (same structure). Weight decay is
    /// applied to matrices only, not to gains and biases.
    pub fn step<P: Params<T>>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let mut flat_grads: Vec<Vec<T>> = Vec::with_capacity(self.moments.len());
        grads.visit(&mut |_, _, g| flat_grads.push(g.to_vec()));
        if flat_grads.len() != self.moments.len() {
            return Err(LmError::Config("gradient structure does not match optimizer state".into()));
        }
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let mut idx = 0;
        let mut mismatch = false;
        let moments = &mut self.moments;
        let wd = self.weight_decay;
        model.visit_mut(&mut |name, shape, p| {
            let mo = &mut moments[idx];
            let g = &flat_grads[idx];
            idx += 1;
            if mo.name != name || g.len() != p.len() {
                mismatch = true;
                return;
            }
            let decay = if shape.len() == 2 { T::lit(1.0 - lr * wd) } else { one };
            for i in 0..p.len() {
                mo.m[i] = b1 * mo.m[i] + (one - b1) * g[i];
                mo.v[i] = b2 * mo.v[i] + (one - b2) * g[i] * g[i];
                let denom = (mo.v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] * decay - step_size * mo.m[i] / denom;
            }
        });
        if mismatch {
            return Err(LmError::Config("parameter names do not match optimizer state".into()));
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar, P: Params<T>>(grads: &P) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, _, g| sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    sq.sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar, P: Params<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.visit_mut(&mut |_, _, g| g.iter_mut().for_each(|v| *v = *v * s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    struct Vecs(Array1<f64>, ndarray::Array2<f64>);

    impl Params<f64> for Vecs {
        fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            f("a", &[self.0.len()], self.0.as_slice().unwrap());
            f("b", &[1, self.1.len()], self.1.as_slice().unwrap());
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            let n = self.0.len();
            f("a", &[n], self.0.as_slice_mut().unwrap());
            let n = self.1.len();
            f("b", &[1, n], self.1.as_slice_mut().unwrap());
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Vecs(Array1::from(vec![1.0, -1.0]), ndarray::Array2::zeros((1, 2)));
        let g = Vecs(Array1::from(vec![0.5, -2.0]), ndarray::Array2::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(&p, 0.1, (0.9, 0.999), 1e-12, 0.0, 0);
        opt.step(&mut p, &g).unwrap();
        assert!((p.0[0] - 0.9).abs() < 1e-9);
        assert!((p.0[1] + 0.9).abs() < 1e-9);
        assert!((p.1[[0, 0]] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut p = Vecs(Array1::from(vec![1.0]), ndarray::Array2::from_elem((1, 1), 1.0));
        let g = Vecs(Array1::zeros(1), ndarray::Array2::zeros((1, 1)));
        let mut opt = AdamW::new(&p, 0.1, (0.9, 0.999), 1e-8, 0.5, 0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.0[0], 1.0);
        assert!((p.1[[0, 0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let p = Vecs(Array1::zeros(1), ndarray::Array2::zeros((1, 1)));
        let mut opt = AdamW::new(&p, 1.0, (0.9, 0.999), 1e-8, 0.0, 4);
        assert_eq!(opt.current_lr(), 0.25);
        opt.t = 3;
        assert_eq!(opt.current_lr(), 1.0);
        opt.t = 10;
        assert_eq!(opt.current_lr(), 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Vecs(Array1::from(vec![3.0]), ndarray::Array2::from_elem((1, 1), 4.0));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
