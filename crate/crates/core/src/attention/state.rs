use ndarray::{Array1, Array2};

use crate::feature_maps::StreamingMaxState;
use crate::Scalar;

/// Per-head recurrent state threaded through decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    /// State matrix, `d × m`.
    pub s: Array2<T>,
    /// Sum-normalization accumulator, length `m`.
    pub c: Array1<T>,
    pub key_max: StreamingMaxState<T>,
    /// Number of positions consumed.
    pub t: usize,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            s: Array2::zeros((d, m)),
            c: Array1::zeros(m),
            key_max: StreamingMaxState::new(),
            t: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.s.nrows()
    }

    pub fn m(&self) -> usize {
        self.s.ncols()
    }

    /// Multiplies everything accumulated from key features by `factor`.
    pub fn rescale(&mut self, factor: T) {
        if factor != T::one() {
            self.s.mapv_inplace(|v| v * factor);
            self.c.mapv_inplace(|v| v * factor);
        }
    }

    /// Bytes held by `S` and `c`.
    pub fn state_bytes(&self) -> usize {
        (self.s.len() + self.c.len()) * std::mem::size_of::<T>()
    }
}
