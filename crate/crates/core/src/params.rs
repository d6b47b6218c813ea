use crate::Scalar;

/// Uniform access to a collection of named parameter tensors. Gradients are
/// stored in a value of the same type, so paired traversal is positional.
pub trait Params<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// `(name, len)` of every tensor, in traversal order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, v| out.push((name.to_string(), v.len())));
        out
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites every parameter from `flat` (traversal order).
    fn assign_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }
}
