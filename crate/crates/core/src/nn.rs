//! Parameter containers shared by the trunk and the heads.

use rand::Rng;

use crate::ndgrad::{Array, Scalar, Tape, Var};

/// A module with named trainable parameters and (optionally) named
/// non-trainable buffers such as batch-norm running statistics.
///
/// `params` and `params_mut` must list tensors in the same order; that
/// order is also the order of the `Var`s returned by [`Module::bind`].
pub trait Module<F: Scalar> {
    fn params(&self) -> Vec<(String, &Array<F>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Array<F>)>;

    fn buffers(&self) -> Vec<(String, &Array<F>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Array<F>)> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params().into_iter().map(|(_, a)| tape.leaf(a.clone(), trainable)).collect()
    }
}

/// He-uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Array<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Array::new(shape.to_vec(), data).expect("shape and data agree")
}
