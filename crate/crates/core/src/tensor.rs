//! Dense row-major tensors and the named parameter store.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![], vec![v])
    }

    /// Normal(0, std) initialization from a seeded stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller keeps the generic path free of distribution deps.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                S::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        assert_eq!(delta.len(), self.data.len(), "grad shape mismatch");
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element width; used by tests that cross-check f32 against f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        )
    }
}

/// Ordered map from parameter name to tensor.
///
/// Mutation requires `&mut self`, so a store behind `Arc` is frozen by
/// construction and safe to share across concurrent decode sessions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    /// Inserts a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) {
        let name = name.into();
        tensor.set_requires_grad(true);
        let prior = self.params.insert(name.clone(), tensor);
        assert!(prior.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.zero_grad();
        }
    }

    /// Verifies every parameter is finite; used after optimizer steps.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_data_length_matches_shape() {
        let t = Tensor::<f32>::zeros(vec![2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn tensor_rejects_bad_length() {
        let _ = Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]);
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::<f64>::zeros(vec![2]);
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![1]));
        store.insert("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn store_preserves_insertion_order() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b", Tensor::zeros(vec![1]));
        store.insert("a", Tensor::zeros(vec![1]));
        let names: Vec<_> = store.names().cloned().collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(vec![16], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(vec![16], 0.02, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
