use std::collections::BTreeMap;

use super::{NumericsError, Scalar, Tensor};

/// Anything that owns a set of named parameter tensors.
///
/// Visiting order must be deterministic; serialization and the optimizer
/// both rely on it.
pub trait Parameterized<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Applies `f` to the parameter called `name`; false when absent.
    fn with_param_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut Tensor<T>)) -> bool {
        let mut found = false;
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                found = true;
                f(t);
            }
        });
        found
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// Plain name-to-tensor collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32>(pub BTreeMap<String, Tensor<T>>);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }
}

impl<T: Scalar> Parameterized<T> for ParamStore<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (n, t) in &self.0 {
            f(n, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.0.iter_mut() {
            f(n, t);
        }
    }

    fn with_param_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut Tensor<T>)) -> bool {
        match self.0.get_mut(name) {
            Some(t) => {
                f(t);
                true
            }
            None => false,
        }
    }
}

/// Parameter-name to gradient map produced by a backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T: Scalar = f32>(BTreeMap<String, Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.0.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.0
    }

    /// Adds `other` entry-wise; names missing here are copied over.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<(), NumericsError> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(NumericsError::Shape {
                            op: "accumulate",
                            left: mine.shape().to_vec(),
                            right: g.shape().to_vec(),
                        });
                    }
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// L2 norm over every entry of every gradient, summed in name order.
    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<(), NumericsError> {
        for (name, g) in &self.0 {
            g.check_finite(name)?;
        }
        Ok(())
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Relative slack on the clipping threshold. Rescaled gradients land within
/// rounding of `max_norm`; the slack keeps a second clip from firing again.
pub const CLIP_SLACK: f64 = 1e-6;

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm * (1.0 + CLIP_SLACK) {
        let factor = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

pub fn global_norm_clip<T: Scalar>(mut grads: Gradients<T>, max_norm: f64) -> Gradients<T> {
    clip_global_norm(&mut grads, max_norm);
    grads
}
