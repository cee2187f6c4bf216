//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is by name,
/// which keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterSet<S> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParameterSet<S>) {
        self.tensors.extend(other.tensors);
    }

    /// Same names, same shapes.
    pub fn check_compatible(&self, other: &ParameterSet<S>, context: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                context,
                format!("{} vs {} tensors", self.len(), other.len()),
            ));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::shape(context, format!("name {ka} vs {kb}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::shape(
                    context,
                    format!("{ka}: {:?} vs {:?}", va.shape(), vb.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn max_abs_diff(&self, other: &ParameterSet<S>) -> S {
        self.tensors
            .iter()
            .map(|(k, v)| match other.get(k) {
                Some(o) => v.max_abs_diff(o),
                None => S::infinity(),
            })
            .fold(S::zero(), S::max)
    }

    /// Register every tensor as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        self.bind_with(tape, true)
    }

    /// Register every tensor as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape<S>, tracked: bool) -> Bound<'t, S> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if tracked { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// A parameter set living on a tape.
pub struct Bound<'t, S: Scalar> {
    vars: BTreeMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn get(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape("parameter lookup", format!("missing parameter {name}")))
    }

    pub fn merge(mut self, other: Bound<'t, S>) -> Self {
        self.vars.extend(other.vars);
        self
    }

    /// Gradients for every bound parameter (zeros where the loss does not reach).
    pub fn gradients(&self, grads: &Gradients<S>) -> ParameterSet<S> {
        let mut out = ParameterSet::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), grads.wrt(*v));
        }
        out
    }
}

/// Truncated normal (±2σ, resampled) with the given standard deviation.
pub fn trunc_normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break S::of(z * std);
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// He-normal initialization for a `[fan_in, fan_out]` weight feeding a rectifier.
pub fn he_normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    let fan_in = shape[0] as f64;
    trunc_normal(rng, shape, (2.0 / fan_in).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = trunc_normal(&mut rng, &[10_000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        // truncated at 2σ the std shrinks to ~0.88σ
        assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
    }

    #[test]
    fn compatibility_check_names_offender() {
        let mut a = ParameterSet::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParameterSet::<f32>::new();
        b.insert("w", Tensor::zeros(&[2, 3]));
        let err = a.check_compatible(&b, "test").unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
    }
}
