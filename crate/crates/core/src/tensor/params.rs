use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{GemtError, Result};

/// Named parameters, iterated in lexicographic path order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    /// Inserts a parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(GemtError::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.params
            .get(path)
            .ok_or_else(|| GemtError::UnknownParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| GemtError::UnknownParameter(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<F>> {
        self.params.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore<F> {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Moves every entry of `other` into `self`; existing paths are replaced.
    pub fn merge(&mut self, other: ParameterStore<F>) {
        self.params.extend(other.params);
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Order-sensitive FNV-1a digest over paths, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (k, v) in &self.params {
            eat(k.as_bytes());
            for &d in v.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant (no gradients flow into it).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParameterStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| GemtError::UnknownParameter(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Per-path gradients; unreached parameters get zeros.
    pub fn gradients<F: Scalar>(&self, grads: &Gradients<F>) -> ParameterStore<F> {
        ParameterStore {
            params: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

/// Normal(0, σ) resampled until it lies within ±2σ.
pub fn trunc_normal<F: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::lit(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::<f32>::new();
        for p in ["b.x", "a.z", "a.b", "c"] {
            s.insert(p, Tensor::zeros(&[1])).unwrap();
        }
        let order: Vec<_> = s.paths().cloned().collect();
        assert_eq!(order, vec!["a.b", "a.z", "b.x", "c"]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn checksum_detects_single_bit() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let before = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(before, s.checksum());
    }
}
