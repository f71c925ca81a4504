//! Named parameter collections and architecture fingerprints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-bound, bound)`
    Uniform(f64),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations while an architecture is assembled.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Sets the initializer of every spec whose name starts with `prefix`.
pub fn set_init(specs: &mut [ParamSpec], prefix: &str, init: Init) {
    for s in specs.iter_mut().filter(|s| s.name.starts_with(prefix)) {
        s.init = init;
    }
}

/// Hash of an architecture header plus its parameter names and shapes.
pub fn fingerprint(header: &str, specs: &[ParamSpec]) -> String {
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    for s in specs {
        h.update(format!("\n{}:{:?}", s.name, s.shape).as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named tensors (weights, gradients or optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        ParamSet {
            params: specs
                .iter()
                .map(|s| Param {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: vec![T::zero(); s.numel()],
                })
                .collect(),
        }
    }

    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamSet {
            params: specs
                .iter()
                .map(|s| Param {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: (0..s.numel())
                        .map(|_| match s.init {
                            Init::Uniform(b) => T::from_f64(rng.gen_range(-b..=b)),
                            Init::Constant(c) => T::from_f64(c),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        ParamSet { params }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self, f: impl Fn(T) -> U) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// First non-finite parameter name, for diagnostics.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.data.iter().all(|v| v.is_finite()))
            .map(|p| p.name.as_str())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    /// `self += alpha·other`
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= alpha;
            }
        }
    }

    pub fn fill(&mut self, v: T) {
        for p in &mut self.params {
            p.data.fill(v);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| v.re() * v.re())
            .sum()
    }

    /// Checks names and shapes against an architecture's declarations.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.params.len() != specs.len() {
            return Err(Error::Model(format!(
                "parameter count {} does not match architecture ({})",
                self.params.len(),
                specs.len()
            )));
        }
        for (p, s) in self.params.iter().zip(specs) {
            if p.name != s.name || p.shape != s.shape || p.data.len() != s.numel() {
                return Err(Error::Model(format!(
                    "parameter {}{:?} does not match architecture entry {}{:?}",
                    p.name, p.shape, s.name, s.shape
                )));
            }
        }
        Ok(())
    }
}

impl ParamSet<f32> {
    /// Content hash over names, shapes and raw values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(format!("{:?}", p.shape).as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut r = ParamRegistry::default();
        r.add("a.weight".into(), vec![2, 3], Init::Uniform(0.5));
        r.add("a.bias".into(), vec![2], Init::Constant(0.0));
        r.into_specs()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let s = specs();
        let a = ParamSet::<f32>::init(&s, 7);
        let b = ParamSet::<f32>::init(&s, 7);
        let c = ParamSet::<f32>::init(&s, 8);
        assert_eq!(a, b);
        assert_ne!(a.content_hash(), c.content_hash());
        assert!(a.get(ParamId(0)).iter().all(|v| v.abs() <= 0.5));
        assert!(a.get(ParamId(1)).iter().all(|&v| v == 0.0));
        a.check_against(&s).unwrap();
    }

    #[test]
    fn check_against_rejects_shape_drift() {
        let s = specs();
        let mut other = specs();
        other[0].shape = vec![3, 2];
        let p = ParamSet::<f32>::zeros(&other);
        assert!(p.check_against(&s).is_err());
        assert_ne!(fingerprint("x", &s), fingerprint("x", &other));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn registry_rejects_duplicates() {
        let mut r = ParamRegistry::default();
        r.add("w".into(), vec![1], Init::Constant(0.0));
        r.add("w".into(), vec![1], Init::Constant(0.0));
    }
}
