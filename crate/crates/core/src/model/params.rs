//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

/// Model parameters keyed by hierarchical name (`stage1.layer2.attn.wq`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Binds every tensor as a constant except the names in `vars`, which
    /// take the given tape handles. Used to differentiate with respect to a
    /// chosen subset of parameters.
    pub fn bind_with(&self, tape: &mut Tape<T>, vars: &[(String, Var)]) -> Bound {
        let mut b = self.bind_subset(tape, |n| !vars.iter().any(|(k, _)| k == n));
        b.vars.extend(vars.iter().cloned());
        b
    }

    fn bind_subset(&self, tape: &mut Tape<T>, keep: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound parameter set.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing tape handles.
    pub fn from_vars<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Seeded initialiser; each parameter draws from a stream keyed by its name
/// so adding a parameter never perturbs the others.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    fn rng(&self, name: &str) -> Rng {
        rng::stream(self.seed, &[rng::hash_str(name)])
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Scalar>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect();
        Tensor::new(shape.to_vec(), data).expect("initialiser shape")
    }

    /// Normal with the given standard deviation.
    pub fn normal<T: Scalar>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::c(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("initialiser shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_per_name_deterministic() {
        let a = Init::new(1).fan_in::<f64>("w", &[3, 4], 3);
        let b = Init::new(1).fan_in::<f64>("w", &[3, 4], 3);
        let c = Init::new(1).fan_in::<f64>("v", &[3, 4], 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    }

    #[test]
    fn bind_respects_trainable_flag() {
        let mut p = Params::<f64>::new();
        p.insert("a", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        assert!(!tape.node(b.get("a").unwrap()).requires_grad());
        let b = p.bind(&mut tape, true);
        assert!(tape.node(b.get("a").unwrap()).requires_grad());
        assert!(b.get("z").is_err());
        assert_eq!(p.count(), 2);
    }
}
