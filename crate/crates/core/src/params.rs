//! Named parameter storage shared by the network, router and interaction
//! projections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic name order, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Merges `other` in, replacing duplicates.
    pub fn extend(&mut self, other: ParamSet) {
        self.map.extend(other.map);
    }

    /// Places every parameter on `tape`, as a differentiable leaf when
    /// `trainable` and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform(-bound, bound, shape).expect("non-empty range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_respects_trainable_flag() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(1.0));
        p.insert("a", Tensor::zeros(vec![2, 3]));
        assert_eq!(p.names().cloned().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(p.numel(), 7);
        let mut tape = Tape::new();
        let on = p.bind(&mut tape, true);
        assert!(tape.requires_grad(on.get("a").unwrap()));
        let off = p.bind(&mut tape, false);
        assert!(!tape.requires_grad(off.get("a").unwrap()));
        assert!(off.get("c").is_err());
    }

    #[test]
    fn fan_in_bound() {
        let t = fan_in_uniform(&[100], 4, &mut SeededRng::new(0));
        assert!(t.data().iter().all(|x| x.abs() <= 0.5));
    }
}
