use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::DenseArray;
use super::error::{NumError, NumResult};

/// Named trainable parameters with a parallel gradient map.
///
/// Identifiers are ordered, so iteration (and therefore checkpoint layout and
/// update order) is stable across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    values: BTreeMap<String, DenseArray>,
    grads: BTreeMap<String, DenseArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> NumResult<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(NumError::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.values.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: DenseArray) -> NumResult<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParameter(name.to_string()))?;
        value.expect_shape("ParamSet::set", slot.shape())?;
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> NumResult<&DenseArray> {
        self.values
            .get(name)
            .ok_or_else(|| NumError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> NumResult<&mut DenseArray> {
        self.values
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> Option<&DenseArray> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.values.values().map(DenseArray::len).sum()
    }

    /// Resets every gradient to zeros of the matching shape.
    pub fn zero_grads(&mut self) {
        self.grads = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape())))
            .collect();
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &DenseArray) -> NumResult<()> {
        let value = self.get(name)?;
        grad.expect_shape("accumulate_grad", value.shape())?;
        match self.grads.get_mut(name) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    /// Keeps only parameters whose identifier starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            values: self
                .values
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            grads: BTreeMap::new(),
        }
    }

    /// Copies every entry of `other` whose name exists here with the same
    /// shape. Returns the number of entries copied.
    pub fn load_matching(&mut self, other: &BTreeMap<String, DenseArray>) -> usize {
        let mut n = 0;
        for (name, value) in other {
            if let Some(slot) = self.values.get_mut(name) {
                if slot.shape() == value.shape() {
                    *slot = value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn to_map(&self) -> BTreeMap<String, DenseArray> {
        self.values.clone()
    }

    pub(crate) fn split_mut(
        &mut self,
    ) -> (
        &mut BTreeMap<String, DenseArray>,
        &mut BTreeMap<String, DenseArray>,
    ) {
        (&mut self.values, &mut self.grads)
    }
}

/// Glorot-style normal initialisation with the given fan-in and fan-out.
pub fn init_normal(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> DenseArray {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

/// He-normal initialisation for layers followed by ELU-like activations.
pub fn init_he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> DenseArray {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}
