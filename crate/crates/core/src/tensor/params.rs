//! Ordered, named parameter collection shared by the optimizer, the
//! checkpoint format and the model definitions.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Shape5, Tensor5};

pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor5<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamSet<S> {
    /// Deep copy: values are duplicated into fresh leaves (graph links and
    /// gradients are not carried over).
    fn clone(&self) -> Self {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), Tensor5::param(t.shape(), t.value_vec()))
                .expect("clone preserves unique names");
        }
        out
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor5<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    /// New leaf initialized uniformly in ±1/sqrt(fan_in).
    pub fn init_conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let ws = Shape5::new(out_c, in_c, k.0, k.1, k.2);
        let fan_in = (in_c * k.0 * k.1 * k.2) as f64;
        let lim = 1.0 / fan_in.sqrt();
        let values: Vec<S> = (0..ws.numel())
            .map(|_| S::from_f64_(rng.gen_range(-lim..lim)))
            .collect();
        self.insert(format!("{name}.w"), Tensor5::param(ws, values))?;
        let bs = Shape5::new(1, out_c, 1, 1, 1);
        self.insert(format!("{name}.b"), Tensor5::param(bs, vec![S::zero(); out_c]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor5<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor5<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// True if any value is NaN or infinite.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|(_, t)| t.values().iter().any(|v| !v.is_finite()))
    }
}
