use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Ordered registry of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::format(format!("missing parameter {name}")))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the names and raw bytes of every parameter whose name passes `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, t) in self.iter().filter(|(n, _)| filter(n)) {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Pushes every parameter onto `tape`, marking those accepted by `trainable`
    /// as gradient-requiring leaves.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .iter()
            .map(|(name, t)| tape.leaf(t.cast::<T>(), trainable(name)))
            .collect();
        Bound {
            index: self.index.clone(),
            vars,
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unbound parameter {name}")))
    }

    /// Var of the `i`-th parameter in registry order.
    pub fn at(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Replaces the handle for `name`, e.g. with a gradcheck probe.
    pub fn set(&mut self, name: &str, v: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unbound parameter {name}")))?;
        self.vars[i] = v;
        Ok(())
    }
}

/// Glob match with `*` standing for any (possibly empty) substring.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(at) => rest = &rest[at + mid.len()..],
            None => return false,
        }
    }
    true
}
