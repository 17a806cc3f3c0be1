use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors. A tensor is trainable iff its
/// `requires_grad` flag is set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Glob match supporting `*` as "any run of characters".
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() {
        return false;
    }
    let mut rest = &name[first.len()..];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(pos) => rest = &rest[pos + mid.len()..],
            None => return false,
        }
    }
    rest.ends_with(last)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Moves every tensor of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets the trainable flag on every parameter matching `pattern`.
    /// Freezing also drops any stale gradient.
    pub fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        let mut hits = 0;
        for (name, t) in &mut self.tensors {
            if pattern_matches(pattern, name) {
                t.requires_grad = trainable;
                if !trainable {
                    t.grad = None;
                }
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::Config {
                key: pattern.to_string(),
                message: "pattern matches no parameter".into(),
            });
        }
        Ok(hits)
    }

    pub fn freeze_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
    }

    /// Records every tensor on `g`; trainable tensors become gradient leaves.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t)))
                .collect(),
        }
    }

    /// Records every tensor on `g` as a constant, regardless of flags.
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Adds backward gradients to the `grad` buffers of trainable tensors.
    pub fn accumulate_grads(&mut self, binding: &Binding, grads: &Gradients) {
        for (name, t) in &mut self.tensors {
            if !t.requires_grad {
                continue;
            }
            let Some(var) = binding.vars.get(name) else {
                continue;
            };
            if let Some(g) = grads.get(*var) {
                match &mut t.grad {
                    Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                    slot @ None => *slot = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and values of the tensors matching
    /// `pattern` (`*` for all), as lower-case hex.
    pub fn fingerprint(&self, pattern: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            if pattern_matches(pattern, name) {
                hasher.update((name.len() as u64).to_le_bytes());
                hasher.update(name.as_bytes());
                hasher.update(t.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
