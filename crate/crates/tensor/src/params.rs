use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// FNV-1a digest over names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (k, v) in &self.tensors {
            eat(k.as_bytes());
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}

/// Binds parameters from a [`ParamStore`] onto a [`Graph`] under a name
/// prefix, either as trainable leaves or as frozen constants.
#[derive(Clone)]
pub struct Binder<'a, 'g, T: Element> {
    graph: &'g Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    prefix: String,
    overrides: Rc<HashMap<String, Var<'g, T>>>,
}

impl<'a, 'g, T: Element> Binder<'a, 'g, T> {
    pub fn trainable(graph: &'g Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(graph, store, true)
    }

    pub fn frozen(graph: &'g Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(graph, store, false)
    }

    fn new(graph: &'g Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            graph,
            store,
            trainable,
            prefix: String::new(),
            overrides: Rc::new(HashMap::new()),
        }
    }

    /// Substitutes `var` for the parameter with full name `name`.
    pub fn with_override(mut self, name: &str, var: Var<'g, T>) -> Self {
        Rc::make_mut(&mut self.overrides).insert(name.to_string(), var);
        self
    }

    pub fn scope(&self, sub: &str) -> Self {
        let mut b = self.clone();
        b.prefix = format!("{}{}.", self.prefix, sub);
        b
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        let full = format!("{}{}", self.prefix, name);
        if let Some(v) = self.overrides.get(&full) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(&full)
            .ok_or_else(|| TensorError::invalid("param", format!("missing parameter {full}")))?;
        Ok(if self.trainable {
            self.graph.param(&full, t)
        } else {
            self.graph.frozen(&full, t)
        })
    }
}
