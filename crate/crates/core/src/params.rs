//! Named parameter tensors and their text checkpoint format.
//!
//! A checkpoint is a sequence of `name: <name>` header lines, each followed
//! by one tensor in the text dump format.

use indexmap::IndexMap;
use rand::Rng;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Inserts a `uniform(-a, a)` tensor with `a = 1/√fan_in`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Binds every tensor as a backend constant.
    pub fn bind<B: Backend>(&self, backend: &B) -> Bound<B::Value> {
        Bound {
            values: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), backend.constant(t.clone())))
                .collect(),
        }
    }

    /// Binds every tensor as a differentiable tape input.
    pub fn bind_inputs(&self, tape: &GradTape) -> Bound<Var> {
        Bound {
            values: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.input(t.clone())))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        for (name, t) in &self.tensors {
            out.push_str("name: ");
            out.push_str(name);
            out.push('\n');
            out.push_str(&t.to_text());
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut store = Self::new();
        let mut current: Option<(String, usize, String)> = None;
        let mut flush = |entry: Option<(String, usize, String)>| -> Result<()> {
            if let Some((name, line, body)) = entry {
                let t = Tensor::from_text(&body).map_err(|e| Error::Parse {
                    line,
                    reason: format!("tensor `{name}`: {e}"),
                })?;
                store.insert(name, t);
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("name:") {
                flush(current.take())?;
                current = Some((name.trim().to_string(), i + 1, String::new()));
            } else if let Some((_, _, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !line.trim().is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "content before the first `name:` header".into(),
                });
            }
        }
        flush(current)?;
        Ok(store)
    }
}

/// Parameters bound to a backend, looked up by name.
#[derive(Debug, Clone)]
pub struct Bound<V> {
    values: IndexMap<String, V>,
}

impl<V> Bound<V> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, V)>) -> Self {
        Self {
            values: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&V> {
        self.values
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &V)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Bound<Var> {
    /// Gradients keyed by parameter name.
    pub fn collect_grads(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, var) in &self.values {
            if let Some(g) = grads.wrt(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_keeps_order() {
        let mut p = ParamStore::new();
        p.insert("b.w", Tensor::new(vec![2], vec![0.1, -3.0]).unwrap());
        p.insert("a.b", Tensor::scalar(7.0));
        let text = p.to_checkpoint();
        assert!(text.starts_with("name: b.w\nshape: 2\n"));
        let back = ParamStore::from_checkpoint(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["b.w", "a.b"]);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(ParamStore::from_checkpoint("shape: 1\n1\n").is_err());
        assert!(ParamStore::from_checkpoint("name: x\nshape: 2\n1\n").is_err());
        assert!(ParamStore::new().get("missing").is_err());
    }
}
