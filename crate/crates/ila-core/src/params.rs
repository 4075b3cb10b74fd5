//! Named parameter storage shared by backbone and adapters.
//!
//! Parameters persist across steps; each forward pass binds them onto a
//! fresh tape as leaves. `Frozen` tensors never receive gradients or
//! updates, `Buffer` tensors (BatchNorm running stats) are updated out of
//! band by the training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Frozen,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Parameter leaves registered on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unbound parameter `{name}`")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) {
        self.params.insert(
            String::from(name),
            Param {
                kind,
                value,
                grad: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_with_kind(&self, kind: ParamKind) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == kind)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.names_with_kind(ParamKind::Trainable)
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.names_with_kind(ParamKind::Frozen)
    }

    /// Register every non-buffer parameter as a tape leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            if p.kind == ParamKind::Buffer {
                continue;
            }
            let v = g.leaf(&p.value, p.kind == ParamKind::Trainable);
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Accumulate tape gradients into the persistent grad buffers of
    /// trainable parameters. Grads add up until [`ParamStore::zero_grads`].
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (name, var) in &bound.vars {
            let p = self.params.get_mut(name).expect("bound name exists");
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.wrt(*var) else { continue };
            let buf = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (d, &gv) in buf.data_mut().iter_mut().zip(g) {
                *d += gv;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn total_elems(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn trainable_elems(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn accumulate_only_touches_trainable() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0), ParamKind::Trainable);
        store.insert("frozen", Tensor::full(&[2], 1.0), ParamKind::Frozen);

        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let w = bound.var("w").unwrap();
        let f = bound.var("frozen").unwrap();
        let s0 = g.add(w, f).unwrap();
        let loss = g.sum(s0);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads, &bound).unwrap();

        assert_eq!(store.get("w").unwrap().grad.as_ref().unwrap().data(), &[1.0, 1.0]);
        assert!(store.get("frozen").unwrap().grad.is_none());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0), ParamKind::Trainable);
        for _ in 0..2 {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let w = bound.var("w").unwrap();
            let loss = g.sum(w);
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads, &bound).unwrap();
        }
        assert_eq!(store.get("w").unwrap().grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        store.zero_grads();
        assert!(store.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn partition_of_names() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[1]), ParamKind::Trainable);
        store.insert("b", Tensor::zeros(&[1]), ParamKind::Frozen);
        store.insert("c", Tensor::zeros(&[1]), ParamKind::Buffer);
        assert_eq!(store.trainable_names(), vec![String::from("a")]);
        assert_eq!(store.frozen_names(), vec![String::from("b")]);
        assert_eq!(store.total_elems(), 2); // buffers not counted
    }
}
