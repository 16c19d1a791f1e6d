//! Named parameter storage and per-pass binding of parameters to tape leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat, name-ordered map of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Names under `prefix` (matched on whole dot-separated segments).
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names()
            .filter(move |n| n.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.')))
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// A store with the same names and shapes, all zero.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Deterministic generator for the parameters of one namespace.
///
/// Each namespace draws from its own ChaCha stream, so adding or removing one
/// submodule leaves the initial weights of every other submodule unchanged.
pub fn init_rng(seed: u64, namespace: &str) -> ChaCha8Rng {
    // FNV-1a over the namespace selects the stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in namespace.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Parameters of a [`ParamStore`] bound lazily to leaves of one tape.
pub struct Bound<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Bound {
            tape,
            store,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The tape variable for parameter `name`, recording it on first use.
    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let v = self.tape.leaf(value.clone(), true);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter of the store; unused parameters get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        let vars = self.vars.borrow();
        let mut out = ParamStore::new();
        for (name, value) in self.store.iter() {
            let g = vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.params.insert(name.to_string(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn namespaces_draw_independent_streams() {
        let a1 = init_rng(3, "unet").next_u64();
        let a2 = init_rng(3, "unet").next_u64();
        let b = init_rng(3, "swin").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }

    #[test]
    fn prefix_matches_whole_segments() {
        let mut s = ParamStore::new();
        s.insert("swin.a", Tensor::zeros(&[1])).unwrap();
        s.insert("swinx.b", Tensor::zeros(&[1])).unwrap();
        assert_eq!(s.names_with_prefix("swin").collect::<Vec<_>>(), ["swin.a"]);
        assert!(s.insert("swin.a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[2], 3.0)).unwrap();
        s.insert("b", Tensor::ones(&[4])).unwrap();
        let tape = Tape::new();
        let bound = Bound::new(&tape, &s);
        let a = bound.var("a").unwrap();
        let y = tape.sum(a);
        let mut g = tape.backward(y);
        let grads = bound.gradients(&mut g);
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[0.0; 4]);
        assert!(bound.var("missing").is_err());
    }
}
