//! Named learnable tensors and their deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))`.
    Uniform { fan_in: usize },
    Constant(f64),
}

impl Init {
    pub const ZEROS: Init = Init::Constant(0.0);
}

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Stream of values for `(seed, name)`: a ChaCha keystream, so the `i`-th
/// value never depends on other parameters or on registration order.
pub fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: impl Into<Shape>, init: Init) -> Tensor<T> {
    let shape = shape.into();
    match init {
        Init::Constant(v) => Tensor::full(shape, T::lit(v)),
        Init::Uniform { fan_in } => {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ fnv1a(name.as_bytes()));
            Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)))
        }
    }
}

/// Ordered name → tensor map holding every learnable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Registers `name` initialized from `(seed, name)`.
    pub fn init(&mut self, seed: u64, name: impl Into<String>, shape: impl Into<Shape>, init: Init) -> Result<()> {
        let name = name.into();
        let t = init_tensor(seed, &name, shape, init);
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Overwrites an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!("parameter `{name}` is {}, got {}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Graph variables for every parameter of a store, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of all bound parameters after `backward`.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad_tensor(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), grad)
            })
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    /// Inserts every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        Bound { vars: store.iter().map(|(k, t)| (k.to_string(), self.param(t.clone()))).collect() }
    }
}
