//! Named parameter storage and the small layer helpers the model is built from.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has dims {stored:?}, got {given:?}")]
    Dims { name: String, stored: Vec<usize>, given: Vec<usize> },
    #[error("parameter tables differ; missing: [{}], extra: [{}]", missing.join(", "), extra.join(", "))]
    Schema { missing: Vec<String>, extra: Vec<String> },
}

/// Ordered name → tensor table. Insertion order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Element> fmt::Debug for ParamSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.names.iter().zip(self.tensors.iter().map(Tensor::dims))).finish()
    }
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a tensor, keeping its dims.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<(), ParamError> {
        let i = *self.index.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if self.tensors[i].dims() != t.dims() {
            return Err(ParamError::Dims {
                name: name.to_string(),
                stored: self.tensors[i].dims().to_vec(),
                given: t.dims().to_vec(),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of the parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Overwrites every tensor from `other`, which must have exactly the same
    /// names and dims.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<(), ParamError> {
        self.check_schema(other.names().iter().map(String::as_str))?;
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn check_schema<'a>(&self, names: impl Iterator<Item = &'a str>) -> Result<(), ParamError> {
        let given: Vec<&str> = names.collect();
        let missing: Vec<String> =
            self.names.iter().filter(|n| !given.contains(&n.as_str())).cloned().collect();
        let extra: Vec<String> =
            given.iter().filter(|n| !self.index.contains_key(**n)).map(|s| s.to_string()).collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(ParamError::Schema { missing, extra })
        }
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect() }
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already recorded on a tape, one per parameter in table order.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in table order. A parameter the loss never
    /// reached gets a zero gradient.
    pub fn gradients<T: Element>(&self, params: &ParamSet<T>, mut grads: Gradients<T>) -> GradientSet<T> {
        let g = self
            .vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(t.dims()))))
            .collect();
        GradientSet { grads: g }
    }
}

/// Gradients aligned with a [`ParamSet`]; `None` marks a missing entry.
#[derive(Clone)]
pub struct GradientSet<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

/// He-style fan-in normal initialisation.
pub fn he_normal<T: Element, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    normal(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal<T: Element, R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(dims.to_vec(), &data).expect("finite init")
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        inp: usize,
        out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let w = if zero { Tensor::zeros(&[out, inp]) } else { he_normal(&[out, inp], inp, rng) };
        let weight = params.add(format!("{name}.weight"), w)?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out]))?;
        Ok(Linear { weight, bias, inp, out })
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, b: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, b.var(self.weight), Some(b.var(self.bias)))
    }
}

/// Square-kernel convolution, weight `[out, in, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let weight = params.add(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, rng))?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, b: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.conv2d(x, b.var(self.weight), Some(b.var(self.bias)), self.stride, self.pad)
    }
}
