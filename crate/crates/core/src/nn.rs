//! Named parameters, the per-pass graph that binds them to a tape, and the
//! small set of layers the detector is assembled from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Padding, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters become differentiable leaves when `trainable`, constants otherwise.
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable { self.tape.leaf(t)? } else { self.tape.constant(t)? };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Gradient per parameter after `backward`; `None` for parameters the
    /// pass never touched.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v)).map(<[f64]>::to_vec))
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Seeded parameter initialisers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn xavier_uniform(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let v = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::new(&[fan_in, fan_out], v).expect("shape")
    }

    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let v = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, v).expect("shape")
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.xavier_uniform(fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, init, &format!("{name}.{i}"), d[0], d[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init.he_normal(&[c_out, c_in, kernel, kernel], fan_in),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// `[C, H, W] -> [H·W, C]`, row-major over pixels.
pub fn flatten_tokens(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let m = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(m)
}
