//! Named parameter storage and the small set of layers the networks use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// All parameters concatenated, in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces values by name; every parameter must be present with its shape.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let v = lookup(name).ok_or_else(|| Error::format("parameters", format!("missing tensor `{name}`")))?;
            if v.shape() != t.shape() {
                return Err(Error::format(
                    "parameters",
                    format!("tensor `{name}` has shape {} but {} is expected", v.shape(), t.shape()),
                ));
            }
            *t = v;
        }
        Ok(())
    }

    /// Records every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Per-parameter gradients from `grads`, zeros where no path exists.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
            .collect()
    }
}

/// Tape variables for one bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-normal tensor scaled by `gain`.
pub fn he_normal<T: Real>(shape: Shape, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Square `k×k` convolution with "same" padding for odd `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(Shape::new(c_out, c_in, k, k), c_in * k * k, gain, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(Shape::new(c_out, c_in, 1, 1), c_in, gain, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        Dense { weight, bias }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_out * c_in + c_out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// `conv → ReLU → conv` with an identity skip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, filters: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            first: Conv::new(params, &format!("{name}.conv1"), filters, filters, 3, 1, 1.0, rng),
            // damped so deep stacks start close to the identity
            second: Conv::new(params, &format!("{name}.conv2"), filters, filters, 3, 1, 0.1, rng),
        }
    }

    pub fn param_count(filters: usize) -> usize {
        2 * Conv::param_count(filters, filters, 3)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, p, h)?;
        tape.add(x, h)
    }
}
