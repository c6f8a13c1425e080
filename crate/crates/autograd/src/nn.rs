//! Parameterized layers.
//!
//! Weights use the uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! for both weights and biases.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::param::{Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;

fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(&[fan_out, fan_in], fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), fan_in_uniform(&[fan_out], fan_in, rng)),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, Some(b))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), fan_in_uniform(&[c_out], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_out * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(&[c_in, c_out, kernel, kernel], fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), fan_in_uniform(&[c_out], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Instance normalisation with learnable per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: T,
}

impl<T: Real> InstanceNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: T::lit(1e-5),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.instance_norm(x, gamma, beta, self.eps)
    }
}

impl<T: Real> Module<T> for InstanceNorm2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
