//! Parameterised building blocks shared by the network modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dOptions, Module, Parameter, Tensor};

/// Seeded source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    /// He-normal values for a layer with the given fan-in.
    pub fn he(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        self.normal(n, (2.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: Padding,
    pub groups: usize,
}

/// Shape description for [`Conv2d::new`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
    pub padding_mode: Padding,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> ConvSpec {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            groups: 1,
            bias: true,
            padding_mode: Padding::Zero,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.c_in;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn reflect(mut self) -> Self {
        self.padding_mode = Padding::Reflect;
        self
    }
}

impl Conv2d {
    /// Same-padded convolution with He-normal weights and zero bias.
    pub fn new(name: &str, spec: ConvSpec, init: &mut Init) -> Result<Conv2d> {
        let cg = spec.c_in / spec.groups;
        let fan_in = cg * spec.kernel * spec.kernel;
        let wshape = [spec.c_out, cg, spec.kernel, spec.kernel];
        let weight = Parameter::new(
            format!("{name}.weight"),
            &wshape,
            init.he(wshape.iter().product(), fan_in),
        )?;
        Conv2d::with_weight(name, spec, weight)
    }

    /// Convolution whose weight starts at a constant.
    pub fn constant(name: &str, spec: ConvSpec, value: f64) -> Result<Conv2d> {
        let cg = spec.c_in / spec.groups;
        let wshape = [spec.c_out, cg, spec.kernel, spec.kernel];
        let n = wshape.iter().product();
        let weight = Parameter::new(format!("{name}.weight"), &wshape, vec![value; n])?;
        Conv2d::with_weight(name, spec, weight)
    }

    fn with_weight(name: &str, spec: ConvSpec, weight: Parameter) -> Result<Conv2d> {
        let bias = if spec.bias {
            Some(Parameter::new(
                format!("{name}.bias"),
                &[spec.c_out],
                vec![0.0; spec.c_out],
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.kernel / 2,
            padding_mode: spec.padding_mode,
            groups: spec.groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (input, padding) = match self.padding_mode {
            Padding::Zero => (x.clone(), self.padding),
            Padding::Reflect => (x.pad_reflect(self.padding)?, 0),
        };
        input.conv2d(
            self.weight.tensor(),
            self.bias.as_ref().map(Parameter::tensor),
            Conv2dOptions {
                stride: self.stride,
                padding,
                groups: self.groups,
            },
        )
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Affine map over the last axis: `x · W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Result<Linear> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), &[d_in, d_out], init.normal(d_in * d_out, std))?,
            bias: Parameter::new(format!("{name}.bias"), &[d_out], vec![0.0; d_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.ndim() - 1;
        x.matmul(self.weight.tensor())?.add_along(self.bias.tensor(), last)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

const NORM_EPS: f64 = 1e-5;

/// Batch-free group normalisation over BCHW with a per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest divisor of `channels` not exceeding 8 as group count.
    pub fn new(name: &str, channels: usize) -> Result<GroupNorm> {
        let groups = (1..=channels.min(8))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        Ok(GroupNorm {
            gamma: Parameter::new(format!("{name}.gamma"), &[channels], vec![1.0; channels])?,
            beta: Parameter::new(format!("{name}.beta"), &[channels], vec![0.0; channels])?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let chunk = s[1] / self.groups * s[2] * s[3];
        x.normalize_chunks(chunk, NORM_EPS)?
            .mul_along(self.gamma.tensor(), 1)?
            .add_along(self.beta.tensor(), 1)
    }
}

impl Module for GroupNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Normalisation over the last axis with a per-feature affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), &[dim], vec![1.0; dim])?,
            beta: Parameter::new(format!("{name}.beta"), &[dim], vec![0.0; dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.ndim() - 1;
        let dim = x.shape()[last];
        x.normalize_chunks(dim, NORM_EPS)?
            .mul_along(self.gamma.tensor(), last)?
            .add_along(self.beta.tensor(), last)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
