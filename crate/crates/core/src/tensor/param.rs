use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable leaf.
///
/// Updates replace the underlying leaf rather than mutating it, so tensors
/// handed out by earlier forward passes stay immutable.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Parameter> {
        let tensor = Tensor::from_vec(shape, data)?.requires_grad(true);
        Ok(Parameter {
            name: name.into(),
            tensor,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Replaces the values, dropping any accumulated gradient.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.tensor.numel() {
            return Err(Error::shape(format!(
                "parameter {}: {} values for shape {:?}",
                self.name,
                data.len(),
                self.tensor.shape()
            )));
        }
        self.tensor = Tensor::from_vec(self.tensor.shape(), data)?.requires_grad(true);
        Ok(())
    }

    /// Installs an existing tensor (same shape) as this parameter's value.
    /// Used by gradient checks that perturb parameters from outside.
    pub fn set_tensor(&mut self, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {}: tensor shape {:?}, expected {:?}",
                self.name,
                tensor.shape(),
                self.tensor.shape()
            )));
        }
        self.tensor = tensor;
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}
