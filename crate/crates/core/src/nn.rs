//! Named trainable parameters, initializers, and small layer wrappers
//! shared by the encoder and decoder stages.
//!
//! A [`Param`] is a named cell holding the current leaf tensor of one weight.
//! Forward passes read the cell; the optimizer swaps in a fresh leaf after
//! each step, so tensors themselves stay immutable.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    activation, batch_norm_infer, conv2d, layer_norm, linear, ActKind, Tensor,
};
use crate::{invalid, Result};

#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    cell: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Param {
        Param {
            name: name.into().into(),
            cell: Rc::new(RefCell::new(value)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current leaf tensor (cheap handle clone).
    pub fn get(&self) -> Tensor {
        self.cell.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cell.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.cell.borrow().numel()
    }

    /// Replace the stored values with a fresh tracked leaf of the same shape.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let shape = self.shape();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(invalid(format!(
                "parameter {}: expected {numel} values, got {}",
                self.name,
                data.len()
            )));
        }
        *self.cell.borrow_mut() = Tensor::new_param(&shape, data)?;
        Ok(())
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new_param(shape, data).expect("init shape")
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new_param(shape, data).expect("init shape")
}

pub fn const_param(shape: &[usize], value: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new_param(shape, vec![value; n]).expect("init shape")
}

/// Convolution with kaiming-uniform weights. Biases draw from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; an exactly zero bias would leave
/// relu inputs sitting exactly on the kink wherever a receptive field is
/// all zeros, which breaks finite-difference gradient checks.
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let fan_in = in_ch * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = Tensor::new_param(&[out_ch], bias).expect("init shape");
        Conv2d {
            w: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
            ),
            b: Param::new(format!("{name}.b"), bias),
            stride,
            pad,
        }
    }

    /// Convolution with a fixed bias value, for prediction heads that start
    /// from a background prior.
    pub fn with_bias(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias_init: f64,
    ) -> Conv2d {
        let fan_in = in_ch * k * k;
        Conv2d {
            w: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
            ),
            b: Param::new(format!("{name}.b"), const_param(&[out_ch], bias_init)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.w.get(), &self.b.get(), self.stride, self.pad)?)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Token-space affine map with xavier-uniform weights.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: Param::new(
                format!("{name}.w"),
                xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
            ),
            b: Param::new(format!("{name}.b"), const_param(&[d_out], 0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(linear(x, &self.w.get(), &self.b.get())?)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), const_param(&[dim], 1.0)),
            beta: Param::new(format!("{name}.beta"), const_param(&[dim], 0.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x, &self.gamma.get(), &self.beta.get(), self.eps)?)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Inference-style batch norm: learnable affine over running statistics
/// frozen at mean 0, variance 1.
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    mean: Tensor,
    var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, ch: usize) -> BatchNorm {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), const_param(&[ch], 1.0)),
            beta: Param::new(format!("{name}.beta"), const_param(&[ch], 0.0)),
            mean: Tensor::zeros(&[ch]),
            var: Tensor::full(&[ch], 1.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(batch_norm_infer(
            x,
            &self.mean,
            &self.var,
            &self.gamma.get(),
            &self.beta.get(),
            self.eps,
        )?)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(activation(x, ActKind::Relu)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(activation(x, ActKind::Sigmoid)?)
}
