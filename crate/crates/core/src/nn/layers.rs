use std::sync::Arc;

use distill_tensor::{DType, Param, Tensor};
use rand::rngs::StdRng;

use super::{ForwardCtx, Module};
use crate::error::Result;

fn bias_4d(b: &Param, c: usize) -> Result<Tensor> {
    Ok(b.tensor().reshape(vec![1, c, 1, 1])?)
}

/// 2-D convolution with square kernels; weight is (out, in, k, k).
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal init (fan-out), no bias.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, rng: &mut StdRng) -> Self {
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: Param::new(Tensor::randn(vec![cout, cin, kernel, kernel], std, DType::F32, rng)),
            bias: None,
            stride,
            padding,
        }
    }

    pub fn with_bias(mut self) -> Self {
        let cout = self.weight.shape()[0];
        self.bias = Some(Param::new(Tensor::zeros(vec![cout], DType::F32)));
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.add(&bias_4d(b, self.out_channels())?)?),
            None => Ok(y),
        }
    }
    fn type_name(&self) -> &str {
        "Conv2d"
    }
    fn local_params(&self) -> Vec<(String, Param)> {
        let mut v = vec![("weight".to_string(), self.weight.clone())];
        if let Some(b) = &self.bias {
            v.push(("bias".into(), b.clone()));
        }
        v
    }
}

/// Transposed convolution; weight is (in, out, k, k).
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, rng: &mut StdRng) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        ConvTranspose2d {
            weight: Param::new(Tensor::randn(vec![cin, cout, kernel, kernel], std, DType::F32, rng)),
            bias: None,
            stride,
            padding,
            output_padding: 0,
        }
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight.tensor(), self.stride, self.padding, self.output_padding)?;
        match &self.bias {
            Some(b) => Ok(y.add(&bias_4d(b, self.weight.shape()[1])?)?),
            None => Ok(y),
        }
    }
    fn type_name(&self) -> &str {
        "ConvTranspose2d"
    }
    fn local_params(&self) -> Vec<(String, Param)> {
        let mut v = vec![("weight".to_string(), self.weight.clone())];
        if let Some(b) = &self.bias {
            v.push(("bias".into(), b.clone()));
        }
        v
    }
}

pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(Tensor::ones(vec![c], DType::F32)),
            bias: Param::new(Tensor::zeros(vec![c], DType::F32)),
            running_mean: Param::buffer(Tensor::zeros(vec![c], DType::F32)),
            running_var: Param::buffer(Tensor::ones(vec![c], DType::F32)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (g, b) = (self.weight.tensor(), self.bias.tensor());
        if !ctx.is_training() {
            return Ok(x.batch_norm_eval(&g, &b, &self.running_mean.value(), &self.running_var.value(), self.eps)?);
        }
        let (y, stats) = x.batch_norm_train(&g, &b, self.eps)?;
        let m = self.momentum;
        let blend = |buf: &Param, batch: &[f64]| -> Result<()> {
            let old = buf.value().to_vec_f64();
            let new: Vec<f64> = old.iter().zip(batch).map(|(o, n)| (1.0 - m) * o + m * n).collect();
            buf.set(&Tensor::from_f64_slice(&new, buf.shape().to_vec(), buf.dtype())?)?;
            Ok(())
        };
        blend(&self.running_mean, &stats.mean)?;
        blend(&self.running_var, &stats.var_unbiased)?;
        Ok(y)
    }
    fn type_name(&self) -> &str {
        "BatchNorm2d"
    }
    fn local_params(&self) -> Vec<(String, Param)> {
        vec![("weight".into(), self.weight.clone()), ("bias".into(), self.bias.clone())]
    }
    fn local_buffers(&self) -> Vec<(String, Param)> {
        vec![("running_mean".into(), self.running_mean.clone()), ("running_var".into(), self.running_var.clone())]
    }
}

/// Fully connected layer; weight is (out, in).
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut StdRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::rand_uniform(vec![fan_out, fan_in], -bound, bound, DType::F32, rng)),
            bias: Some(Param::new(Tensor::rand_uniform(vec![fan_out], -bound, bound, DType::F32, rng))),
        }
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        let y = x.matmul(&self.weight.tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.add(&b.tensor())?),
            None => Ok(y),
        }
    }
    fn type_name(&self) -> &str {
        "Linear"
    }
    fn local_params(&self) -> Vec<(String, Param)> {
        let mut v = vec![("weight".to_string(), self.weight.clone())];
        if let Some(b) = &self.bias {
            v.push(("bias".into(), b.clone()));
        }
        v
    }
}

pub struct ReLU;

impl Module for ReLU {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        Ok(x.relu())
    }
    fn type_name(&self) -> &str {
        "ReLU"
    }
}

pub struct LeakyReLU(pub f64);

impl Module for LeakyReLU {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        Ok(x.leaky_relu(self.0))
    }
    fn type_name(&self) -> &str {
        "LeakyReLU"
    }
}

/// Global average pooling that also flattens: (N, C, H, W) -> (N, C).
pub struct GlobalAvgPool;

impl Module for GlobalAvgPool {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        x.dims4("GlobalAvgPool")?;
        Ok(x.mean_dims(&[2, 3], false)?)
    }
    fn type_name(&self) -> &str {
        "GlobalAvgPool"
    }
}

pub struct Flatten;

impl Module for Flatten {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        Ok(x.flatten_from1()?)
    }
    fn type_name(&self) -> &str {
        "Flatten"
    }
}

pub struct Identity;

impl Module for Identity {
    fn forward(&self, x: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        Ok(x.clone())
    }
    fn type_name(&self) -> &str {
        "Identity"
    }
}

/// Consumes its input and produces an empty tensor without doing any math.
pub struct Empty;

impl Module for Empty {
    fn forward(&self, _: &Tensor, _: &mut ForwardCtx) -> Result<Tensor> {
        Ok(Tensor::zeros(vec![0], DType::F32))
    }
    fn type_name(&self) -> &str {
        "Empty"
    }
}

/// Children run in order; named "0", "1", ... unless names are given.
pub struct Sequential {
    pub layers: Vec<(String, Arc<dyn Module>)>,
}

impl Sequential {
    pub fn new(layers: Vec<Arc<dyn Module>>) -> Self {
        Sequential { layers: layers.into_iter().enumerate().map(|(i, m)| (i.to_string(), m)).collect() }
    }

    pub fn named(layers: Vec<(String, Arc<dyn Module>)>) -> Self {
        Sequential { layers }
    }
}

impl Module for Sequential {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for (name, m) in &self.layers {
            h = ctx.call(name, m.as_ref(), &h)?;
        }
        Ok(h)
    }
    fn type_name(&self) -> &str {
        "Sequential"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        self.layers.clone()
    }
}
