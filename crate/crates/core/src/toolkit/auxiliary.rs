use std::sync::Arc;

use distill_tensor::Tensor;
use rand::rngs::StdRng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, ForwardCtx, LeakyReLU, Module, ReLU, Sequential};
use crate::params::Params;

fn channels(p: &Params, key: &str) -> Result<usize> {
    let c: usize = p.require(key)?;
    if c == 0 {
        return Err(Error::InvalidParam { name: key.into(), message: "must be positive".into() });
    }
    Ok(c)
}

/// Maps a student hint to the teacher hint's channel count. Defaults to one
/// bias-free 1x1 convolution.
pub struct ConvRegressor {
    layers: Sequential,
}

impl ConvRegressor {
    pub fn from_params(p: &Params, rng: &mut StdRng) -> Result<Self> {
        p.expect_only(&["in_channels", "out_channels", "kernel_size", "stride", "padding", "bias", "bn", "relu"])?;
        let (cin, cout) = (channels(p, "in_channels")?, channels(p, "out_channels")?);
        let k: usize = p.get_or("kernel_size", 1)?;
        let mut conv = Conv2d::new(cin, cout, k, p.get_or("stride", 1)?, p.get_or("padding", k / 2)?, rng);
        if p.get_or("bias", false)? {
            conv = conv.with_bias();
        }
        let mut layers: Vec<(String, Arc<dyn Module>)> = vec![("conv".into(), Arc::new(conv))];
        if p.get_or("bn", false)? {
            layers.push(("bn".into(), Arc::new(BatchNorm2d::new(cout))));
        }
        if p.get_or("relu", false)? {
            layers.push(("relu".into(), Arc::new(ReLU)));
        }
        Ok(ConvRegressor { layers: Sequential::named(layers) })
    }
}

impl Module for ConvRegressor {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.layers.forward(x, ctx)
    }
    fn type_name(&self) -> &str {
        "ConvRegressor"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        self.layers.children()
    }
}

fn conv_block(cin: usize, cout: usize, k: usize, bn: bool, transpose: bool, rng: &mut StdRng) -> Vec<Arc<dyn Module>> {
    let conv: Arc<dyn Module> = if transpose {
        Arc::new(ConvTranspose2d::new(cin, cout, k, 1, k / 2, rng))
    } else {
        Arc::new(Conv2d::new(cin, cout, k, 1, k / 2, rng))
    };
    let mut v = vec![conv];
    if bn {
        v.push(Arc::new(BatchNorm2d::new(cout)));
    }
    v.push(Arc::new(LeakyReLU(0.1)));
    v
}

fn factor_channels(cin: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0) {
        return Err(Error::InvalidParam { name: "rate".into(), message: "paraphrase rate must be positive".into() });
    }
    Ok(((cin as f64 * rate).round() as usize).max(1))
}

/// Teacher-side autoencoder; `encoder` yields the factor.
pub struct Paraphraser {
    pub encoder: Arc<Sequential>,
    pub decoder: Arc<Sequential>,
}

impl Paraphraser {
    pub fn from_params(p: &Params, rng: &mut StdRng) -> Result<Self> {
        p.expect_only(&["in_channels", "rate", "kernel_size", "uses_bn"])?;
        let cin = channels(p, "in_channels")?;
        let mid = factor_channels(cin, p.get_or("rate", 0.5)?)?;
        let k: usize = p.get_or("kernel_size", 3)?;
        let bn = p.get_or("uses_bn", true)?;
        let mut enc = conv_block(cin, cin, k, bn, false, rng);
        enc.extend(conv_block(cin, mid, k, bn, false, rng));
        enc.extend(conv_block(mid, mid, k, bn, false, rng));
        let mut dec = conv_block(mid, mid, k, bn, true, rng);
        dec.extend(conv_block(mid, cin, k, bn, true, rng));
        dec.extend(conv_block(cin, cin, k, bn, true, rng));
        Ok(Paraphraser { encoder: Arc::new(Sequential::new(enc)), decoder: Arc::new(Sequential::new(dec)) })
    }
}

impl Module for Paraphraser {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let z = ctx.call("encoder", self.encoder.as_ref(), x)?;
        ctx.call("decoder", self.decoder.as_ref(), &z)
    }
    fn type_name(&self) -> &str {
        "Paraphraser"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        vec![
            ("encoder".into(), self.encoder.clone() as Arc<dyn Module>),
            ("decoder".into(), self.decoder.clone() as Arc<dyn Module>),
        ]
    }
}

/// Student-side encoder producing a factor shaped like the paraphraser's.
pub struct Translator {
    pub encoder: Arc<Sequential>,
}

impl Translator {
    /// `out_channels` defaults to `round(teacher_channels * rate)`, matching the paraphraser.
    pub fn from_params(p: &Params, rng: &mut StdRng) -> Result<Self> {
        p.expect_only(&["in_channels", "out_channels", "teacher_channels", "rate", "kernel_size", "uses_bn"])?;
        let cin = channels(p, "in_channels")?;
        let cout = match p.get::<usize>("out_channels")? {
            Some(c) => c,
            None => factor_channels(channels(p, "teacher_channels")?, p.get_or("rate", 0.5)?)?,
        };
        let k: usize = p.get_or("kernel_size", 3)?;
        let bn = p.get_or("uses_bn", true)?;
        let mut enc = conv_block(cin, cin, k, bn, false, rng);
        enc.extend(conv_block(cin, cout, k, bn, false, rng));
        enc.extend(conv_block(cout, cout, k, bn, false, rng));
        Ok(Translator { encoder: Arc::new(Sequential::new(enc)) })
    }
}

impl Module for Translator {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        ctx.call("encoder", self.encoder.as_ref(), x)
    }
    fn type_name(&self) -> &str {
        "Translator"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        vec![("encoder".into(), self.encoder.clone() as Arc<dyn Module>)]
    }
}
