//! Small reference models and a deterministic synthetic image dataset.

use std::path::PathBuf;
use std::sync::Arc;

use distill_tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::data::{derive_seed, Dataset, Image};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Flatten, ForwardCtx, GlobalAvgPool, Linear, Module, ReLU, Sequential};
use crate::params::Params;

/// torchvision-style basic residual block. `relu` runs twice, so a hook on
/// it keeps the second call: the post-addition pre-activation as input.
pub struct BasicBlock {
    pub conv1: Arc<Conv2d>,
    pub bn1: Arc<BatchNorm2d>,
    pub relu: Arc<ReLU>,
    pub conv2: Arc<Conv2d>,
    pub bn2: Arc<BatchNorm2d>,
    pub downsample: Option<Arc<Sequential>>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut StdRng) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            Arc::new(Sequential::new(vec![
                Arc::new(Conv2d::new(cin, cout, 1, stride, 0, rng)),
                Arc::new(BatchNorm2d::new(cout)),
            ]))
        });
        BasicBlock {
            conv1: Arc::new(Conv2d::new(cin, cout, 3, stride, 1, rng)),
            bn1: Arc::new(BatchNorm2d::new(cout)),
            relu: Arc::new(ReLU),
            conv2: Arc::new(Conv2d::new(cout, cout, 3, 1, 1, rng)),
            bn2: Arc::new(BatchNorm2d::new(cout)),
            downsample,
        }
    }
}

impl Module for BasicBlock {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let out = ctx.call("conv1", self.conv1.as_ref(), x)?;
        let out = ctx.call("bn1", self.bn1.as_ref(), &out)?;
        let out = ctx.call("relu", self.relu.as_ref(), &out)?;
        let out = ctx.call("conv2", self.conv2.as_ref(), &out)?;
        let out = ctx.call("bn2", self.bn2.as_ref(), &out)?;
        let identity = match &self.downsample {
            Some(d) => ctx.call("downsample", d.as_ref(), x)?,
            None => x.clone(),
        };
        ctx.call("relu", self.relu.as_ref(), &out.add(&identity)?)
    }
    fn type_name(&self) -> &str {
        "BasicBlock"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        let mut c: Vec<(String, Arc<dyn Module>)> = vec![
            ("conv1".into(), self.conv1.clone()),
            ("bn1".into(), self.bn1.clone()),
            ("relu".into(), self.relu.clone()),
            ("conv2".into(), self.conv2.clone()),
            ("bn2".into(), self.bn2.clone()),
        ];
        if let Some(d) = &self.downsample {
            c.push(("downsample".into(), d.clone()));
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyResNetConfig {
    /// Residual blocks per stage.
    pub depth: usize,
    /// Channels of the first stage; doubled at every later stage.
    pub width: usize,
    pub stages: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
}

impl Default for TinyResNetConfig {
    fn default() -> Self {
        TinyResNetConfig { depth: 1, width: 16, stages: 3, num_classes: 10, in_channels: 3, image_size: 16 }
    }
}

impl TinyResNetConfig {
    pub fn from_params(p: &Params, depth: Option<usize>) -> Result<Self> {
        let mut allowed = vec!["width", "stages", "num_classes", "in_channels", "image_size", "pretrained"];
        if depth.is_none() {
            allowed.push("depth");
        }
        p.expect_only(&allowed)?;
        let d = TinyResNetConfig::default();
        let cfg = TinyResNetConfig {
            depth: match depth {
                Some(d) => d,
                None => p.require("depth")?,
            },
            width: p.get_or("width", d.width)?,
            stages: p.get_or("stages", d.stages)?,
            num_classes: p.get_or("num_classes", d.num_classes)?,
            in_channels: p.get_or("in_channels", d.in_channels)?,
            image_size: p.get_or("image_size", d.image_size)?,
        };
        for (k, v) in [
            ("depth", cfg.depth),
            ("width", cfg.width),
            ("stages", cfg.stages),
            ("num_classes", cfg.num_classes),
            ("in_channels", cfg.in_channels),
            ("image_size", cfg.image_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidParam { name: k.into(), message: "must be positive".into() });
            }
        }
        Ok(cfg)
    }

    /// File stem identifying pretrained weights for this configuration.
    pub fn weights_stem(&self) -> String {
        format!(
            "tinyresnet_d{}-w{}-s{}-c{}-i{}x{}",
            self.depth, self.width, self.stages, self.num_classes, self.in_channels, self.image_size
        )
    }
}

/// ResNet-style CNN: conv1, bn1, relu, layer1..layerN, avgpool, fc.
pub struct TinyResNet {
    pub config: TinyResNetConfig,
    pub conv1: Arc<Conv2d>,
    pub bn1: Arc<BatchNorm2d>,
    pub relu: Arc<ReLU>,
    pub layers: Vec<Arc<Sequential>>,
    pub avgpool: Arc<GlobalAvgPool>,
    pub fc: Arc<Linear>,
}

impl TinyResNet {
    pub fn new(config: TinyResNetConfig, rng: &mut StdRng) -> Self {
        let w = config.width;
        let conv1 = Arc::new(Conv2d::new(config.in_channels, w, 3, 1, 1, rng));
        let mut layers = Vec::new();
        let mut cin = w;
        for s in 0..config.stages {
            let cout = w << s;
            let stride = if s == 0 { 1 } else { 2 };
            let blocks: Vec<Arc<dyn Module>> = (0..config.depth)
                .map(|b| {
                    let blk =
                        BasicBlock::new(if b == 0 { cin } else { cout }, cout, if b == 0 { stride } else { 1 }, rng);
                    Arc::new(blk) as Arc<dyn Module>
                })
                .collect();
            layers.push(Arc::new(Sequential::new(blocks)));
            cin = cout;
        }
        TinyResNet {
            fc: Arc::new(Linear::new(cin, config.num_classes, rng)),
            conv1,
            bn1: Arc::new(BatchNorm2d::new(w)),
            relu: Arc::new(ReLU),
            layers,
            avgpool: Arc::new(GlobalAvgPool),
            config,
        }
    }

    /// Channel count of the output of `layer{stage}` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.config.width << (stage - 1)
    }
}

impl Module for TinyResNet {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = ctx.call("conv1", self.conv1.as_ref(), x)?;
        h = ctx.call("bn1", self.bn1.as_ref(), &h)?;
        h = ctx.call("relu", self.relu.as_ref(), &h)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = ctx.call(&format!("layer{}", i + 1), layer.as_ref(), &h)?;
        }
        h = ctx.call("avgpool", self.avgpool.as_ref(), &h)?;
        ctx.call("fc", self.fc.as_ref(), &h)
    }
    fn type_name(&self) -> &str {
        "TinyResNet"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        let mut c: Vec<(String, Arc<dyn Module>)> = vec![
            ("conv1".into(), self.conv1.clone()),
            ("bn1".into(), self.bn1.clone()),
            ("relu".into(), self.relu.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            c.push((format!("layer{}", i + 1), l.clone()));
        }
        c.push(("avgpool".into(), self.avgpool.clone()));
        c.push(("fc".into(), self.fc.clone()));
        c
    }
    fn input_shape(&self) -> Option<Vec<usize>> {
        let c = &self.config;
        Some(vec![c.in_channels, c.image_size, c.image_size])
    }
}

/// Multi-layer perceptron over flattened images: flatten, fc1, relu1, ..., fcN.
pub struct Mlp {
    input_shape: Vec<usize>,
    layers: Sequential,
}

impl Mlp {
    pub fn from_params(p: &Params, rng: &mut StdRng) -> Result<Self> {
        p.expect_only(&["input_shape", "hidden", "num_classes"])?;
        let input_shape: Vec<usize> = p.get_or("input_shape", vec![3, 16, 16])?;
        let hidden: Vec<usize> = p.get_or("hidden", vec![128])?;
        let classes: usize = p.get_or("num_classes", 10)?;
        let mut layers: Vec<(String, Arc<dyn Module>)> = vec![("flatten".into(), Arc::new(Flatten))];
        let mut fan_in: usize = input_shape.iter().product();
        for (i, &h) in hidden.iter().enumerate() {
            layers.push((format!("fc{}", i + 1), Arc::new(Linear::new(fan_in, h, rng))));
            layers.push((format!("relu{}", i + 1), Arc::new(ReLU)));
            fan_in = h;
        }
        layers.push((format!("fc{}", hidden.len() + 1), Arc::new(Linear::new(fan_in, classes, rng))));
        Ok(Mlp { input_shape, layers: Sequential::named(layers) })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.layers.forward(x, ctx)
    }
    fn type_name(&self) -> &str {
        "Mlp"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        self.layers.children()
    }
    fn input_shape(&self) -> Option<Vec<usize>> {
        Some(self.input_shape.clone())
    }
}

/// Directory holding the bundled pretrained weights.
pub fn assets_dir() -> PathBuf {
    match std::env::var_os("DISTILL_ASSETS") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets"),
    }
}

pub fn pretrained_path(cfg: &TinyResNetConfig) -> PathBuf {
    assets_dir().join(format!("{}.ckpt", cfg.weights_stem()))
}

pub fn tinyresnet(p: &Params, depth: Option<usize>, rng: &mut StdRng) -> Result<TinyResNet> {
    let cfg = TinyResNetConfig::from_params(p, depth)?;
    let model = TinyResNet::new(cfg, rng);
    if p.get_or("pretrained", false)? {
        let path = pretrained_path(&model.config);
        if !path.is_file() {
            return Err(Error::InvalidParam {
                name: "pretrained".into(),
                message: format!("no pretrained weights for this configuration ({} not found)", path.display()),
            });
        }
        crate::toolkit::load_ckpt(&model, &path)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Distinct prototypes per class.
    pub modes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Generator seed; independent of the experiment seed.
    pub seed: u64,
    /// Upper bound of the weight given to a second, distracting class.
    pub blend: f64,
    /// Std of additive pixel noise on the 0..255 scale.
    pub noise: f64,
    /// Maximum random translation in pixels.
    pub max_shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            image_size: 16,
            channels: 3,
            modes: 2,
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            seed: 0,
            blend: 0.5,
            noise: 24.0,
            max_shift: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Class-conditional images: a noisy, shifted blend of a class prototype and a
/// weaker prototype of another class. Sample `i` of a split depends only on
/// the generator seed and its global id; labels cycle through the classes.
pub struct SyntheticImages {
    spec: SyntheticSpec,
    split: Split,
    prototypes: Vec<Vec<f32>>,
}

impl SyntheticImages {
    pub fn new(spec: SyntheticSpec, split: Split) -> Result<Self> {
        if spec.num_classes < 2 || spec.image_size == 0 || spec.channels == 0 || spec.modes == 0 {
            return Err(Error::InvalidParam {
                name: "num_classes".into(),
                message: "need at least 2 classes and non-empty images".into(),
            });
        }
        let prototypes = (0..spec.num_classes * spec.modes).map(|k| prototype(&spec, k as u64)).collect();
        Ok(SyntheticImages { spec, split, prototypes })
    }

    pub fn from_params(p: &Params) -> Result<Self> {
        // `root` is accepted for layout compatibility; images are generated, not read.
        p.expect_only(&[
            "root",
            "split",
            "num_classes",
            "image_size",
            "channels",
            "modes",
            "n_train",
            "n_val",
            "n_test",
            "seed",
            "blend",
            "noise",
            "max_shift",
        ])?;
        let d = SyntheticSpec::default();
        let split_name: String = p.get_or("split", "train".to_string())?;
        let split = Split::parse(&split_name).ok_or_else(|| Error::InvalidParam {
            name: "split".into(),
            message: format!("expected train, val or test, got '{split_name}'"),
        })?;
        let spec = SyntheticSpec {
            num_classes: p.get_or("num_classes", d.num_classes)?,
            image_size: p.get_or("image_size", d.image_size)?,
            channels: p.get_or("channels", d.channels)?,
            modes: p.get_or("modes", d.modes)?,
            n_train: p.get_or("n_train", d.n_train)?,
            n_val: p.get_or("n_val", d.n_val)?,
            n_test: p.get_or("n_test", d.n_test)?,
            seed: p.get_or("seed", d.seed)?,
            blend: p.get_or("blend", d.blend)?,
            noise: p.get_or("noise", d.noise)?,
            max_shift: p.get_or("max_shift", d.max_shift)?,
        };
        Self::new(spec, split)
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Offset of this split's first sample in the global id space.
    fn offset(&self) -> usize {
        match self.split {
            Split::Train => 0,
            Split::Val => self.spec.n_train,
            Split::Test => self.spec.n_train + self.spec.n_val,
        }
    }

    pub fn global_id(&self, index: usize) -> usize {
        self.offset() + index
    }
}

/// Smooth random pattern: a few coloured Gaussian blobs plus an oriented wave.
fn prototype(spec: &SyntheticSpec, k: u64) -> Vec<f32> {
    let mut rng = StdRng::seed_from_u64(derive_seed(spec.seed, &[0x70_726f_746f, k]));
    let s = spec.image_size as f64;
    let c = spec.channels;
    let mut img = vec![0.0f64; c * spec.image_size * spec.image_size];
    for _ in 0..4 {
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let sigma = rng.random_range(0.12..0.3) * s;
        let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for ch in 0..c {
            for y in 0..spec.image_size {
                for x in 0..spec.image_size {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    img[(ch * spec.image_size + y) * spec.image_size + x] +=
                        colour[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / s;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let wave: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    for ch in 0..c {
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) * freq + phase;
                img[(ch * spec.image_size + y) * spec.image_size + x] += wave[ch] * t.sin();
            }
        }
    }
    img.iter().map(|v| (128.0 + 70.0 * v) as f32).collect()
}

impl Dataset for SyntheticImages {
    fn len(&self) -> usize {
        match self.split {
            Split::Train => self.spec.n_train,
            Split::Val => self.spec.n_val,
            Split::Test => self.spec.n_test,
        }
    }

    fn get(&self, index: usize) -> Result<(Image, usize)> {
        if index >= self.len() {
            return Err(Error::PreconditionViolation(format!("index {index} out of range")));
        }
        let sp = &self.spec;
        let id = self.global_id(index);
        let label = index % sp.num_classes;
        let mut rng = StdRng::seed_from_u64(derive_seed(sp.seed, &[0x73_616d_706c, id as u64]));
        let mode = rng.random_range(0..sp.modes);
        let other = (label + rng.random_range(1..sp.num_classes)) % sp.num_classes;
        let other_mode = rng.random_range(0..sp.modes);
        let w = rng.random_range(0.0..=sp.blend.max(0.0)) as f32;
        let a = &self.prototypes[label * sp.modes + mode];
        let b = &self.prototypes[other * sp.modes + other_mode];
        let shift = sp.max_shift as i64;
        let (dy, dx) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
        let gain = rng.random_range(0.8..1.2) as f32;
        let noise = Normal::new(0.0, sp.noise.max(0.0)).expect("finite std");
        let n = sp.image_size as i64;
        let mut data = Vec::with_capacity(sp.channels * sp.image_size * sp.image_size);
        for ch in 0..sp.channels {
            for y in 0..n {
                for x in 0..n {
                    let sy = (y - dy).rem_euclid(n) as usize;
                    let sx = (x - dx).rem_euclid(n) as usize;
                    let at = (ch * sp.image_size + sy) * sp.image_size + sx;
                    let v = (1.0 - w) * a[at] + w * b[at];
                    let v = 128.0 + gain * (v - 128.0) + noise.sample(&mut rng) as f32;
                    data.push(v.clamp(0.0, 255.0));
                }
            }
        }
        Ok((Image::new(sp.channels, sp.image_size, sp.image_size, data)?, label))
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn describe(&self) -> String {
        format!("SyntheticImages({:?}, {:?})", self.spec, self.split)
    }
}
