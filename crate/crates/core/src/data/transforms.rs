use std::sync::Arc;

use rand::rngs::StdRng;
use rand::Rng;
use serde::Deserialize;

use super::{Image, Transform};
use crate::error::{Error, Result};
use crate::params::Params;

/// Ordered composition of transforms.
#[derive(Clone, Default)]
pub struct Pipeline {
    steps: Vec<Arc<dyn Transform>>,
}

impl Pipeline {
    pub fn new(steps: Vec<Arc<dyn Transform>>) -> Self {
        Pipeline { steps }
    }

    pub fn apply(&self, mut img: Image, rng: &mut StdRng) -> Result<Image> {
        for s in &self.steps {
            img = s.apply(img, rng)?;
        }
        Ok(img)
    }

    pub fn is_stochastic(&self) -> bool {
        self.steps.iter().any(|s| s.is_stochastic())
    }

    pub fn describe(&self) -> String {
        self.steps.iter().map(|s| s.describe()).collect::<Vec<_>>().join(" | ")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Either a single side length or an explicit `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum Size {
    Side(usize),
    Exact([usize; 2]),
}

impl Size {
    fn square(self) -> (usize, usize) {
        match self {
            Size::Side(s) => (s, s),
            Size::Exact([h, w]) => (h, w),
        }
    }
}

fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    if oh == img.height && ow == img.width {
        return img.clone();
    }
    let sy = img.height as f64 / oh as f64;
    let sx = img.width as f64 / ow as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let mut data = Vec::with_capacity(img.channels * oh * ow);
    for c in 0..img.channels {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, sy, img.height);
            for x in 0..ow {
                let (x0, x1, fx) = coord(x, sx, img.width);
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image { channels: img.channels, height: oh, width: ow, data, scaled: img.scaled }
}

/// Crop `h x w` at (top, left); regions outside the image read as zero.
fn crop(img: &Image, top: isize, left: isize, h: usize, w: usize) -> Image {
    let mut data = Vec::with_capacity(img.channels * h * w);
    for c in 0..img.channels {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (top + y, left + x);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < img.height && (sx as usize) < img.width;
                data.push(if inside { img.at(c, sy as usize, sx as usize) } else { 0.0 });
            }
        }
    }
    Image { channels: img.channels, height: h, width: w, data, scaled: img.scaled }
}

pub struct ToTensor;

impl Transform for ToTensor {
    fn apply(&self, mut img: Image, _: &mut StdRng) -> Result<Image> {
        if !img.scaled {
            img.data.iter_mut().for_each(|v| *v /= 255.0);
            img.scaled = true;
        }
        Ok(img)
    }
    fn is_stochastic(&self) -> bool {
        false
    }
    fn describe(&self) -> String {
        "ToTensor".into()
    }
}

pub struct Normalize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalize {
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["mean", "std"])?;
        let mean: Vec<f64> = p.require("mean")?;
        let std: Vec<f64> = p.require("std")?;
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::InvalidParam {
                name: "std".into(),
                message: "mean and std must be non-empty and of equal length".into(),
            });
        }
        if std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidParam { name: "std".into(), message: "std entries must be positive".into() });
        }
        Ok(Normalize { mean, std })
    }
}

impl Transform for Normalize {
    fn apply(&self, mut img: Image, _: &mut StdRng) -> Result<Image> {
        if !img.scaled {
            return Err(Error::PreconditionViolation("Normalize needs ToTensor earlier in the pipeline".into()));
        }
        let n = self.mean.len();
        if n != 1 && n != img.channels {
            return Err(Error::ShapeMismatch {
                context: "Normalize".into(),
                expected: vec![img.channels],
                got: vec![n],
            });
        }
        let plane = img.height * img.width;
        for (c, chunk) in img.data.chunks_mut(plane).enumerate() {
            let k = if n == 1 { 0 } else { c };
            let (m, s) = (self.mean[k] as f32, self.std[k] as f32);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(img)
    }
    fn is_stochastic(&self) -> bool {
        false
    }
    fn describe(&self) -> String {
        format!("Normalize(mean={:?}, std={:?})", self.mean, self.std)
    }
}

/// Bilinear resize; a single side length sets the shorter edge.
pub struct Resize(pub Size);

impl Transform for Resize {
    fn apply(&self, img: Image, _: &mut StdRng) -> Result<Image> {
        let (oh, ow) = match self.0 {
            Size::Exact([h, w]) => (h, w),
            Size::Side(s) => {
                if img.height <= img.width {
                    (s, s * img.width / img.height)
                } else {
                    (s * img.height / img.width, s)
                }
            }
        };
        Ok(resize_bilinear(&img, oh.max(1), ow.max(1)))
    }
    fn is_stochastic(&self) -> bool {
        false
    }
    fn describe(&self) -> String {
        format!("Resize({:?})", self.0)
    }
}

pub struct CenterCrop(pub Size);

impl Transform for CenterCrop {
    fn apply(&self, img: Image, _: &mut StdRng) -> Result<Image> {
        let (h, w) = self.0.square();
        let top = ((img.height as f64 - h as f64) / 2.0).round() as isize;
        let left = ((img.width as f64 - w as f64) / 2.0).round() as isize;
        Ok(crop(&img, top, left, h, w))
    }
    fn is_stochastic(&self) -> bool {
        false
    }
    fn describe(&self) -> String {
        format!("CenterCrop({:?})", self.0)
    }
}

pub struct RandomCrop {
    pub size: Size,
    pub padding: usize,
}

impl Transform for RandomCrop {
    fn apply(&self, img: Image, rng: &mut StdRng) -> Result<Image> {
        let (h, w) = self.size.square();
        let (ph, pw) = (img.height + 2 * self.padding, img.width + 2 * self.padding);
        if h > ph || w > pw {
            return Err(Error::PreconditionViolation(format!("RandomCrop {h}x{w} larger than padded image {ph}x{pw}")));
        }
        let top = rng.random_range(0..=ph - h) as isize - self.padding as isize;
        let left = rng.random_range(0..=pw - w) as isize - self.padding as isize;
        Ok(crop(&img, top, left, h, w))
    }
    fn is_stochastic(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("RandomCrop({:?}, padding={})", self.size, self.padding)
    }
}

pub struct RandomHorizontalFlip {
    pub p: f64,
}

impl Transform for RandomHorizontalFlip {
    fn apply(&self, mut img: Image, rng: &mut StdRng) -> Result<Image> {
        if rng.random::<f64>() < self.p {
            for row in img.data.chunks_mut(img.width) {
                row.reverse();
            }
        }
        Ok(img)
    }
    fn is_stochastic(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("RandomHorizontalFlip(p={})", self.p)
    }
}

/// Random area/aspect crop resized to `size`.
pub struct RandomResizedCrop {
    pub size: Size,
    pub scale: [f64; 2],
    pub ratio: [f64; 2],
}

impl RandomResizedCrop {
    fn window(&self, height: usize, width: usize, rng: &mut StdRng) -> (usize, usize, usize, usize) {
        let area = (height * width) as f64;
        let (lr0, lr1) = (self.ratio[0].ln(), self.ratio[1].ln());
        for _ in 0..10 {
            let target = area * rng.random_range(self.scale[0]..=self.scale[1]);
            let aspect = rng.random_range(lr0..=lr1).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if (1..=width).contains(&w) && (1..=height).contains(&h) {
                let top = rng.random_range(0..=height - h);
                let left = rng.random_range(0..=width - w);
                return (top, left, h, w);
            }
        }
        // fall back to a central crop with the aspect ratio clamped
        let in_ratio = width as f64 / height as f64;
        let (h, w) = if in_ratio < self.ratio[0] {
            (((width as f64) / self.ratio[0]).round() as usize, width)
        } else if in_ratio > self.ratio[1] {
            (height, ((height as f64) * self.ratio[1]).round() as usize)
        } else {
            (height, width)
        };
        ((height - h) / 2, (width - w) / 2, h.max(1), w.max(1))
    }
}

impl Transform for RandomResizedCrop {
    fn apply(&self, img: Image, rng: &mut StdRng) -> Result<Image> {
        let (top, left, h, w) = self.window(img.height, img.width, rng);
        let (oh, ow) = self.size.square();
        Ok(resize_bilinear(&crop(&img, top as isize, left as isize, h, w), oh, ow))
    }
    fn is_stochastic(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("RandomResizedCrop({:?}, scale={:?}, ratio={:?})", self.size, self.scale, self.ratio)
    }
}
