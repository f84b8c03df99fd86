use std::sync::Arc;

use rand::rngs::StdRng;

use crate::data::{
    CenterCrop, NegativeIndices, Normalize, RandomCrop, RandomHorizontalFlip, RandomResizedCrop, Resize, Size, ToTensor,
};
use crate::error::{Error, Result};
use crate::losses::{CrossEntropyLoss, FtLoss, KdLoss, MseLoss};
use crate::optim::{AdamConfig, CosineAnnealingLr, LinearWarmup, MultiStepLr, SgdConfig, StepLr};
use crate::params::Params;
use crate::registry::{Category, Component, Registry};
use crate::toolkit::{ConvRegressor, Paraphraser, PassThrough, SpecialSpec, Translator};
use crate::zoo::{tinyresnet, Mlp, SyntheticImages};

fn add<F>(r: &mut Registry, c: Category, name: &str, f: F)
where
    F: Fn(&Params, &mut StdRng) -> Result<Component> + Send + Sync + 'static,
{
    r.register(c, name, f).expect("built-in names are unique");
}

fn size(p: &Params, key: &str) -> Result<Size> {
    p.require(key)
}

pub(crate) fn register_all(r: &mut Registry) {
    use Category::*;

    add(r, Model, "tinyresnet", |p, rng| Ok(Component::Model(Arc::new(tinyresnet(p, None, rng)?))));
    for d in 1..=4 {
        add(r, Model, &format!("tinyresnet_d{d}"), move |p, rng| {
            Ok(Component::Model(Arc::new(tinyresnet(p, Some(d), rng)?)))
        });
    }
    add(r, Model, "resnet_tiny", |p, rng| {
        let mut p = p.clone();
        if !p.contains("depth") {
            p.insert("depth", 2);
        }
        Ok(Component::Model(Arc::new(tinyresnet(&p, None, rng)?)))
    });
    add(r, Model, "mlp", |p, rng| Ok(Component::Model(Arc::new(Mlp::from_params(p, rng)?))));

    add(r, Dataset, "SyntheticImages", |p, _| Ok(Component::Dataset(Arc::new(SyntheticImages::from_params(p)?))));

    add(r, Transform, "ToTensor", |p, _| {
        p.expect_only(&[])?;
        Ok(Component::Transform(Arc::new(ToTensor)))
    });
    add(r, Transform, "Normalize", |p, _| Ok(Component::Transform(Arc::new(Normalize::from_params(p)?))));
    add(r, Transform, "Resize", |p, _| {
        p.expect_only(&["size"])?;
        Ok(Component::Transform(Arc::new(Resize(size(p, "size")?))))
    });
    add(r, Transform, "CenterCrop", |p, _| {
        p.expect_only(&["size"])?;
        Ok(Component::Transform(Arc::new(CenterCrop(size(p, "size")?))))
    });
    add(r, Transform, "RandomCrop", |p, _| {
        p.expect_only(&["size", "padding"])?;
        Ok(Component::Transform(Arc::new(RandomCrop { size: size(p, "size")?, padding: p.get_or("padding", 0)? })))
    });
    add(r, Transform, "RandomHorizontalFlip", |p, _| {
        p.expect_only(&["p"])?;
        Ok(Component::Transform(Arc::new(RandomHorizontalFlip { p: p.get_or("p", 0.5)? })))
    });
    add(r, Transform, "RandomResizedCrop", |p, _| {
        p.expect_only(&["size", "scale", "ratio"])?;
        Ok(Component::Transform(Arc::new(RandomResizedCrop {
            size: size(p, "size")?,
            scale: p.get_or("scale", [0.08, 1.0])?,
            ratio: p.get_or("ratio", [3.0 / 4.0, 4.0 / 3.0])?,
        })))
    });

    add(r, Loss, "CrossEntropyLoss", |p, _| {
        p.expect_only(&["reduction"])?;
        Ok(Component::Loss(Arc::new(CrossEntropyLoss)))
    });
    add(r, Loss, "KDLoss", |p, _| Ok(Component::Loss(Arc::new(KdLoss::from_params(p)?))));
    add(r, Loss, "MSELoss", |p, _| {
        p.expect_only(&["reduction"])?;
        if let Some(red) = p.get::<String>("reduction")? {
            if red != "mean" {
                return Err(Error::InvalidParam {
                    name: "reduction".into(),
                    message: "only 'mean' is supported".into(),
                });
            }
        }
        Ok(Component::Loss(Arc::new(MseLoss)))
    });
    add(r, Loss, "ATLoss", |p, _| Ok(Component::Loss(Arc::new(crate::losses::AtLoss::from_params(p)?))));
    add(r, Loss, "FTLoss", |p, _| {
        p.expect_only(&["p", "strict"])?;
        let norm: f64 = p.get_or("p", 1.0)?;
        if norm < 1.0 {
            return Err(Error::InvalidParam { name: "p".into(), message: "norm order must be >= 1".into() });
        }
        Ok(Component::Loss(Arc::new(FtLoss { p: norm, strict: p.get_or("strict", false)? })))
    });

    add(r, Optimizer, "SGD", |p, _| Ok(Component::Optimizer(Arc::new(SgdConfig::from_params(p)?))));
    add(r, Optimizer, "Adam", |p, _| Ok(Component::Optimizer(Arc::new(AdamConfig::from_params(p)?))));

    add(r, Scheduler, "MultiStepLR", |p, _| {
        p.expect_only(&["milestones", "gamma"])?;
        Ok(Component::Scheduler(Arc::new(MultiStepLr {
            milestones: p.require("milestones")?,
            gamma: p.get_or("gamma", 0.1)?,
        })))
    });
    add(r, Scheduler, "StepLR", |p, _| {
        p.expect_only(&["step_size", "gamma"])?;
        Ok(Component::Scheduler(Arc::new(StepLr {
            step_size: p.require("step_size")?,
            gamma: p.get_or("gamma", 0.1)?,
        })))
    });
    add(r, Scheduler, "CosineAnnealingLR", |p, _| {
        p.expect_only(&["T_max", "eta_min"])?;
        Ok(Component::Scheduler(Arc::new(CosineAnnealingLr {
            t_max: p.require("T_max")?,
            eta_min: p.get_or("eta_min", 0.0)?,
        })))
    });
    add(r, Scheduler, "LinearWarmup", |p, _| {
        p.expect_only(&["warmup_steps"])?;
        Ok(Component::Scheduler(Arc::new(LinearWarmup { warmup_steps: p.require::<usize>("warmup_steps")?.max(1) })))
    });

    add(r, Auxiliary, "ConvRegressor", |p, rng| {
        Ok(Component::Auxiliary(Arc::new(ConvRegressor::from_params(p, rng)?)))
    });
    add(r, Auxiliary, "Paraphraser", |p, rng| Ok(Component::Auxiliary(Arc::new(Paraphraser::from_params(p, rng)?))));
    add(r, Auxiliary, "Translator", |p, rng| Ok(Component::Auxiliary(Arc::new(Translator::from_params(p, rng)?))));

    for name in ["none", "DataParallel", "DistributedDataParallel"] {
        add(r, Wrapper, name, move |_, _| Ok(Component::Wrapper(Arc::new(PassThrough(name.to_string())))));
    }
    add(r, Wrapper, "NegativeIndices", |p, _| {
        p.expect_only(&["k"])?;
        Ok(Component::Provider(Arc::new(NegativeIndices { k: p.require("k")? })))
    });

    add(r, Special, "PostForwardModule", |p, _| Ok(Component::Special(SpecialSpec::from_params(p)?)));
}
