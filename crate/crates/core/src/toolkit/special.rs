use std::sync::Arc;

use distill_tensor::{Param, Tensor};
use serde_yaml::Value;

use crate::error::{Error, Result, Side};
use crate::nn::{named_parameters, ForwardCtx, Module};
use crate::params::{kind_of, Params};

/// An auxiliary branch fed from a capture of the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSpec {
    /// Name under which the branch is addressable and its output recorded.
    pub name: String,
    /// Registered auxiliary type.
    pub type_name: String,
    pub params: Params,
    pub path: String,
    pub io: Side,
    pub trainable: bool,
    /// Optional checkpoint for the branch's parameters.
    pub ckpt: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecialSpec {
    pub auxiliaries: Vec<AuxSpec>,
}

fn bad(name: &str, message: impl Into<String>) -> Error {
    Error::InvalidParam { name: name.to_string(), message: message.into() }
}

impl SpecialSpec {
    /// `{auxiliaries: [{name, type, params, input: {path, io}, trainable, ckpt}]}`
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["auxiliaries"])?;
        let list = match p.raw("auxiliaries") {
            None | Some(Value::Null) => return Ok(SpecialSpec::default()),
            Some(Value::Sequence(s)) => s.clone(),
            Some(other) => return Err(bad("auxiliaries", format!("expected a list, got {}", kind_of(other)))),
        };
        let mut auxiliaries = Vec::new();
        for (i, item) in list.iter().enumerate() {
            let key = format!("auxiliaries[{i}]");
            let a = Params::from_value(item).map_err(|_| bad(&key, "expected a mapping"))?;
            a.expect_only(&["name", "type", "params", "input", "trainable", "ckpt"])
                .map_err(|e| bad(&key, e.to_string()))?;
            let field = |k: &str| format!("{key}.{k}");
            let name: String = a.require("name").map_err(|_| bad(&field("name"), "required"))?;
            let type_name: String = a.require("type").map_err(|_| bad(&field("type"), "required"))?;
            let input = Params::from_value(a.raw("input").unwrap_or(&Value::Null))?;
            let path: String = input.require("path").map_err(|_| bad(&field("input.path"), "required"))?;
            let io: Side =
                input.get_or("io", Side::Output).map_err(|_| bad(&field("input.io"), "must be 'input' or 'output'"))?;
            auxiliaries.push(AuxSpec {
                name,
                type_name,
                params: Params::from_value(a.raw("params").unwrap_or(&Value::Null))?,
                path,
                io,
                trainable: a.get_or("trainable", true)?,
                ckpt: a.get("ckpt")?,
            });
        }
        Ok(SpecialSpec { auxiliaries })
    }
}

struct BoundAux {
    name: String,
    path: String,
    io: Side,
    module: Arc<dyn Module>,
    trainable: bool,
}

/// A base model followed by auxiliary branches run in a post-forward step.
///
/// The return value is always the base model's output. Each branch consumes
/// its bound capture and records its output under its own name.
pub struct SpecialModule {
    base: Arc<dyn Module>,
    aux: Vec<BoundAux>,
}

impl SpecialModule {
    /// `aux` pairs each spec with its constructed module.
    pub fn new(base: Arc<dyn Module>, aux: Vec<(AuxSpec, Arc<dyn Module>)>) -> Result<Self> {
        let taken: Vec<String> = base.children().into_iter().map(|(n, _)| n).collect();
        let mut bound: Vec<BoundAux> = Vec::new();
        for (spec, module) in aux {
            if spec.name.is_empty()
                || spec.name.contains('.')
                || taken.contains(&spec.name)
                || bound.iter().any(|b| b.name == spec.name)
            {
                return Err(bad(
                    "auxiliaries.name",
                    format!("'{}' must be a fresh top-level name without dots", spec.name),
                ));
            }
            for (_, p) in named_parameters(module.as_ref()) {
                p.set_trainable(spec.trainable);
            }
            bound.push(BoundAux { name: spec.name, path: spec.path, io: spec.io, module, trainable: spec.trainable });
        }
        Ok(SpecialModule { base, aux: bound })
    }

    pub fn base(&self) -> &Arc<dyn Module> {
        &self.base
    }

    pub fn auxiliary(&self, name: &str) -> Option<&Arc<dyn Module>> {
        self.aux.iter().find(|a| a.name == name).map(|a| &a.module)
    }
}

impl Module for SpecialModule {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let train = ctx.is_training();
        // frozen parts run with fixed statistics
        let base_train = train && named_parameters(self.base.as_ref()).iter().any(|(_, p)| p.is_trainable());
        let y = ctx.with_mode(base_train, |c| self.base.forward(x, c))?;
        for a in &self.aux {
            let input = ctx.recorded(&a.path, a.io).ok_or_else(|| Error::MissingCapture {
                path: a.path.clone(),
                side: a.io,
                generation: 0,
            })?;
            ctx.with_mode(train && a.trainable, |c| c.call_recorded(&a.name, a.module.as_ref(), &input))?;
        }
        Ok(y)
    }
    fn type_name(&self) -> &str {
        "PostForwardModule"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        let mut c = self.base.children();
        c.extend(self.aux.iter().map(|a| (a.name.clone(), a.module.clone())));
        c
    }
    fn local_params(&self) -> Vec<(String, Param)> {
        self.base.local_params()
    }
    fn local_buffers(&self) -> Vec<(String, Param)> {
        self.base.local_buffers()
    }
    fn input_shape(&self) -> Option<Vec<usize>> {
        self.base.input_shape()
    }
}
