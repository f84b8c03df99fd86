//! Model lifecycle: checkpoints, freezing, redesign, wrappers and special modules.

mod auxiliary;
mod special;

pub use auxiliary::{ConvRegressor, Paraphraser, Translator};
pub use special::{AuxSpec, SpecialModule, SpecialSpec};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use distill_tensor::{no_grad, DType, Param, Tensor};

use crate::error::{Error, Result};
use crate::nn::{find_module, named_parameters, state_dict, Empty, ForwardCtx, Module};
use crate::serialize;

/// Set trainability: with `requires_grad == false` the whole model is frozen;
/// otherwise everything is trainable except parameters under `frozen`.
pub fn freeze(root: &Arc<dyn Module>, frozen: &[String], requires_grad: bool) -> Result<()> {
    let targets = frozen.iter().map(|p| find_module(root, p)).collect::<Result<Vec<_>>>()?;
    for (_, p) in named_parameters(root.as_ref()) {
        p.set_trainable(requires_grad);
    }
    for m in targets {
        for (_, p) in named_parameters(m.as_ref()) {
            p.set_trainable(false);
        }
    }
    Ok(())
}

/// Distinct trainable parameters, in first-seen order.
pub fn trainable_params(root: &dyn Module) -> Vec<Param> {
    let mut seen = HashSet::new();
    named_parameters(root)
        .into_iter()
        .filter(|(_, p)| p.is_trainable() && seen.insert(p.id()))
        .map(|(_, p)| p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RedesignSpec {
    /// Keep the model as is.
    Keep,
    /// Replace with a module that ignores its input.
    Empty,
    /// Run exactly these module paths, in order.
    Sequential(Vec<String>),
}

impl RedesignSpec {
    pub fn from_list(paths: &[String]) -> Self {
        match paths {
            [] => RedesignSpec::Keep,
            [only] if only == "empty" => RedesignSpec::Empty,
            _ => RedesignSpec::Sequential(paths.to_vec()),
        }
    }
}

/// A view that runs selected submodules of another model in sequence.
/// The submodules are shared, not copied.
pub struct Pruned {
    entries: Vec<(String, Arc<dyn Module>)>,
    input_shape: Option<Vec<usize>>,
}

impl Module for Pruned {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for (path, m) in &self.entries {
            h = ctx.call(path, m.as_ref(), &h)?;
        }
        Ok(h)
    }
    fn type_name(&self) -> &str {
        "Pruned"
    }
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        self.entries.clone()
    }
    fn input_shape(&self) -> Option<Vec<usize>> {
        self.input_shape.clone()
    }
}

pub fn redesign(root: &Arc<dyn Module>, spec: &RedesignSpec) -> Result<Arc<dyn Module>> {
    let paths = match spec {
        RedesignSpec::Keep => return Ok(root.clone()),
        RedesignSpec::Empty => return Ok(Arc::new(Empty)),
        RedesignSpec::Sequential(p) => p,
    };
    let entries = paths.iter().map(|p| Ok((p.clone(), find_module(root, p)?))).collect::<Result<Vec<_>>>()?;
    if let Some(shape) = root.input_shape() {
        dry_run(&entries, &shape)?;
    }
    Ok(Arc::new(Pruned { entries, input_shape: root.input_shape() }))
}

/// Feed a zero batch through the retained modules to catch incompatible neighbours.
fn dry_run(entries: &[(String, Arc<dyn Module>)], sample_shape: &[usize]) -> Result<()> {
    no_grad(|| {
        let mut h = Tensor::zeros([&[1], sample_shape].concat(), DType::F32);
        let mut prev = "<input>";
        for (path, m) in entries {
            let mut ctx = ForwardCtx::new(false);
            h = m.forward(&h, &mut ctx).map_err(|e| Error::ShapeMismatch {
                context: format!("redesign: '{path}' cannot consume the output of '{prev}' ({e})"),
                expected: vec![],
                got: h.shape().to_vec(),
            })?;
            prev = path;
        }
        Ok(())
    })
}

/// Distributed/data-parallel wrappers are accepted for config compatibility
/// but do nothing in a single CPU process.
pub trait ModelWrapper: Send + Sync {
    fn name(&self) -> &str;
    /// Message logged when the wrapper is requested.
    fn notice(&self) -> Option<String>;
}

pub struct PassThrough(pub String);

impl ModelWrapper for PassThrough {
    fn name(&self) -> &str {
        &self.0
    }
    fn notice(&self) -> Option<String> {
        (self.0 != "none")
            .then(|| format!("wrapper '{}' has no effect in a single CPU process; model left unwrapped", self.0))
    }
}

pub fn save_ckpt(root: &dyn Module, path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    let entries: Vec<(String, Tensor)> =
        state_dict(root).into_iter().filter(|(n, _)| seen.insert(n.clone())).map(|(n, p)| (n, p.value())).collect();
    serialize::save(path, &entries)
}

/// Strict load: every name must match in both directions with equal shapes.
pub fn load_ckpt(root: &dyn Module, path: &Path) -> Result<()> {
    let file: BTreeMap<String, Tensor> = serialize::load(path)?.into_iter().collect();
    load_state(root, &file)
}

pub fn load_state(root: &dyn Module, file: &BTreeMap<String, Tensor>) -> Result<()> {
    let model: BTreeMap<String, Param> = state_dict(root).into_iter().collect();
    let missing: Vec<&String> = model.keys().filter(|k| !file.contains_key(*k)).collect();
    let unexpected: Vec<&String> = file.keys().filter(|k| !model.contains_key(*k)).collect();
    let shape: Vec<String> = model
        .iter()
        .filter_map(|(k, p)| {
            let t = file.get(k)?;
            (t.shape() != p.shape()).then(|| format!("{k} {:?} vs {:?}", t.shape(), p.shape()))
        })
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !shape.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing keys {missing:?}"));
        }
        if !unexpected.is_empty() {
            parts.push(format!("unexpected keys {unexpected:?}"));
        }
        if !shape.is_empty() {
            parts.push(format!("shape mismatch {shape:?}"));
        }
        return Err(Error::CheckpointMismatch(parts.join("; ")));
    }
    for (k, p) in &model {
        let t = &file[k];
        let t = if t.dtype() == p.dtype() { t.clone() } else { t.to_dtype(p.dtype()) };
        p.set(&t)?;
    }
    Ok(())
}
