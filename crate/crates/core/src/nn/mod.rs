//! Module tree, forward context and traversal helpers.

mod layers;

pub use layers::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Empty, Flatten, GlobalAvgPool, Identity, LeakyReLU, Linear, ReLU, Sequential,
};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use distill_tensor::{Param, Tensor};

use crate::error::{Error, Result, Side};

/// A node in a model tree.
///
/// Modules hold their parameters in [`Param`]s and run children through
/// [`ForwardCtx::call`], which is what makes every named submodule hookable.
pub trait Module: Send + Sync {
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor>;

    fn type_name(&self) -> &str;

    /// Direct children, in declaration order.
    fn children(&self) -> Vec<(String, Arc<dyn Module>)> {
        Vec::new()
    }

    /// Parameters owned directly by this module.
    fn local_params(&self) -> Vec<(String, Param)> {
        Vec::new()
    }

    /// Non-trainable state owned directly by this module.
    fn local_buffers(&self) -> Vec<(String, Param)> {
        Vec::new()
    }

    /// Per-sample input shape, when the module knows it.
    fn input_shape(&self) -> Option<Vec<usize>> {
        None
    }
}

/// Which sides of a module call to capture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub input: bool,
    pub output: bool,
}

impl Capture {
    pub fn wants(&self, side: Side) -> bool {
        match side {
            Side::Input => self.input,
            Side::Output => self.output,
        }
    }
}

/// Tensors recorded for one module path during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct IoEntry {
    pub input: Option<Vec<Tensor>>,
    pub output: Option<Tensor>,
}

/// State threaded through one forward pass.
pub struct ForwardCtx<'a> {
    prefix: String,
    watch: Option<&'a HashMap<String, Capture>>,
    records: BTreeMap<String, IoEntry>,
    train: bool,
    detach: bool,
    calls: u64,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(train: bool) -> Self {
        ForwardCtx { prefix: String::new(), watch: None, records: BTreeMap::new(), train, detach: false, calls: 0 }
    }

    pub fn with_hooks(train: bool, watch: &'a HashMap<String, Capture>, detach: bool) -> Self {
        ForwardCtx { watch: Some(watch), detach, ..Self::new(train) }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Full dotted path of the module currently executing.
    pub fn path(&self) -> &str {
        &self.prefix
    }

    /// Number of module invocations so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn keep(&self, t: &Tensor) -> Tensor {
        if self.detach {
            t.detach()
        } else {
            t.clone()
        }
    }

    /// Run `module` as the child `name` of the current module.
    pub fn call(&mut self, name: &str, module: &dyn Module, x: &Tensor) -> Result<Tensor> {
        self.call_inner(name, module, x, false)
    }

    /// Like [`ForwardCtx::call`] but always records the output, hooked or not.
    pub fn call_recorded(&mut self, name: &str, module: &dyn Module, x: &Tensor) -> Result<Tensor> {
        self.call_inner(name, module, x, true)
    }

    fn call_inner(&mut self, name: &str, module: &dyn Module, x: &Tensor, force_output: bool) -> Result<Tensor> {
        let saved = self.prefix.len();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        self.calls += 1;
        let cap = self.watch.and_then(|w| w.get(&self.prefix).copied()).unwrap_or_default();
        if cap.input {
            let kept = self.keep(x);
            // a module called twice keeps its last invocation
            self.records.entry(self.prefix.clone()).or_default().input = Some(vec![kept]);
        }
        let y = module.forward(x, self);
        if let Ok(out) = &y {
            if cap.output || force_output {
                let kept = self.keep(out);
                self.records.entry(self.prefix.clone()).or_default().output = Some(kept);
            }
        }
        self.prefix.truncate(saved);
        y
    }

    /// Run `f` with the training flag temporarily set to `train`.
    pub fn with_mode<T>(&mut self, train: bool, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.train, train);
        let out = f(self);
        self.train = prev;
        out
    }

    /// Capture recorded so far in this pass.
    pub fn recorded(&self, path: &str, side: Side) -> Option<Tensor> {
        let e = self.records.get(path)?;
        match side {
            Side::Input => e.input.as_ref().and_then(|v| v.first().cloned()),
            Side::Output => e.output.clone(),
        }
    }

    pub fn has_records(&self) -> bool {
        !self.records.is_empty()
    }

    pub(crate) fn take_records(&mut self) -> BTreeMap<String, IoEntry> {
        std::mem::take(&mut self.records)
    }
}

/// Every submodule in pre-order with its dotted path (the root excluded).
pub fn named_modules(root: &dyn Module) -> Vec<(String, Arc<dyn Module>)> {
    fn walk(prefix: &str, m: &dyn Module, out: &mut Vec<(String, Arc<dyn Module>)>) {
        for (name, child) in m.children() {
            let path = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
            out.push((path.clone(), child.clone()));
            walk(&path, child.as_ref(), out);
        }
    }
    let mut out = Vec::new();
    walk("", root, &mut out);
    out
}

fn collect_state(root: &dyn Module, buffers: bool) -> Vec<(String, Param)> {
    let mut out = Vec::new();
    let local = |m: &dyn Module| if buffers { m.local_buffers() } else { m.local_params() };
    out.extend(local(root));
    for (path, m) in named_modules(root) {
        out.extend(local(m.as_ref()).into_iter().map(|(n, p)| (format!("{path}.{n}"), p)));
    }
    out
}

/// All parameters with dotted names.
pub fn named_parameters(root: &dyn Module) -> Vec<(String, Param)> {
    collect_state(root, false)
}

pub fn named_buffers(root: &dyn Module) -> Vec<(String, Param)> {
    collect_state(root, true)
}

/// Parameters followed by buffers; the layout used by checkpoints.
pub fn state_dict(root: &dyn Module) -> Vec<(String, Param)> {
    let mut s = named_parameters(root);
    s.extend(named_buffers(root));
    s
}

pub fn find_module(root: &Arc<dyn Module>, path: &str) -> Result<Arc<dyn Module>> {
    if path.is_empty() {
        return Ok(root.clone());
    }
    named_modules(root.as_ref())
        .into_iter()
        .find(|(p, _)| p == path)
        .map(|(_, m)| m)
        .ok_or_else(|| unknown_path(root.as_ref(), path))
}

pub(crate) fn unknown_path(root: &dyn Module, path: &str) -> Error {
    let mut near: Vec<(usize, String)> = named_modules(root)
        .into_iter()
        .map(|(p, _)| (strsim::levenshtein(&p, path), p))
        .filter(|(d, _)| *d <= 3)
        .collect();
    near.sort();
    Error::UnknownModulePath { path: path.to_string(), suggestions: near.into_iter().take(3).map(|(_, p)| p).collect() }
}

pub fn num_parameters(root: &dyn Module) -> usize {
    named_parameters(root).iter().map(|(_, p)| p.numel()).sum()
}
