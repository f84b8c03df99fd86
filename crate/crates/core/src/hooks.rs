//! Forward-hook management and the per-network I/O dictionary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use distill_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Side};
use crate::nn::{named_modules, unknown_path, Capture, ForwardCtx, IoEntry, Module};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureKind {
    Input,
    Output,
    Both,
}

impl CaptureKind {
    fn as_capture(self) -> Capture {
        Capture {
            input: matches!(self, CaptureKind::Input | CaptureKind::Both),
            output: matches!(self, CaptureKind::Output | CaptureKind::Both),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookSpec {
    pub path: String,
    pub capture: CaptureKind,
}

impl HookSpec {
    pub fn new(path: impl Into<String>, capture: CaptureKind) -> Self {
        HookSpec { path: path.into(), capture }
    }

    /// Specs from the `forward_hook: {input: [...], output: [...]}` layout.
    pub fn from_lists(input: &[String], output: &[String]) -> Vec<HookSpec> {
        let mut out: Vec<HookSpec> = Vec::new();
        for p in input {
            out.push(HookSpec::new(p.clone(), CaptureKind::Input));
        }
        for p in output {
            match out.iter_mut().find(|s| &s.path == p) {
                Some(s) => s.capture = CaptureKind::Both,
                None => out.push(HookSpec::new(p.clone(), CaptureKind::Output)),
            }
        }
        out
    }
}

/// Token returned by [`Network::attach`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookHandle(u64);

/// Captures from the most recent forward pass of one network.
#[derive(Debug, Clone, Default)]
pub struct IoDictionary {
    entries: BTreeMap<String, IoEntry>,
    generation: u64,
}

impl IoDictionary {
    pub fn from_entries(entries: BTreeMap<String, IoEntry>, generation: u64) -> Self {
        IoDictionary { entries, generation }
    }

    /// Forward passes that have populated this dictionary so far.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn entry(&self, path: &str) -> Option<&IoEntry> {
        self.entries.get(path)
    }

    pub fn entries(&self) -> &BTreeMap<String, IoEntry> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn missing(&self, path: &str, side: Side) -> Error {
        Error::MissingCapture { path: path.to_string(), side, generation: self.generation }
    }

    /// First captured tensor on `side` of `path`.
    pub fn get(&self, path: &str, side: Side) -> Result<Tensor> {
        let e = self.entries.get(path).ok_or_else(|| self.missing(path, side))?;
        let t = match side {
            Side::Input => e.input.as_ref().and_then(|v| v.first().cloned()),
            Side::Output => e.output.clone(),
        };
        t.ok_or_else(|| self.missing(path, side))
    }

    /// All positional inputs captured for `path`.
    pub fn get_inputs(&self, path: &str) -> Result<&[Tensor]> {
        self.entries.get(path).and_then(|e| e.input.as_deref()).ok_or_else(|| self.missing(path, Side::Input))
    }

    pub fn insert(&mut self, path: &str, side: Side, t: Tensor) {
        let e = self.entries.entry(path.to_string()).or_default();
        match side {
            Side::Input => e.input = Some(vec![t]),
            Side::Output => e.output = Some(t),
        }
    }
}

/// A module tree plus its hooks, capture dictionary and call counters.
pub struct Network {
    root: Arc<dyn Module>,
    paths: HashSet<String>,
    hooks: Mutex<BTreeMap<u64, Vec<HookSpec>>>,
    next_handle: AtomicU64,
    io: Mutex<IoDictionary>,
    detach_captures: AtomicBool,
    forwards: AtomicU64,
    module_calls: AtomicU64,
}

impl Network {
    pub fn new(root: Arc<dyn Module>) -> Self {
        let paths = named_modules(root.as_ref()).into_iter().map(|(p, _)| p).collect();
        Network {
            root,
            paths,
            hooks: Mutex::new(BTreeMap::new()),
            next_handle: AtomicU64::new(1),
            io: Mutex::new(IoDictionary::default()),
            detach_captures: AtomicBool::new(false),
            forwards: AtomicU64::new(0),
            module_calls: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &Arc<dyn Module> {
        &self.root
    }

    /// Store captures without autodiff history (used for frozen teachers).
    pub fn set_detach_captures(&self, detach: bool) {
        self.detach_captures.store(detach, Ordering::Relaxed);
    }

    pub fn list_module_paths(&self) -> Vec<String> {
        list_module_paths(self.root.as_ref())
    }

    pub fn attach(&self, specs: &[HookSpec]) -> Result<HookHandle> {
        for s in specs {
            if !self.paths.contains(&s.path) {
                return Err(unknown_path(self.root.as_ref(), &s.path));
            }
        }
        let id = self.next_handle.fetch_add(1, Ordering::Relaxed);
        self.hooks.lock().expect("hook lock").insert(id, specs.to_vec());
        Ok(HookHandle(id))
    }

    /// Detaching an already-detached handle is a no-op.
    pub fn detach(&self, handle: HookHandle) {
        self.hooks.lock().expect("hook lock").remove(&handle.0);
    }

    pub fn detach_all(&self) {
        self.hooks.lock().expect("hook lock").clear();
        let mut io = self.io.lock().expect("io lock");
        let gen = io.generation();
        *io = IoDictionary::from_entries(BTreeMap::new(), gen);
    }

    pub fn hook_specs(&self) -> Vec<HookSpec> {
        self.hooks.lock().expect("hook lock").values().flatten().cloned().collect()
    }

    fn watch_table(&self) -> HashMap<String, Capture> {
        let mut table: HashMap<String, Capture> = HashMap::new();
        for spec in self.hooks.lock().expect("hook lock").values().flatten() {
            let c = spec.capture.as_capture();
            let e = table.entry(spec.path.clone()).or_default();
            e.input |= c.input;
            e.output |= c.output;
        }
        table
    }

    /// Run the model. With hooks attached, the I/O dictionary is replaced by
    /// this pass's captures and its generation advances; without, it is left alone.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let table = self.watch_table();
        let detach = self.detach_captures.load(Ordering::Relaxed);
        let mut ctx = ForwardCtx::with_hooks(train, &table, detach);
        let y = self.root.forward(x, &mut ctx);
        self.module_calls.fetch_add(ctx.calls(), Ordering::Relaxed);
        self.forwards.fetch_add(1, Ordering::Relaxed);
        if !table.is_empty() {
            let records = ctx.take_records();
            let mut io = self.io.lock().expect("io lock");
            let gen = io.generation() + 1;
            *io = IoDictionary::from_entries(records, gen);
        }
        y
    }

    /// Snapshot of the captures of the latest forward pass.
    pub fn io(&self) -> IoDictionary {
        self.io.lock().expect("io lock").clone()
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Total submodule invocations across all forward passes.
    pub fn module_calls(&self) -> u64 {
        self.module_calls.load(Ordering::Relaxed)
    }
}

/// Dotted paths of every submodule, pre-order.
pub fn list_module_paths(root: &dyn Module) -> Vec<String> {
    named_modules(root).into_iter().map(|(p, _)| p).collect()
}
