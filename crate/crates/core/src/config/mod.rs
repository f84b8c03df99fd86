//! Declarative experiment configuration.

mod build;
mod parse;

pub use build::{build_experiment, effective_hooks, load_experiment};
pub use parse::{emit, join_tag, parse_config};

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Issue, Result};
use crate::hooks::{CaptureKind, HookSpec};
use crate::losses::Binding;
use crate::params::{kind_of, Params};

/// `{type, params}` reference to a registered component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub type_name: String,
    pub params: Params,
}

impl ComponentSpec {
    pub fn new(type_name: &str, params: Params) -> Self {
        ComponentSpec { type_name: type_name.to_string(), params }
    }

    fn to_value(&self) -> Value {
        let mut m = Mapping::new();
        m.insert("type".into(), self.type_name.clone().into());
        m.insert("params".into(), self.params.to_value());
        Value::Mapping(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub group: String,
    pub split: String,
    pub type_name: String,
    pub params: Params,
    pub transforms: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub params: Params,
    pub ckpt: Option<String>,
    pub forward_hook: Vec<HookSpec>,
}

/// Per-stage treatment of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSetup {
    pub requires_grad: bool,
    pub sequential: Vec<String>,
    pub frozen_modules: Vec<String>,
    pub forward_hook: Vec<HookSpec>,
    pub wrapper: Option<String>,
    pub special: Option<ComponentSpec>,
}

impl ModelSetup {
    fn default_for(teacher: bool) -> Self {
        ModelSetup {
            requires_grad: !teacher,
            sequential: Vec::new(),
            frozen_modules: Vec::new(),
            forward_hook: Vec::new(),
            wrapper: None,
            special: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaderSpec {
    pub dataset_id: String,
    pub batch_size: usize,
    pub shuffle: bool,
    pub num_workers: usize,
    pub cache_output: Option<String>,
    pub attach_index: bool,
    pub providers: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    pub criterion: ComponentSpec,
    pub factor: f64,
    /// `None` uses the default binding (final outputs).
    pub student: Option<Vec<Binding>>,
    pub teacher: Option<Vec<Binding>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionSpec {
    pub type_name: String,
    pub org_term: Option<TermSpec>,
    pub sub_terms: Vec<(String, TermSpec)>,
}

/// A fully resolved training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub num_epochs: usize,
    pub log_freq: usize,
    pub train_loader: LoaderSpec,
    pub val_loader: Option<LoaderSpec>,
    pub teacher: ModelSetup,
    pub student: ModelSetup,
    pub optimizer: ComponentSpec,
    pub scheduler: Option<ComponentSpec>,
    pub criterion: CriterionSpec,
}

/// A stage as written: absent fields are inherited. For optional fields the
/// outer `Option` is presence and the inner one an explicit null.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawStage {
    pub num_epochs: Option<usize>,
    pub log_freq: Option<usize>,
    pub train_loader: Option<LoaderSpec>,
    pub val_loader: Option<Option<LoaderSpec>>,
    pub teacher: Option<ModelSetup>,
    pub student: Option<ModelSetup>,
    pub optimizer: Option<ComponentSpec>,
    pub scheduler: Option<Option<ComponentSpec>>,
    pub criterion: Option<CriterionSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSpec {
    pub loader: LoaderSpec,
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Keyed by dataset id.
    pub datasets: BTreeMap<String, DatasetEntry>,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub stages: Vec<StageConfig>,
    pub test: Option<TestSpec>,
    pub warnings: Vec<String>,
}

pub const DEFAULT_LOG_FREQ: usize = 100;

/// Field-by-field inheritance: stage `k` (0-based) takes its own value where
/// present, otherwise the resolved value of stage `k - 1`.
pub fn resolve_stage(raw: &[RawStage], k: usize, prev: Option<&StageConfig>) -> Result<StageConfig> {
    let r = raw.get(k).ok_or_else(|| Error::PreconditionViolation(format!("stage index {k} out of range")))?;
    let mut missing = Vec::new();
    macro_rules! req {
        ($f:ident, $name:literal) => {
            match (&r.$f, prev) {
                (Some(v), _) => Some(v.clone()),
                (None, Some(p)) => Some(p.$f.clone()),
                (None, None) => {
                    missing.push($name.to_string());
                    None
                }
            }
        };
    }
    let num_epochs = req!(num_epochs, "num_epochs");
    let train_loader = req!(train_loader, "train_data_loader");
    let optimizer = req!(optimizer, "optimizer");
    let criterion = req!(criterion, "criterion");
    if !missing.is_empty() {
        return Err(Error::IncompleteStage { stage: k + 1, missing });
    }
    let pick = |own: &Option<ModelSetup>, inherited: Option<&ModelSetup>, teacher: bool| match (own, inherited) {
        (Some(v), _) => v.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => ModelSetup::default_for(teacher),
    };
    Ok(StageConfig {
        num_epochs: num_epochs.expect("checked"),
        log_freq: r.log_freq.or(prev.map(|p| p.log_freq)).unwrap_or(DEFAULT_LOG_FREQ),
        train_loader: train_loader.expect("checked"),
        val_loader: match &r.val_loader {
            Some(v) => v.clone(),
            None => prev.and_then(|p| p.val_loader.clone()),
        },
        teacher: pick(&r.teacher, prev.map(|p| &p.teacher), true),
        student: pick(&r.student, prev.map(|p| &p.student), false),
        optimizer: optimizer.expect("checked"),
        scheduler: match &r.scheduler {
            Some(v) => v.clone(),
            None => prev.and_then(|p| p.scheduler.clone()),
        },
        criterion: criterion.expect("checked"),
    })
}

/// Resolve every stage in order.
pub fn resolve_stages(raw: &[RawStage]) -> Result<Vec<StageConfig>> {
    let mut out: Vec<StageConfig> = Vec::with_capacity(raw.len());
    for k in 0..raw.len() {
        let s = resolve_stage(raw, k, out.last())?;
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tree -> typed structures

struct Reader {
    issues: Vec<Issue>,
    warnings: Vec<String>,
}

fn join_loc(loc: &str, key: &str) -> String {
    if loc.is_empty() {
        key.to_string()
    } else {
        format!("{loc}.{key}")
    }
}

impl Reader {
    fn issue(&mut self, loc: &str, msg: impl Into<String>) {
        self.issues.push(Issue::new(loc, msg));
    }

    fn mapping<'v>(&mut self, v: &'v Value, loc: &str) -> Option<&'v Mapping> {
        match v {
            Value::Mapping(m) => Some(m),
            other => {
                self.issue(loc, format!("expected a mapping, got {}", kind_of(other)));
                None
            }
        }
    }

    /// Typed optional field; null counts as absent.
    fn opt<T: DeserializeOwned>(&mut self, m: &Mapping, key: &str, loc: &str) -> Option<T> {
        match m.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match serde_yaml::from_value(v.clone()) {
                Ok(t) => Some(t),
                Err(e) => {
                    self.issue(&join_loc(loc, key), e.to_string());
                    None
                }
            },
        }
    }

    fn req<T: DeserializeOwned>(&mut self, m: &Mapping, key: &str, loc: &str) -> Option<T> {
        if matches!(m.get(key), None | Some(Value::Null)) {
            self.issue(&join_loc(loc, key), "required field is missing");
            return None;
        }
        self.opt(m, key, loc)
    }

    fn warn_unknown(&mut self, m: &Mapping, known: &[&str], loc: &str) {
        for k in m.keys() {
            let name = k.as_str().map(str::to_string).unwrap_or_else(|| format!("{k:?}"));
            if !known.contains(&name.as_str()) {
                self.warnings.push(format!("{}: unknown key ignored", join_loc(loc, &name)));
            }
        }
    }

    fn params(&mut self, v: Option<&Value>, loc: &str) -> Params {
        match Params::from_value(v.unwrap_or(&Value::Null)) {
            Ok(p) => p,
            Err(e) => {
                self.issue(loc, e.to_string());
                Params::new()
            }
        }
    }

    fn component(&mut self, v: &Value, loc: &str) -> Option<ComponentSpec> {
        let m = self.mapping(v, loc)?;
        let type_name: String = self.req(m, "type", loc)?;
        self.warn_unknown(m, &["type", "params"], loc);
        Some(ComponentSpec { type_name, params: self.params(m.get("params"), &join_loc(loc, "params")) })
    }

    fn component_list(&mut self, v: Option<&Value>, loc: &str) -> Vec<ComponentSpec> {
        match v {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Sequence(items)) => {
                items.iter().enumerate().filter_map(|(i, it)| self.component(it, &format!("{loc}[{i}]"))).collect()
            }
            Some(other) => {
                self.issue(loc, format!("expected a list, got {}", kind_of(other)));
                Vec::new()
            }
        }
    }

    fn hooks(&mut self, v: Option<&Value>, loc: &str) -> Vec<HookSpec> {
        let Some(v) = v.filter(|v| !v.is_null()) else { return Vec::new() };
        let Some(m) = self.mapping(v, loc) else { return Vec::new() };
        self.warn_unknown(m, &["input", "output"], loc);
        let input: Vec<String> = self.opt(m, "input", loc).unwrap_or_default();
        let output: Vec<String> = self.opt(m, "output", loc).unwrap_or_default();
        HookSpec::from_lists(&input, &output)
    }

    fn datasets(&mut self, v: &Value) -> BTreeMap<String, DatasetEntry> {
        let mut out = BTreeMap::new();
        let Some(groups) = self.mapping(v, "datasets") else { return out };
        for (g, gv) in groups {
            let group = g.as_str().unwrap_or_default().to_string();
            let loc = join_loc("datasets", &group);
            let Some(gm) = self.mapping(gv, &loc) else { continue };
            self.warn_unknown(gm, &["name", "type", "root", "params", "splits"], &loc);
            let Some(type_name) = self.req::<String>(gm, "type", &loc) else { continue };
            let base = self.params(gm.get("params"), &join_loc(&loc, "params"));
            let Some(splits) = gm.get("splits").and_then(|s| self.mapping(s, &join_loc(&loc, "splits"))) else {
                self.issue(&join_loc(&loc, "splits"), "required field is missing");
                continue;
            };
            for (s, sv) in splits {
                let split = s.as_str().unwrap_or_default().to_string();
                let sloc = join_loc(&join_loc(&loc, "splits"), &split);
                let Some(sm) = self.mapping(sv, &sloc) else { continue };
                self.warn_unknown(sm, &["dataset_id", "params"], &sloc);
                let Some(id) = self.req::<String>(sm, "dataset_id", &sloc) else { continue };
                let mut params = base.clone();
                let own = self.params(sm.get("params"), &join_loc(&sloc, "params"));
                let mut transforms = Vec::new();
                for key in own.keys().map(str::to_string).collect::<Vec<_>>() {
                    let value = own.raw(&key).cloned().unwrap_or(Value::Null);
                    if key == "transform_params" {
                        transforms = self.component_list(Some(&value), &join_loc(&sloc, "params.transform_params"));
                    } else {
                        params.insert(&key, value);
                    }
                }
                if out.contains_key(&id) {
                    self.issue(&sloc, format!("duplicate dataset_id '{id}'"));
                    continue;
                }
                out.insert(
                    id,
                    DatasetEntry { group: group.clone(), split, type_name: type_name.clone(), params, transforms },
                );
            }
        }
        out
    }

    fn model(&mut self, m: &Mapping, key: &str) -> Option<ModelSpec> {
        let loc = join_loc("models", key);
        let Some(v) = m.get(key) else {
            self.issue(&loc, "required model is missing");
            return None;
        };
        let mm = self.mapping(v, &loc)?;
        self.warn_unknown(mm, &["name", "params", "ckpt", "forward_hook"], &loc);
        let name = self.req::<String>(mm, "name", &loc)?;
        Some(ModelSpec {
            name,
            params: self.params(mm.get("params"), &join_loc(&loc, "params")),
            ckpt: self.opt(mm, "ckpt", &loc),
            forward_hook: self.hooks(mm.get("forward_hook"), &join_loc(&loc, "forward_hook")),
        })
    }

    fn setup(&mut self, v: &Value, loc: &str, teacher: bool) -> Option<ModelSetup> {
        let m = self.mapping(v, loc)?;
        self.warn_unknown(
            m,
            &["requires_grad", "sequential", "frozen_modules", "forward_hook", "wrapper", "special"],
            loc,
        );
        let d = ModelSetup::default_for(teacher);
        Some(ModelSetup {
            requires_grad: self.opt(m, "requires_grad", loc).unwrap_or(d.requires_grad),
            sequential: self.opt(m, "sequential", loc).unwrap_or_default(),
            frozen_modules: self.opt(m, "frozen_modules", loc).unwrap_or_default(),
            forward_hook: self.hooks(m.get("forward_hook"), &join_loc(loc, "forward_hook")),
            wrapper: self.opt(m, "wrapper", loc),
            special: match m.get("special") {
                None | Some(Value::Null) => None,
                Some(s) => self.component(s, &join_loc(loc, "special")),
            },
        })
    }

    fn loader(&mut self, v: &Value, loc: &str) -> Option<LoaderSpec> {
        let m = self.mapping(v, loc)?;
        self.warn_unknown(
            m,
            &[
                "dataset_id",
                "random_sample",
                "batch_size",
                "num_workers",
                "cache_output",
                "attach_index",
                "supplementary",
            ],
            loc,
        );
        let dataset_id = self.req::<String>(m, "dataset_id", loc)?;
        let batch_size = self.req::<usize>(m, "batch_size", loc)?;
        if batch_size == 0 {
            self.issue(&join_loc(loc, "batch_size"), "must be at least 1");
        }
        Some(LoaderSpec {
            dataset_id,
            batch_size,
            shuffle: self.opt(m, "random_sample", loc).unwrap_or(false),
            num_workers: self.opt(m, "num_workers", loc).unwrap_or(0),
            cache_output: self.opt::<String>(m, "cache_output", loc).filter(|s| !s.is_empty()),
            attach_index: self.opt(m, "attach_index", loc).unwrap_or(false),
            providers: self.component_list(m.get("supplementary"), &join_loc(loc, "supplementary")),
        })
    }

    fn bindings(&mut self, v: Option<&Value>, loc: &str) -> Option<Vec<Binding>> {
        let v = v?;
        let items = match v {
            Value::Null => return None,
            Value::Sequence(s) => s.clone(),
            other => vec![other.clone()],
        };
        let mut out = Vec::new();
        for (i, it) in items.into_iter().enumerate() {
            match serde_yaml::from_value::<Binding>(it) {
                Ok(b) => out.push(b),
                Err(e) => self.issue(&format!("{loc}[{i}]"), e.to_string()),
            }
        }
        Some(out)
    }

    fn term(&mut self, v: &Value, loc: &str) -> Option<TermSpec> {
        let m = self.mapping(v, loc)?;
        self.warn_unknown(m, &["criterion", "factor", "student", "teacher"], loc);
        let criterion = match m.get("criterion") {
            Some(c) => self.component(c, &join_loc(loc, "criterion"))?,
            None => {
                self.issue(&join_loc(loc, "criterion"), "required field is missing");
                return None;
            }
        };
        let factor: f64 = self.opt(m, "factor", loc).unwrap_or(1.0);
        if !(factor >= 0.0) || !factor.is_finite() {
            self.issue(&join_loc(loc, "factor"), "weights must be finite and non-negative");
        }
        Some(TermSpec {
            criterion,
            factor,
            student: self.bindings(m.get("student"), &join_loc(loc, "student")),
            teacher: self.bindings(m.get("teacher"), &join_loc(loc, "teacher")),
        })
    }

    fn criterion(&mut self, v: &Value, loc: &str) -> Option<CriterionSpec> {
        let m = self.mapping(v, loc)?;
        self.warn_unknown(m, &["type", "org_term", "sub_terms"], loc);
        let type_name: String = self.opt(m, "type", loc).unwrap_or_else(|| "GeneralizedCustomLoss".into());
        if type_name != "GeneralizedCustomLoss" {
            self.issue(
                &join_loc(loc, "type"),
                format!("unknown criterion wrapper '{type_name}'; use 'GeneralizedCustomLoss'"),
            );
        }
        let org_term = match m.get("org_term") {
            None | Some(Value::Null) => None,
            Some(t) => self.term(t, &join_loc(loc, "org_term")),
        };
        let mut sub_terms = Vec::new();
        match m.get("sub_terms") {
            None | Some(Value::Null) => {}
            Some(Value::Mapping(sm)) => {
                for (k, tv) in sm {
                    let name = k.as_str().unwrap_or_default().to_string();
                    if let Some(t) = self.term(tv, &join_loc(&join_loc(loc, "sub_terms"), &name)) {
                        sub_terms.push((name, t));
                    }
                }
            }
            Some(other) => {
                self.issue(&join_loc(loc, "sub_terms"), format!("expected a mapping, got {}", kind_of(other)))
            }
        }
        if org_term.is_none() && sub_terms.is_empty() {
            self.issue(loc, "at least one loss term is required");
        }
        Some(CriterionSpec { type_name, org_term, sub_terms })
    }

    fn stage(&mut self, v: &Value, loc: &str) -> RawStage {
        let mut r = RawStage::default();
        let Some(m) = self.mapping(v, loc) else { return r };
        self.warn_unknown(
            m,
            &[
                "log_freq",
                "num_epochs",
                "train_data_loader",
                "val_data_loader",
                "teacher",
                "student",
                "optimizer",
                "scheduler",
                "criterion",
                "apex",
            ],
            loc,
        );
        if let Some(a) = m.get("apex").and_then(Value::as_mapping) {
            if a.get("requires").and_then(Value::as_bool) == Some(true) {
                self.warnings.push(format!("{loc}.apex: mixed precision is not supported; ignored"));
            }
        }
        r.num_epochs = self.opt(m, "num_epochs", loc);
        if r.num_epochs == Some(0) {
            self.issue(&join_loc(loc, "num_epochs"), "must be at least 1");
        }
        r.log_freq = self.opt(m, "log_freq", loc);
        if r.log_freq == Some(0) {
            self.issue(&join_loc(loc, "log_freq"), "must be at least 1");
        }
        r.train_loader = m
            .get("train_data_loader")
            .filter(|v| !v.is_null())
            .and_then(|v| self.loader(v, &join_loc(loc, "train_data_loader")));
        r.val_loader = m.get("val_data_loader").map(|v| {
            if v.is_null() {
                None
            } else {
                self.loader(v, &join_loc(loc, "val_data_loader"))
            }
        });
        r.teacher =
            m.get("teacher").filter(|v| !v.is_null()).and_then(|v| self.setup(v, &join_loc(loc, "teacher"), true));
        r.student =
            m.get("student").filter(|v| !v.is_null()).and_then(|v| self.setup(v, &join_loc(loc, "student"), false));
        r.optimizer =
            m.get("optimizer").filter(|v| !v.is_null()).and_then(|v| self.component(v, &join_loc(loc, "optimizer")));
        r.scheduler =
            m.get("scheduler").map(|v| if v.is_null() { None } else { self.component(v, &join_loc(loc, "scheduler")) });
        r.criterion =
            m.get("criterion").filter(|v| !v.is_null()).and_then(|v| self.criterion(v, &join_loc(loc, "criterion")));
        r
    }

    fn stages(&mut self, v: &Value) -> Vec<RawStage> {
        let Some(m) = self.mapping(v, "train") else { return Vec::new() };
        let stage_keys: Vec<(usize, String)> = m
            .keys()
            .filter_map(|k| {
                let s = k.as_str()?;
                let n: usize = s.strip_prefix("stage")?.parse().ok()?;
                Some((n, s.to_string()))
            })
            .collect();
        if stage_keys.is_empty() {
            return vec![self.stage(v, "train")];
        }
        if stage_keys.len() != m.len() {
            self.issue("train", "mixes stageN keys with stage fields; put every field inside a stage");
        }
        let mut sorted = stage_keys;
        sorted.sort();
        for (i, (n, key)) in sorted.iter().enumerate() {
            if *n != i + 1 {
                self.issue(
                    &join_loc("train", key),
                    format!("stages must be numbered 1..N without gaps; expected stage{}", i + 1),
                );
            }
        }
        sorted.iter().map(|(_, key)| self.stage(&m[key.as_str()], &join_loc("train", key))).collect()
    }
}

/// Parse a tree into an [`ExperimentConfig`] without registry checks.
pub fn read_experiment(tree: &Value) -> Result<ExperimentConfig> {
    match read_lenient(tree)? {
        (Some(cfg), issues) if issues.is_empty() => Ok(cfg),
        (_, issues) => Err(Error::Validation(issues)),
    }
}

/// Like [`read_experiment`], but hands back whatever could be read alongside
/// the structural issues, so later checks can still run on it.
pub(crate) fn read_lenient(tree: &Value) -> Result<(Option<ExperimentConfig>, Vec<Issue>)> {
    let mut r = Reader { issues: Vec::new(), warnings: Vec::new() };
    let Some(top) = r.mapping(tree, "<root>").cloned() else {
        return Ok((None, r.issues));
    };
    r.warn_unknown(&top, &["datasets", "models", "train", "test"], "");
    let datasets = match top.get("datasets") {
        Some(v) => r.datasets(v),
        None => {
            r.issue("datasets", "required section is missing");
            BTreeMap::new()
        }
    };
    let (teacher, student) = match top.get("models").and_then(|v| r.mapping(v, "models")) {
        Some(m) => {
            r.warn_unknown(m, &["teacher_model", "student_model"], "models");
            (r.model(m, "teacher_model"), r.model(m, "student_model"))
        }
        None => {
            if !top.contains_key("models") {
                r.issue("models", "required section is missing");
            }
            (None, None)
        }
    };
    let raw_stages = match top.get("train") {
        Some(v) => r.stages(v),
        None => {
            r.issue("train", "required section is missing");
            Vec::new()
        }
    };
    let test = match top.get("test").filter(|v| !v.is_null()) {
        Some(v) => r.mapping(v, "test").cloned().and_then(|m| {
            r.warn_unknown(&m, &["test_data_loader", "metrics"], "test");
            let loader = match m.get("test_data_loader") {
                Some(l) => r.loader(l, "test.test_data_loader"),
                None => {
                    r.issue("test.test_data_loader", "required field is missing");
                    None
                }
            };
            let metrics: Vec<String> = r.opt(&m, "metrics", "test").unwrap_or_else(|| vec!["top1".into()]);
            loader.map(|loader| TestSpec { loader, metrics })
        }),
        None => None,
    };
    let stages = match resolve_stages(&raw_stages) {
        Ok(s) => s,
        Err(Error::IncompleteStage { stage, missing }) => {
            for f in missing {
                r.issue(&format!("train stage {stage}"), format!("'{f}' is required in the first stage"));
            }
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    if raw_stages.is_empty() && top.contains_key("train") {
        r.issue("train", "no stages defined");
    }
    let cfg = match (teacher, student) {
        (Some(teacher), Some(student)) => {
            Some(ExperimentConfig { datasets, teacher, student, stages, test, warnings: r.warnings })
        }
        _ => None,
    };
    Ok((cfg, r.issues))
}

// ---------------------------------------------------------------------------
// typed structures -> canonical tree

fn map(entries: Vec<(&str, Value)>) -> Value {
    let mut m = Mapping::new();
    for (k, v) in entries {
        m.insert(Value::String(k.to_string()), v);
    }
    Value::Mapping(m)
}

fn strings(v: &[String]) -> Value {
    Value::Sequence(v.iter().cloned().map(Value::String).collect())
}

fn hooks_value(h: &[HookSpec]) -> Value {
    let pick = |want: CaptureKind| -> Vec<String> {
        h.iter().filter(|s| s.capture == want || s.capture == CaptureKind::Both).map(|s| s.path.clone()).collect()
    };
    map(vec![("input", strings(&pick(CaptureKind::Input))), ("output", strings(&pick(CaptureKind::Output)))])
}

fn opt_str(s: &Option<String>) -> Value {
    s.clone().map(Value::String).unwrap_or(Value::Null)
}

impl LoaderSpec {
    fn to_value(&self) -> Value {
        map(vec![
            ("dataset_id", self.dataset_id.clone().into()),
            ("random_sample", self.shuffle.into()),
            ("batch_size", (self.batch_size as u64).into()),
            ("num_workers", (self.num_workers as u64).into()),
            ("cache_output", opt_str(&self.cache_output)),
            ("attach_index", self.attach_index.into()),
            ("supplementary", Value::Sequence(self.providers.iter().map(ComponentSpec::to_value).collect())),
        ])
    }
}

impl ModelSetup {
    fn to_value(&self) -> Value {
        map(vec![
            ("requires_grad", self.requires_grad.into()),
            ("sequential", strings(&self.sequential)),
            ("frozen_modules", strings(&self.frozen_modules)),
            ("forward_hook", hooks_value(&self.forward_hook)),
            ("wrapper", opt_str(&self.wrapper)),
            ("special", self.special.as_ref().map(ComponentSpec::to_value).unwrap_or(Value::Null)),
        ])
    }
}

fn bindings_value(b: &Option<Vec<Binding>>) -> Value {
    match b {
        None => Value::Null,
        Some(list) => serde_yaml::to_value(list).expect("bindings serialize"),
    }
}

impl TermSpec {
    fn to_value(&self) -> Value {
        map(vec![
            ("criterion", self.criterion.to_value()),
            ("factor", self.factor.into()),
            ("student", bindings_value(&self.student)),
            ("teacher", bindings_value(&self.teacher)),
        ])
    }
}

impl StageConfig {
    fn to_value(&self) -> Value {
        let mut sub = Mapping::new();
        for (k, t) in &self.criterion.sub_terms {
            sub.insert(k.clone().into(), t.to_value());
        }
        map(vec![
            ("num_epochs", (self.num_epochs as u64).into()),
            ("log_freq", (self.log_freq as u64).into()),
            ("train_data_loader", self.train_loader.to_value()),
            ("val_data_loader", self.val_loader.as_ref().map(LoaderSpec::to_value).unwrap_or(Value::Null)),
            ("teacher", self.teacher.to_value()),
            ("student", self.student.to_value()),
            ("optimizer", self.optimizer.to_value()),
            ("scheduler", self.scheduler.as_ref().map(ComponentSpec::to_value).unwrap_or(Value::Null)),
            (
                "criterion",
                map(vec![
                    ("type", self.criterion.type_name.clone().into()),
                    ("org_term", self.criterion.org_term.as_ref().map(TermSpec::to_value).unwrap_or(Value::Null)),
                    ("sub_terms", Value::Mapping(sub)),
                ]),
            ),
        ])
    }
}

impl ModelSpec {
    fn to_value(&self) -> Value {
        map(vec![
            ("name", self.name.clone().into()),
            ("params", self.params.to_value()),
            ("ckpt", opt_str(&self.ckpt)),
            ("forward_hook", hooks_value(&self.forward_hook)),
        ])
    }
}

impl ExperimentConfig {
    /// Canonical, fully resolved tree: every stage explicit, no aliases or tags.
    pub fn to_value(&self) -> Value {
        let mut groups: BTreeMap<&str, (String, Mapping)> = BTreeMap::new();
        for (id, d) in &self.datasets {
            let mut params = d.params.to_value();
            if let Value::Mapping(m) = &mut params {
                m.insert(
                    "transform_params".into(),
                    Value::Sequence(d.transforms.iter().map(ComponentSpec::to_value).collect()),
                );
            }
            let entry = groups.entry(&d.group).or_insert_with(|| (d.type_name.clone(), Mapping::new()));
            entry.1.insert(d.split.clone().into(), map(vec![("dataset_id", id.clone().into()), ("params", params)]));
        }
        let mut datasets = Mapping::new();
        for (g, (ty, splits)) in groups {
            datasets.insert(g.into(), map(vec![("type", ty.into()), ("splits", Value::Mapping(splits))]));
        }
        let mut train = Mapping::new();
        for (i, s) in self.stages.iter().enumerate() {
            train.insert(format!("stage{}", i + 1).into(), s.to_value());
        }
        let mut top = vec![
            ("datasets", Value::Mapping(datasets)),
            (
                "models",
                map(vec![("teacher_model", self.teacher.to_value()), ("student_model", self.student.to_value())]),
            ),
            ("train", Value::Mapping(train)),
        ];
        if let Some(t) = &self.test {
            top.push(("test", map(vec![("test_data_loader", t.loader.to_value()), ("metrics", strings(&t.metrics))])));
        }
        map(top)
    }

    pub fn to_yaml(&self) -> String {
        emit(&self.to_value())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}
