use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_yaml::Value;

use super::{read_lenient, ExperimentConfig, LoaderSpec, ModelSetup, ModelSpec, TermSpec};
use crate::engine::{assemble_model, AuxStore};
use crate::error::{Error, Issue, Result, Side};
use crate::hooks::{CaptureKind, HookSpec, Network};
use crate::losses::Role;
use crate::nn::Module;
use crate::params::Params;
use crate::registry::{Component, Registry};

/// Parse, evaluate tags and validate against `registry`.
pub fn load_experiment(text: &str, registry: &Registry) -> Result<ExperimentConfig> {
    let tree = super::parse_config(text)?;
    build_experiment(&tree, registry)
}

/// Turn an evaluated tree into a validated experiment. Every problem found is
/// reported in a single [`Error::Validation`].
pub fn build_experiment(tree: &Value, registry: &Registry) -> Result<ExperimentConfig> {
    let (cfg, mut issues) = read_lenient(tree)?;
    // registry checks still run on a structurally flawed config, so one pass reports everything
    if let Some(cfg) = &cfg {
        for i in validate(cfg, registry) {
            if !issues.contains(&i) {
                issues.push(i);
            }
        }
    }
    match cfg {
        Some(cfg) if issues.is_empty() => Ok(cfg),
        _ => Err(Error::Validation(issues)),
    }
}

struct DatasetInfo {
    len: usize,
    stochastic: bool,
}

/// Hooked (path, side) pairs plus auxiliary names of one assembled network.
#[derive(Default)]
struct Readable {
    hooked: BTreeSet<(String, Side)>,
    aux: BTreeSet<String>,
}

impl Readable {
    fn allows(&self, path: &str, io: Side) -> bool {
        self.hooked.contains(&(path.to_string(), io)) || (io == Side::Output && self.aux.contains(path))
    }
}

pub fn effective_hooks(model: &ModelSpec, setup: &ModelSetup) -> Vec<HookSpec> {
    let mut out = model.forward_hook.clone();
    out.extend(setup.forward_hook.iter().cloned());
    out
}

fn sides(h: &HookSpec) -> &'static [Side] {
    match h.capture {
        CaptureKind::Input => &[Side::Input],
        CaptureKind::Output => &[Side::Output],
        CaptureKind::Both => &[Side::Input, Side::Output],
    }
}

struct Validator<'r> {
    registry: &'r Registry,
    issues: Vec<Issue>,
    datasets: BTreeMap<String, DatasetInfo>,
}

impl Validator<'_> {
    fn issue(&mut self, loc: &str, msg: impl ToString) {
        self.issues.push(Issue::new(loc, msg.to_string()));
    }

    fn loader(&mut self, l: &LoaderSpec, loc: &str, require_batches: bool) {
        match self.datasets.get(&l.dataset_id) {
            None => {
                let known: Vec<&str> = self.datasets.keys().map(String::as_str).collect();
                let hint = known
                    .iter()
                    .filter(|k| strsim::levenshtein(k, &l.dataset_id) <= 2)
                    .map(|k| format!("'{k}'"))
                    .collect::<Vec<_>>();
                let hint = if hint.is_empty() { String::new() } else { format!("; did you mean {}?", hint.join(", ")) };
                self.issue(&format!("{loc}.dataset_id"), format!("unknown dataset_id '{}'{hint}", l.dataset_id));
            }
            Some(d) if require_batches && d.len == 0 => {
                self.issue(loc, format!("dataset '{}' is empty; the loader yields no batches", l.dataset_id));
            }
            _ => {}
        }
        for (i, p) in l.providers.iter().enumerate() {
            match self.registry.wrapper(&p.type_name, &p.params) {
                Ok(Component::Provider(_)) => {}
                Ok(_) => self
                    .issue(&format!("{loc}.supplementary[{i}]"), format!("'{}' is not a data provider", p.type_name)),
                Err(e) => self.issue(&format!("{loc}.supplementary[{i}]"), e),
            }
        }
    }

    fn network(
        &mut self,
        base: &Arc<dyn Module>,
        spec: &ModelSpec,
        setup: &ModelSetup,
        store: &mut AuxStore,
        loc: &str,
    ) -> Option<(Readable, bool)> {
        if let Some(w) = &setup.wrapper {
            if let Err(e) = self.registry.wrapper(w, &Params::new()) {
                self.issue(&format!("{loc}.wrapper"), e);
            }
        }
        let mut rng = StdRng::seed_from_u64(0);
        let model = match assemble_model(base, setup, self.registry, store, &mut rng, None) {
            Ok(m) => m,
            Err(e) => {
                self.issue(loc, e);
                return None;
            }
        };
        let net = Network::new(model.clone());
        let hooks = effective_hooks(spec, setup);
        let mut ok = true;
        for h in &hooks {
            if let Err(e) = net.attach(std::slice::from_ref(h)) {
                self.issue(&format!("{loc}.forward_hook"), e);
                ok = false;
            }
        }
        let mut r = Readable::default();
        for h in &hooks {
            for &s in sides(h) {
                r.hooked.insert((h.path.clone(), s));
            }
        }
        if let Some(sp) = &setup.special {
            if let Ok(spec) = self.registry.special(&sp.type_name, &sp.params) {
                for a in &spec.auxiliaries {
                    if !r.hooked.contains(&(a.path.clone(), a.io)) {
                        self.issue(
                            &format!("{loc}.special"),
                            format!("auxiliary '{}' reads the {} of '{}', which is not hooked", a.name, a.io, a.path),
                        );
                    }
                    r.aux.insert(a.name.clone());
                }
            }
        }
        let trainable = !crate::toolkit::trainable_params(model.as_ref()).is_empty();
        ok.then_some((r, trainable))
    }

    fn term(&mut self, term: &TermSpec, loc: &str, student: Option<&Readable>, teacher: Option<&Readable>) {
        if let Err(e) = self.registry.loss(&term.criterion.type_name, &term.criterion.params) {
            self.issue(&format!("{loc}.criterion"), e);
        }
        for (slot, list) in [(Role::Student, &term.student), (Role::Teacher, &term.teacher)] {
            for (i, b) in list.iter().flatten().enumerate() {
                let Some(path) = &b.path else { continue };
                let role = b.from.unwrap_or(slot);
                let readable = match role {
                    Role::Student => student,
                    Role::Teacher => teacher,
                };
                let Some(readable) = readable else { continue };
                if !readable.allows(path, b.io) {
                    let who = if role == Role::Student { "student" } else { "teacher" };
                    self.issue(
                        &format!("{loc}.{}[{i}]", if slot == Role::Student { "student" } else { "teacher" }),
                        format!("the {} of {who} module '{path}' is not captured; add it to forward_hook", b.io),
                    );
                }
            }
        }
    }
}

fn validate(cfg: &ExperimentConfig, registry: &Registry) -> Vec<Issue> {
    let mut v = Validator { registry, issues: Vec::new(), datasets: BTreeMap::new() };
    for (id, d) in &cfg.datasets {
        let loc = format!("datasets.{}.splits.{}", d.group, d.split);
        let mut stochastic = false;
        for (i, t) in d.transforms.iter().enumerate() {
            match registry.transform(&t.type_name, &t.params) {
                Ok(t) => stochastic |= t.is_stochastic(),
                Err(e) => v.issue(&format!("{loc}.params.transform_params[{i}]"), e),
            }
        }
        match registry.dataset(&d.type_name, &d.params) {
            Ok(ds) => {
                v.datasets.insert(id.clone(), DatasetInfo { len: ds.len(), stochastic });
            }
            Err(e) => v.issue(&loc, e),
        }
    }

    let mut rng = StdRng::seed_from_u64(0);
    let mut build = |m: &ModelSpec, loc: &str, v: &mut Validator| match registry.model(&m.name, &m.params, &mut rng) {
        Ok(m) => Some(m),
        Err(e) => {
            v.issue(loc, e);
            None
        }
    };
    let teacher = build(&cfg.teacher, "models.teacher_model", &mut v);
    let student = build(&cfg.student, "models.student_model", &mut v);

    let mut stores = (AuxStore::new(), AuxStore::new());
    for (k, stage) in cfg.stages.iter().enumerate() {
        let loc = format!("train.stage{}", k + 1);
        v.loader(&stage.train_loader, &format!("{loc}.train_data_loader"), true);
        if let Some(l) = &stage.val_loader {
            v.loader(l, &format!("{loc}.val_data_loader"), true);
        }
        let t = teacher
            .as_ref()
            .and_then(|m| v.network(m, &cfg.teacher, &stage.teacher, &mut stores.0, &format!("{loc}.teacher")));
        let s = student
            .as_ref()
            .and_then(|m| v.network(m, &cfg.student, &stage.student, &mut stores.1, &format!("{loc}.student")));
        let c = &stage.criterion;
        if let Some(org) = &c.org_term {
            v.term(org, &format!("{loc}.criterion.org_term"), s.as_ref().map(|x| &x.0), t.as_ref().map(|x| &x.0));
        }
        for (name, term) in &c.sub_terms {
            v.term(
                term,
                &format!("{loc}.criterion.sub_terms.{name}"),
                s.as_ref().map(|x| &x.0),
                t.as_ref().map(|x| &x.0),
            );
        }
        if let Err(e) = registry.optimizer(&stage.optimizer.type_name, &stage.optimizer.params) {
            v.issue(&format!("{loc}.optimizer"), e);
        }
        if let Some(sch) = &stage.scheduler {
            if let Err(e) = registry.scheduler(&sch.type_name, &sch.params) {
                v.issue(&format!("{loc}.scheduler"), e);
            }
        }
        if stage.train_loader.cache_output.is_some() {
            let cl = format!("{loc}.train_data_loader.cache_output");
            if v.datasets.get(&stage.train_loader.dataset_id).is_some_and(|d| d.stochastic) {
                v.issue(&cl, "caching teacher outputs requires deterministic transforms");
            }
            if t.as_ref().is_some_and(|x| x.1) {
                v.issue(&cl, "caching teacher outputs requires a frozen teacher");
            }
        }
    }
    if let Some(test) = &cfg.test {
        v.loader(&test.loader, "test.test_data_loader", true);
        for m in &test.metrics {
            if !matches!(m.as_str(), "top1" | "top5") {
                v.issue("test.metrics", format!("unknown metric '{m}'; use top1 or top5"));
            }
        }
    }
    v.issues
}
