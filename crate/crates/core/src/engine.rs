//! Stage-by-stage training driven by an [`ExperimentConfig`].

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use distill_tensor::{no_grad, Tensor};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, LoaderSpec, ModelSetup, StageConfig};
use crate::data::{derive_seed, CacheStore, DataLoader, Pipeline, WrappedDataset};
use crate::error::{Error, Result};
use crate::hooks::{IoDictionary, Network};
use crate::logging::{LogRecord, RunLog};
use crate::losses::{Binding, CompositeLoss, LossTerm, NetView, Role};
use crate::nn::{find_module, named_parameters, state_dict, ForwardCtx, IoEntry, Module};
use crate::registry::{Component, Registry};
use crate::toolkit::{load_ckpt, load_state, redesign, save_ckpt, trainable_params, RedesignSpec, SpecialModule};

/// Auxiliary modules by name; they persist across stages.
pub type AuxStore = BTreeMap<String, Arc<dyn Module>>;

/// Build the per-stage view of a model: redesign, auxiliary branches, then
/// trainability. Parameters stay shared with `base`.
pub fn assemble_model(
    base: &Arc<dyn Module>,
    setup: &ModelSetup,
    registry: &Registry,
    store: &mut AuxStore,
    rng: &mut StdRng,
    base_dir: Option<&Path>,
) -> Result<Arc<dyn Module>> {
    for (_, p) in named_parameters(base.as_ref()) {
        p.set_trainable(setup.requires_grad);
    }
    let core = redesign(base, &RedesignSpec::from_list(&setup.sequential))?;
    let model: Arc<dyn Module> = match &setup.special {
        None => core,
        Some(sp) => {
            let spec = registry.special(&sp.type_name, &sp.params)?;
            let mut aux = Vec::new();
            for a in spec.auxiliaries {
                let m = match store.get(&a.name) {
                    Some(m) => m.clone(),
                    None => {
                        let m = registry.auxiliary(&a.type_name, &a.params, rng)?;
                        if let (Some(ck), Some(dir)) = (&a.ckpt, base_dir) {
                            load_ckpt(m.as_ref(), &dir.join(ck))?;
                        }
                        store.insert(a.name.clone(), m.clone());
                        m
                    }
                };
                aux.push((a, m));
            }
            Arc::new(SpecialModule::new(core, aux)?)
        }
    };
    for path in &setup.frozen_modules {
        let m = find_module(&model, path)?;
        for (_, p) in named_parameters(m.as_ref()) {
            p.set_trainable(false);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    /// Relative paths in the config (checkpoints, caches) resolve against this.
    pub base_dir: PathBuf,
    pub echo_console: bool,
    pub test_only: bool,
    pub resume_ckpt: Option<PathBuf>,
    pub device: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 42,
            log_path: None,
            report_path: None,
            base_dir: PathBuf::from("."),
            echo_console: false,
            test_only: false,
            resume_ckpt: None,
            device: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
}

impl Metrics {
    pub fn get(&self, name: &str) -> f64 {
        if name == "top5" {
            self.top5
        } else {
            self.top1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub val: Option<Metrics>,
    /// Wall time of the training loop (validation excluded).
    pub seconds: f64,
    pub teacher_seconds: f64,
    pub student_seconds: f64,
    pub data_seconds: f64,
    pub teacher_forwards: u64,
    pub cache_hits: usize,
    pub teacher_module_calls: u64,
    pub student_module_calls: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub epochs: Vec<EpochReport>,
    pub best_val: Option<f64>,
    pub test: Option<Metrics>,
    #[serde(skip)]
    pub log: Vec<String>,
}

/// Models visible to an [`Observer`] during a stage.
pub struct StageModels<'a> {
    pub teacher_base: &'a Arc<dyn Module>,
    pub student_base: &'a Arc<dyn Module>,
    pub teacher: &'a Network,
    pub student: &'a Network,
}

pub trait Observer {
    fn on_stage_start(&mut self, _stage: usize, _models: &StageModels) {}
    fn on_stage_end(&mut self, _stage: usize, _models: &StageModels) {}
}

struct NoObserver;
impl Observer for NoObserver {}

pub fn run_experiment(cfg: &ExperimentConfig, registry: &Registry, opts: &RunOptions) -> Result<ExperimentReport> {
    run_experiment_observed(cfg, registry, opts, &mut NoObserver)
}

/// Top-1/top-5 accuracy of `model` in eval mode.
pub fn evaluate(model: &dyn Module, loader: &DataLoader) -> Result<Metrics> {
    no_grad(|| {
        let (mut n, mut c1, mut c5) = (0usize, 0usize, 0usize);
        for batch in loader.iter(0) {
            let batch = batch?;
            let logits = model.forward(&batch.input, &mut ForwardCtx::new(false))?;
            let [rows, classes] = logits.dims2("evaluate")?;
            let v = logits.to_vec_f64();
            for (r, &y) in batch.targets.iter().enumerate().take(rows) {
                let row = &v[r * classes..(r + 1) * classes];
                let better = row.iter().filter(|&&x| x > row[y]).count();
                c1 += usize::from(better == 0);
                c5 += usize::from(better < 5);
            }
            n += rows;
        }
        let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        Ok(Metrics { top1: pct(c1), top5: pct(c5) })
    })
}

fn build_loss(stage: &StageConfig, registry: &Registry) -> Result<CompositeLoss> {
    let mut terms = Vec::new();
    let c = &stage.criterion;
    let all =
        c.org_term.iter().map(|t| ("org_term".to_string(), t)).chain(c.sub_terms.iter().map(|(n, t)| (n.clone(), t)));
    for (name, t) in all {
        let criterion = registry.loss(&t.criterion.type_name, &t.criterion.params)?;
        let student = t.student.clone().unwrap_or_else(|| vec![Binding::output()]);
        let teacher = match &t.teacher {
            Some(b) => b.clone(),
            None if criterion.uses_teacher() => vec![Binding::output()],
            None => Vec::new(),
        };
        terms.push(LossTerm { name, criterion, factor: t.factor, student, teacher });
    }
    Ok(CompositeLoss { terms })
}

fn snapshot(model: &dyn Module) -> BTreeMap<String, Tensor> {
    state_dict(model).into_iter().map(|(k, p)| (k, p.value())).collect()
}

fn last_ckpt_path(p: &Path) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match p.extension() {
        Some(e) => format!("{stem}_last.{}", e.to_string_lossy()),
        None => format!("{stem}_last"),
    };
    p.with_file_name(name)
}

/// Everything that determines the teacher's outputs for a given dataset.
fn cache_fingerprint(
    cfg: &ExperimentConfig,
    stage: &StageConfig,
    teacher: &dyn Module,
    data: &WrappedDataset,
) -> String {
    let mut h = Sha256::new();
    h.update(cfg.teacher.name.as_bytes());
    h.update(format!("{:?}", cfg.teacher.params).as_bytes());
    h.update(format!("{:?}{:?}", cfg.teacher.forward_hook, stage.teacher).as_bytes());
    for (name, p) in state_dict(teacher) {
        h.update(name.as_bytes());
        for x in p.value().to_vec_f64() {
            h.update(x.to_le_bytes());
        }
    }
    h.update(data.base().describe().as_bytes());
    h.update(data.pipeline().describe().as_bytes());
    h.update((data.len() as u64).to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const OUTPUT_KEY: &str = "output";

fn cache_rows(y: &Tensor, io: &IoDictionary, n: usize) -> Result<Vec<Vec<(String, Tensor)>>> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![(OUTPUT_KEY.to_string(), y.index_select0(&[i])?)];
        for (path, e) in io.entries() {
            if let Some(inputs) = &e.input {
                for (j, t) in inputs.iter().enumerate() {
                    row.push((format!("in{j}|{path}"), t.index_select0(&[i])?));
                }
            }
            if let Some(t) = &e.output {
                row.push((format!("out|{path}"), t.index_select0(&[i])?));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn uncache_rows(rows: Vec<Vec<(String, Tensor)>>) -> Result<(Tensor, IoDictionary)> {
    let keys: Vec<String> = rows.first().map(|r| r.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut columns: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for row in rows {
        if row.len() != keys.len() {
            return Err(Error::Other("cache entries have inconsistent contents".into()));
        }
        for (k, t) in row {
            columns.entry(k).or_default().push(t);
        }
    }
    let mut y = None;
    let mut entries: BTreeMap<String, IoEntry> = BTreeMap::new();
    for (k, parts) in columns {
        let t = Tensor::cat0(&parts)?;
        if k == OUTPUT_KEY {
            y = Some(t);
        } else if let Some(path) = k.strip_prefix("out|") {
            entries.entry(path.to_string()).or_default().output = Some(t);
        } else if let Some((slot, path)) = k.split_once('|') {
            let j: usize = slot.trim_start_matches("in").parse().unwrap_or(0);
            let inputs = entries.entry(path.to_string()).or_default().input.get_or_insert_with(Vec::new);
            if inputs.len() <= j {
                inputs.resize(j + 1, t.clone());
            }
            inputs[j] = t;
        }
    }
    let y = y.ok_or_else(|| Error::Other("cache entry has no teacher output".into()))?;
    Ok((y, IoDictionary::from_entries(entries, 0)))
}

struct Resources<'a> {
    cfg: &'a ExperimentConfig,
    registry: &'a Registry,
    opts: &'a RunOptions,
    datasets: BTreeMap<String, Arc<dyn crate::data::Dataset>>,
    pipelines: BTreeMap<String, Pipeline>,
}

impl Resources<'_> {
    fn loader(&self, spec: &LoaderSpec, seed: u64, attach_index: bool) -> Result<DataLoader> {
        let base = self
            .datasets
            .get(&spec.dataset_id)
            .ok_or_else(|| Error::PreconditionViolation(format!("unknown dataset_id '{}'", spec.dataset_id)))?;
        let mut wrapped = WrappedDataset::new(base.clone(), self.pipelines[&spec.dataset_id].clone())
            .with_index(spec.attach_index || attach_index);
        for p in &spec.providers {
            match self.registry.wrapper(&p.type_name, &p.params)? {
                Component::Provider(p) => wrapped = wrapped.with_provider(p),
                _ => return Err(Error::PreconditionViolation(format!("'{}' is not a data provider", p.type_name))),
            }
        }
        Ok(DataLoader::new(Arc::new(wrapped), spec.batch_size, spec.shuffle, seed)?.with_workers(spec.num_workers))
    }

    fn path(&self, p: &str) -> PathBuf {
        self.opts.base_dir.join(p)
    }
}

pub fn run_experiment_observed(
    cfg: &ExperimentConfig,
    registry: &Registry,
    opts: &RunOptions,
    observer: &mut dyn Observer,
) -> Result<ExperimentReport> {
    let mut log = RunLog::new(opts.log_path.as_deref(), opts.echo_console)?;
    log.config_echo(&cfg.to_yaml());
    // config warnings stay out of the run log: the echoed config no longer carries
    // the offending keys, and a re-run from the echo must log identically
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    match opts.device.as_str() {
        "auto" | "cpu" => log.notice("device: cpu"),
        other => log.warning(&format!("device '{other}' is not available; using cpu")),
    }

    let mut datasets = BTreeMap::new();
    let mut pipelines = BTreeMap::new();
    for (id, d) in &cfg.datasets {
        datasets.insert(id.clone(), registry.dataset(&d.type_name, &d.params)?);
        let steps =
            d.transforms.iter().map(|t| registry.transform(&t.type_name, &t.params)).collect::<Result<Vec<_>>>()?;
        pipelines.insert(id.clone(), Pipeline::new(steps));
    }
    let res = Resources { cfg, registry, opts, datasets, pipelines };

    let mut t_rng = StdRng::seed_from_u64(derive_seed(opts.seed, &[1]));
    let mut s_rng = StdRng::seed_from_u64(derive_seed(opts.seed, &[2]));
    let teacher = registry.model(&cfg.teacher.name, &cfg.teacher.params, &mut t_rng)?;
    let student = registry.model(&cfg.student.name, &cfg.student.params, &mut s_rng)?;

    if let Some(ck) = &cfg.teacher.ckpt {
        let path = res.path(ck);
        if path.is_file() {
            load_ckpt(teacher.as_ref(), &path)?;
            log.notice(&format!("teacher weights loaded from {ck}"));
        } else if cfg.teacher.params.get_or("pretrained", false)? {
            log.warning(&format!("teacher checkpoint {ck} not found; using pretrained weights"));
        } else {
            return Err(Error::FileNotFound(path));
        }
    }

    let mut report = ExperimentReport { seed: opts.seed, ..Default::default() };
    let test_loader = match &cfg.test {
        Some(t) => Some(res.loader(&t.loader, derive_seed(opts.seed, &[0x7e57]), false)?),
        None => None,
    };
    let metric = cfg.test.as_ref().and_then(|t| t.metrics.first().cloned()).unwrap_or_else(|| "top1".into());

    if opts.test_only {
        let ck = cfg
            .student
            .ckpt
            .as_ref()
            .ok_or_else(|| Error::PreconditionViolation("test_only needs models.student_model.ckpt".into()))?;
        load_ckpt(student.as_ref(), &res.path(ck))?;
        let loader =
            test_loader.ok_or_else(|| Error::PreconditionViolation("test_only needs a test section".into()))?;
        let m = evaluate(student.as_ref(), &loader)?;
        log.line(&format!("test| top1={:?} top5={:?}", m.top1, m.top5));
        report.test = Some(m);
        report.log = log.lines().to_vec();
        write_report(&report, opts)?;
        return Ok(report);
    }

    if let Some(p) = &opts.resume_ckpt {
        load_ckpt(student.as_ref(), p)?;
        log.notice(&format!("student weights resumed from {}", p.display()));
    }

    let ckpt = cfg.student.ckpt.as_ref().map(|c| res.path(c));
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    let mut stores = (AuxStore::new(), AuxStore::new());
    for (k, stage) in cfg.stages.iter().enumerate() {
        let stage_no = k + 1;
        run_stage(
            &res,
            stage_no,
            stage,
            (&teacher, &student),
            &mut stores,
            &mut log,
            &mut report,
            &mut best,
            &metric,
            ckpt.as_deref(),
            observer,
        )?;
    }

    if let Some(p) = &ckpt {
        save_ckpt(student.as_ref(), &last_ckpt_path(p))?;
    }
    if let Some((v, state)) = &best {
        report.best_val = Some(*v).filter(|v| !v.is_nan());
        load_state(student.as_ref(), state)?;
    }
    if let Some(loader) = &test_loader {
        let m = evaluate(student.as_ref(), loader)?;
        log.line(&format!("test| top1={:?} top5={:?}", m.top1, m.top5));
        report.test = Some(m);
    }
    report.log = log.lines().to_vec();
    write_report(&report, opts)?;
    Ok(report)
}

fn write_report(report: &ExperimentReport, opts: &RunOptions) -> Result<()> {
    if let Some(p) = &opts.report_path {
        let bytes = serde_json::to_vec_pretty(report).map_err(|e| Error::Other(e.to_string()))?;
        crate::serialize::write_atomic(p, &bytes)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    res: &Resources,
    stage_no: usize,
    stage: &StageConfig,
    (teacher_base, student_base): (&Arc<dyn Module>, &Arc<dyn Module>),
    stores: &mut (AuxStore, AuxStore),
    log: &mut RunLog,
    report: &mut ExperimentReport,
    best: &mut Option<(f64, BTreeMap<String, Tensor>)>,
    metric: &str,
    ckpt: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<()> {
    let (cfg, registry, opts) = (res.cfg, res.registry, res.opts);
    let mut aux_rng = StdRng::seed_from_u64(derive_seed(opts.seed, &[3, stage_no as u64]));
    let base_dir = Some(opts.base_dir.as_path());
    let t_model = assemble_model(teacher_base, &stage.teacher, registry, &mut stores.0, &mut aux_rng, base_dir)?;
    let s_model = assemble_model(student_base, &stage.student, registry, &mut stores.1, &mut aux_rng, base_dir)?;
    for (role, setup) in [("teacher", &stage.teacher), ("student", &stage.student)] {
        if let Some(w) = setup.wrapper.as_deref().filter(|w| *w != "none") {
            if let Component::Wrapper(wr) = registry.wrapper(w, &Default::default())? {
                if let Some(n) = wr.notice() {
                    log.notice(&format!("stage {stage_no} {role}: {n}"));
                }
            }
        }
    }

    let t_net = Network::new(t_model.clone());
    t_net.attach(&crate::config::effective_hooks(&cfg.teacher, &stage.teacher))?;
    let t_trainable = !trainable_params(t_model.as_ref()).is_empty();
    t_net.set_detach_captures(!t_trainable);
    let s_net = Network::new(s_model.clone());
    s_net.attach(&crate::config::effective_hooks(&cfg.student, &stage.student))?;

    let loss = build_loss(stage, registry)?;
    let reads_t = loss.reads(Role::Teacher);
    let reads_s = loss.reads(Role::Student);

    let mut seen = HashSet::new();
    let params: Vec<_> = trainable_params(s_model.as_ref())
        .into_iter()
        .chain(trainable_params(t_model.as_ref()))
        .filter(|p| seen.insert(p.id()))
        .collect();
    let builder = registry.optimizer(&stage.optimizer.type_name, &stage.optimizer.params)?;
    let base_lr = builder.base_lr();
    let mut optimizer = builder.build(params);
    let scheduler = match &stage.scheduler {
        Some(s) => Some(registry.scheduler(&s.type_name, &s.params)?),
        None => None,
    };
    let lr_at = |epoch0: usize, step: usize| scheduler.as_ref().map_or(base_lr, |s| s.lr_at(base_lr, epoch0, step));

    let loader_seed = derive_seed(opts.seed, &[stage_no as u64]);
    let use_cache = reads_t && !t_trainable && stage.train_loader.cache_output.is_some();
    let train_loader = res.loader(&stage.train_loader, loader_seed, use_cache)?;
    let val_loader = match &stage.val_loader {
        Some(v) => Some(res.loader(v, loader_seed, false)?),
        None => None,
    };
    let mut cache = match (&stage.train_loader.cache_output, use_cache) {
        (Some(dir), true) => {
            let fp = cache_fingerprint(cfg, stage, t_model.as_ref(), train_loader.dataset());
            Some(CacheStore::open(res.path(dir), &fp, train_loader.dataset().len())?)
        }
        _ => None,
    };

    let models = StageModels { teacher_base, student_base, teacher: &t_net, student: &s_net };
    observer.on_stage_start(stage_no, &models);

    let mut step = 0usize;
    for epoch in 1..=stage.num_epochs {
        optimizer.set_lr(lr_at(epoch - 1, step));
        let t_forwards0 = t_net.forward_count();
        let t_calls0 = t_net.module_calls();
        let s_calls0 = s_net.module_calls();
        let (mut t_secs, mut s_secs, mut d_secs) = (0.0, 0.0, 0.0);
        let mut hits = 0usize;
        let mut losses = Vec::with_capacity(train_loader.num_batches());
        let epoch_start = Instant::now();
        for indices in train_loader.batches(epoch) {
            let t0 = Instant::now();
            let batch = train_loader.load(&indices, epoch)?;
            d_secs += t0.elapsed().as_secs_f64();
            let fail = |e: Error| Error::InStage { stage: stage_no, epoch, step: step + 1, source: Box::new(e) };

            let t0 = Instant::now();
            let mut t_out: Option<(Tensor, IoDictionary)> = None;
            if let Some(store) = &cache {
                if epoch > 1 || store.is_complete() {
                    match store.get_batch(&batch.indices) {
                        Ok(rows) => {
                            t_out = Some(uncache_rows(rows).map_err(fail)?);
                            hits += batch.len();
                        }
                        Err(Error::CacheMiss(_)) => {}
                        Err(e) => return Err(fail(e)),
                    }
                }
            }
            if t_out.is_none() && reads_t {
                let y = if t_trainable {
                    t_net.forward(&batch.input, true)
                } else {
                    no_grad(|| t_net.forward(&batch.input, false))
                }
                .map_err(fail)?;
                let io = t_net.io();
                if let Some(store) = &cache {
                    for (i, row) in cache_rows(&y, &io, batch.len()).map_err(fail)?.into_iter().enumerate() {
                        store.put(batch.indices[i], &row).map_err(fail)?;
                    }
                }
                t_out = Some((y, io));
            }
            t_secs += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let s_out = if reads_s { Some(s_net.forward(&batch.input, true).map_err(fail)?) } else { None };
            let s_io = if reads_s { s_net.io() } else { IoDictionary::default() };
            let empty = IoDictionary::default();
            let t_view = NetView { io: t_out.as_ref().map_or(&empty, |t| &t.1), output: t_out.as_ref().map(|t| &t.0) };
            let s_view = NetView { io: &s_io, output: s_out.as_ref() };
            let value = match loss.compute(&s_view, &t_view, &batch.targets) {
                Ok(v) => v,
                Err(e) => {
                    if let Error::NonFiniteLoss { term, values } = &e {
                        let dump = values.iter().map(|(k, v)| format!("{k}={v:?}")).collect::<Vec<_>>().join(" ");
                        log.line(&format!(
                            "abort| stage={stage_no} epoch={epoch} step={} non-finite term '{term}': {dump}",
                            step + 1
                        ));
                    }
                    return Err(fail(e));
                }
            };
            let total = value.total.to_scalar().map_err(|e| fail(e.into()))?;
            if value.total.requires_grad() {
                let grads = value.total.backward().map_err(|e| fail(e.into()))?;
                optimizer.step(&grads).map_err(fail)?;
            }
            s_secs += t0.elapsed().as_secs_f64();
            step += 1;
            losses.push(total);
            if scheduler.as_ref().is_some_and(|s| s.per_step()) {
                optimizer.set_lr(lr_at(epoch - 1, step));
            }
            if step % stage.log_freq == 0 {
                log.record(&LogRecord {
                    stage: stage_no,
                    epoch,
                    step,
                    loss: total,
                    lr: optimizer.lr(),
                    val_top1: None,
                });
            }
        }
        let seconds = epoch_start.elapsed().as_secs_f64();
        if let Some(store) = &mut cache {
            // not in the run log: a warm cache must not change it
            if !store.is_complete() && store.finalize()? {
                log::info!("stage {stage_no}: teacher outputs cached at {}", store.root().display());
            }
        }

        let val = match &val_loader {
            Some(l) => Some(evaluate(student_base.as_ref(), l)?),
            None => None,
        };
        let mean_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        log.record(&LogRecord {
            stage: stage_no,
            epoch,
            step,
            loss: mean_loss,
            lr: optimizer.lr(),
            val_top1: val.map(|m| m.top1),
        });
        let score = val.map(|m| m.get(metric));
        let improved = match (score, &best) {
            (Some(s), Some((b, _))) => s > *b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            *best = Some((score.unwrap_or(f64::NAN), snapshot(student_base.as_ref())));
            if let Some(p) = ckpt {
                save_ckpt(student_base.as_ref(), p)?;
            }
            if let Some(s) = score {
                log.notice(&format!("stage {stage_no} epoch {epoch}: new best {metric}={s:?}"));
            }
        }
        report.epochs.push(EpochReport {
            stage: stage_no,
            epoch,
            lr: optimizer.lr(),
            mean_loss,
            batch_losses: losses,
            val,
            seconds,
            teacher_seconds: t_secs,
            student_seconds: s_secs,
            data_seconds: d_secs,
            teacher_forwards: t_net.forward_count() - t_forwards0,
            cache_hits: hits,
            teacher_module_calls: t_net.module_calls() - t_calls0,
            student_module_calls: s_net.module_calls() - s_calls0,
        });
    }
    observer.on_stage_end(stage_no, &models);
    Ok(())
}
