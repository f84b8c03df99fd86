use std::path::PathBuf;

use distill_core::config::{
    build_experiment, emit, join_tag, load_experiment, parse_config, read_experiment, resolve_stage, resolve_stages,
    ComponentSpec, CriterionSpec, LoaderSpec, ModelSetup, RawStage, TermSpec,
};
use distill_core::error::Error;
use distill_core::params::Params;
use distill_core::registry::Registry;
use proptest::prelude::*;
use serde_yaml::Value;

fn repo_file(rel: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn fixture(name: &str) -> String {
    repo_file(&format!("crates/core/tests/fixtures/{name}"))
}

fn issues(e: Error) -> Vec<String> {
    match e {
        Error::Validation(v) => v.into_iter().map(|i| i.to_string()).collect(),
        other => panic!("expected a validation error, got {other}"),
    }
}

#[test]
fn imagenet_kd_layout_reads() {
    let tree = parse_config(&fixture("imagenet_kd.yaml")).unwrap();
    let cfg = read_experiment(&tree).unwrap();
    assert_eq!(cfg.num_stages(), 1);
    let s = &cfg.stages[0];
    assert_eq!(s.num_epochs, 100);
    assert_eq!(s.log_freq, 1000);
    assert_eq!(s.criterion.type_name, "GeneralizedCustomLoss");
    let org = s.criterion.org_term.as_ref().unwrap();
    assert_eq!(org.criterion.type_name, "KDLoss");
    assert_eq!(org.criterion.params.get::<f64>("temperature").unwrap(), Some(1.0));
    assert_eq!(org.criterion.params.get::<f64>("alpha").unwrap(), Some(0.5));
    assert!(s.criterion.sub_terms.is_empty());
    assert_eq!(s.scheduler.as_ref().unwrap().params.get::<Vec<usize>>("milestones").unwrap(), Some(vec![30, 60, 90]));
    assert_eq!(s.train_loader.dataset_id, "ilsvrc2012/train");
    assert!(s.train_loader.shuffle);
    assert_eq!(s.train_loader.cache_output, None);
    assert_eq!(s.val_loader.as_ref().unwrap().dataset_id, "ilsvrc2012/val");
    assert!(!s.teacher.requires_grad);
    assert!(s.student.requires_grad);
    assert_eq!(s.student.wrapper.as_deref(), Some("DistributedDataParallel"));

    for split in ["train", "val"] {
        let d = &cfg.datasets[&format!("ilsvrc2012/{split}")];
        assert_eq!(d.type_name, "ImageFolder");
        assert_eq!(d.params.get::<String>("root").unwrap().unwrap(), format!("~/dataset/ilsvrc2012/{split}"));
        assert_eq!(d.transforms.len(), 4);
        let last = d.transforms.last().unwrap();
        assert_eq!(last.type_name, "Normalize");
        assert_eq!(last.params.get::<Vec<f64>>("mean").unwrap(), Some(vec![0.485, 0.456, 0.406]));
        assert_eq!(last.params.get::<Vec<f64>>("std").unwrap(), Some(vec![0.229, 0.224, 0.225]));
    }
    let test = cfg.test.as_ref().unwrap();
    assert_eq!(test.loader.batch_size, 1);
    assert_eq!(test.metrics, vec!["top1"]);
}

#[test]
fn imagenet_kd_against_zoo_registry_collects_every_problem() {
    let tree = parse_config(&fixture("imagenet_kd.yaml")).unwrap();
    let msgs = issues(build_experiment(&tree, &Registry::with_builtins()).unwrap_err());
    let all = msgs.join("\n");
    for needle in ["ImageFolder", "resnet34", "resnet18"] {
        assert!(all.contains(needle), "{needle} not reported in:\n{all}");
    }
}

#[test]
fn join_examples() {
    let s = |x: &str| Value::String(x.into());
    assert_eq!(join_tag(&[s("./"), s("resnet34"), s(".pt")]).unwrap(), "./resnet34.pt");
    assert_eq!(join_tag(&[]).unwrap(), "");
    assert_eq!(join_tag(&[s("ilsvrc2012"), s("/train")]).unwrap(), "ilsvrc2012/train");
    assert_eq!(join_tag(&[s("lr"), Value::from(0.1), s("-"), Value::from(3)]).unwrap(), "lr0.1-3");
    assert!(matches!(join_tag(&[s("a"), Value::Sequence(vec![])]), Err(Error::TypeErrorJoin { index: 1, .. })));

    let tree =
        parse_config("teacher: &teacher 'resnet34'\nckpt: !join ['./', *teacher, '.pt']\nabc: !join ['a', 'b', 'c']\n")
            .unwrap();
    assert_eq!(tree["ckpt"], s("./resnet34.pt"));
    assert_eq!(tree["abc"], s("abc"));
}

#[test]
fn anchorless_documents_parse_like_plain_yaml() {
    let text = "a: 1\nb: [x, y, {c: null}]\nd: {e: 2.5, f: 'g'}\n";
    let plain: Value = serde_yaml::from_str(text).unwrap();
    assert_eq!(parse_config(text).unwrap(), plain);
}

#[test]
fn parse_errors() {
    match parse_config("a: *missing\n") {
        Err(Error::UnresolvedAlias { anchor }) => assert_eq!(anchor, "missing"),
        other => panic!("{other:?}"),
    }
    match parse_config("a: 1\nb: [2, 3\n") {
        Err(Error::Syntax { line, .. }) => assert!(line >= 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config("a: !env HOME\n"), Err(Error::UnknownTag(_))));
}

#[test]
fn aliased_values_are_independent_copies() {
    let mut tree = parse_config("a: &x {k: 1}\nb: *x\n").unwrap();
    tree["a"]["k"] = Value::from(2);
    assert_eq!(tree["b"]["k"], Value::from(1));
}

fn shipped(name: &str) -> String {
    repo_file(&format!("configs/synthetic/{name}.yaml"))
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    let reg = Registry::with_builtins();
    for name in ["teacher", "baseline", "kd", "at", "fitnet", "ft"] {
        let text = shipped(name);
        let cfg = load_experiment(&text, &reg).unwrap_or_else(|e| panic!("{name}: {e}"));
        let echo = cfg.to_yaml();
        let again = load_experiment(&echo, &reg).unwrap_or_else(|e| panic!("{name} echo: {e}"));
        assert_eq!(again.stages, cfg.stages, "{name}");
        assert_eq!(again.datasets, cfg.datasets, "{name}");
        assert_eq!(again.teacher, cfg.teacher, "{name}");
        assert_eq!(again.student, cfg.student, "{name}");
        assert_eq!(again.test, cfg.test, "{name}");
        assert_eq!(again.to_yaml(), echo, "{name}: canonical form is not a fixed point");

        let twice = build_experiment(&parse_config(&emit(&parse_config(&text).unwrap())).unwrap(), &reg).unwrap();
        assert_eq!(twice, cfg, "{name}");
    }
}

#[test]
fn kd_config_has_the_reference_shape() {
    let cfg = load_experiment(&shipped("kd"), &Registry::with_builtins()).unwrap();
    assert_eq!(cfg.num_stages(), 1);
    let org = cfg.stages[0].criterion.org_term.as_ref().unwrap();
    assert_eq!(org.criterion.type_name, "KDLoss");
    assert_eq!(cfg.stages[0].student.wrapper.as_deref(), Some("DistributedDataParallel"));
    assert!(cfg.warnings.iter().any(|w| w.contains("adaptations")), "{:?}", cfg.warnings);
}

#[test]
fn fitnet_stages_differ_where_expected() {
    let cfg = load_experiment(&shipped("fitnet"), &Registry::with_builtins()).unwrap();
    assert_eq!(cfg.num_stages(), 2);
    let (a, b) = (&cfg.stages[0], &cfg.stages[1]);
    assert_ne!(a.criterion, b.criterion);
    assert!(!a.student.sequential.is_empty() && b.student.sequential.is_empty());
    assert!(!a.teacher.sequential.is_empty() && b.teacher.sequential.is_empty());
    assert!(a.student.special.is_some() && b.student.special.is_none());
    assert_eq!(a.optimizer.type_name, b.optimizer.type_name);
    assert_eq!(a.train_loader, b.train_loader);
}

const SMALL: &str = r#"
datasets:
  synthetic:
    name: &name 'synthetic'
    type: 'SyntheticImages'
    params: {image_size: 8, n_train: 64, n_val: 32, n_test: 32}
    splits:
      train:
        dataset_id: &train !join [*name, '/train']
        params: {split: 'train', transform_params: [{type: 'ToTensor'}]}
      val:
        dataset_id: &val !join [*name, '/val']
        params: {split: 'val', transform_params: [{type: 'ToTensor'}]}
models:
  teacher_model:
    name: 'tinyresnet_d1'
    params: {width: 4, image_size: 8}
  student_model:
    name: 'tinyresnet_d1'
    params: {width: 4, image_size: 8}
train:
  stage1:
    num_epochs: 2
    train_data_loader: {dataset_id: *train, batch_size: 16, random_sample: True}
    val_data_loader: {dataset_id: *val, batch_size: 16}
    optimizer: {type: 'SGD', params: {lr: 0.1, momentum: 0.9}}
    scheduler: {type: 'MultiStepLR', params: {milestones: [1]}}
    criterion:
      org_term:
        criterion: {type: 'CrossEntropyLoss'}
  stage2:
    criterion:
      org_term:
        criterion: {type: 'KDLoss', params: {temperature: 4.0}}
  stage3:
    num_epochs: 1
    val_data_loader: null
    scheduler: null
test:
  test_data_loader: {dataset_id: *val, batch_size: 16}
"#;

#[test]
fn stage_inheritance() {
    let cfg = load_experiment(SMALL, &Registry::with_builtins()).unwrap();
    let [s1, s2, s3] = [&cfg.stages[0], &cfg.stages[1], &cfg.stages[2]];
    assert_eq!(s2.optimizer, s1.optimizer);
    assert_eq!(s2.train_loader, s1.train_loader);
    assert_eq!(s2.val_loader, s1.val_loader);
    assert_eq!(s2.scheduler, s1.scheduler);
    assert_eq!(s2.num_epochs, 2);
    assert_ne!(s2.criterion, s1.criterion);
    assert_eq!(s3.criterion, s2.criterion);
    assert_eq!(s3.num_epochs, 1);
    assert_eq!(s3.val_loader, None);
    assert_eq!(s3.scheduler, None);
}

#[test]
fn broken_config_lists_every_problem() {
    let text = SMALL
        .replace(
            "dataset_id: *val, batch_size: 16}\n    optimizer",
            "dataset_id: 'nope/train', batch_size: 16}\n    optimizer",
        )
        .replacen("name: 'tinyresnet_d1'", "name: 'resnet_tiny_typo'", 1)
        .replace("type: 'SGD'", "type: 'SDG'");
    let msgs = issues(load_experiment(&text, &Registry::with_builtins()).unwrap_err());
    let all = msgs.join("\n");
    assert!(all.contains("nope/train"), "{all}");
    assert!(all.contains("resnet_tiny_typo") && all.contains("'resnet_tiny'"), "{all}");
    assert!(all.contains("SDG") && all.contains("'SGD'"), "{all}");
}

#[test]
fn unknown_hook_path_is_a_validation_error() {
    let text = SMALL.replace(
        "params: {width: 4, image_size: 8}\n  student_model",
        "params: {width: 4, image_size: 8}\n    forward_hook: {output: ['layer9']}\n  student_model",
    );
    let all = issues(load_experiment(&text, &Registry::with_builtins()).unwrap_err()).join("\n");
    assert!(all.contains("layer9"), "{all}");
}

#[test]
fn empty_validation_split_is_rejected_at_build() {
    let text = SMALL.replace("n_val: 32", "n_val: 0");
    let all = issues(load_experiment(&text, &Registry::with_builtins()).unwrap_err()).join("\n");
    assert!(all.contains("synthetic/val"), "{all}");
}

#[test]
fn unknown_keys_warn() {
    let text = format!("{SMALL}\nextra_section: 1\n").replace("num_epochs: 2", "num_epochs: 2\n    mystery: true");
    let cfg = load_experiment(&text, &Registry::with_builtins()).unwrap();
    assert!(cfg.warnings.iter().any(|w| w.contains("extra_section")));
    assert!(cfg.warnings.iter().any(|w| w.contains("train.stage1.mystery")));
}

#[test]
fn first_stage_must_be_complete() {
    let text = SMALL.replace("    optimizer: {type: 'SGD', params: {lr: 0.1, momentum: 0.9}}\n", "");
    let all = issues(load_experiment(&text, &Registry::with_builtins()).unwrap_err()).join("\n");
    assert!(all.contains("optimizer"), "{all}");
    assert!(matches!(resolve_stage(&[RawStage::default()], 0, None), Err(Error::IncompleteStage { stage: 1, .. })));
}

fn comp(name: &str, v: i64) -> ComponentSpec {
    ComponentSpec::new(name, Params::new().with("v", v))
}

fn loader(id: u8) -> LoaderSpec {
    LoaderSpec {
        dataset_id: format!("d{id}"),
        batch_size: 1 + id as usize,
        shuffle: false,
        num_workers: 0,
        cache_output: None,
        attach_index: false,
        providers: vec![],
    }
}

fn crit(v: i64) -> CriterionSpec {
    CriterionSpec {
        type_name: "GeneralizedCustomLoss".into(),
        org_term: Some(TermSpec { criterion: comp("CrossEntropyLoss", v), factor: 1.0, student: None, teacher: None }),
        sub_terms: vec![],
    }
}

fn raw_stage() -> impl Strategy<Value = RawStage> {
    (
        prop::option::of(1usize..5),
        prop::option::of(1usize..50),
        prop::option::of(0u8..3),
        prop::option::of(prop::option::of(0u8..3)),
        prop::option::of(any::<bool>()),
        prop::option::of(0i64..3),
        prop::option::of(prop::option::of(0i64..3)),
        prop::option::of(0i64..3),
    )
        .prop_map(|(e, lf, tl, vl, rg, opt, sch, cr)| RawStage {
            num_epochs: e,
            log_freq: lf,
            train_loader: tl.map(loader),
            val_loader: vl.map(|v| v.map(loader)),
            teacher: None,
            student: rg.map(|g| ModelSetup { requires_grad: g, ..resolve_student_default() }),
            optimizer: opt.map(|v| comp("SGD", v)),
            scheduler: sch.map(|s| s.map(|v| comp("StepLR", v))),
            criterion: cr.map(crit),
        })
}

fn resolve_student_default() -> ModelSetup {
    let full = RawStage {
        num_epochs: Some(1),
        train_loader: Some(loader(0)),
        optimizer: Some(comp("SGD", 0)),
        criterion: Some(crit(0)),
        ..Default::default()
    };
    resolve_stage(&[full], 0, None).unwrap().student
}

fn complete_first() -> RawStage {
    RawStage {
        num_epochs: Some(3),
        train_loader: Some(loader(0)),
        optimizer: Some(comp("SGD", 9)),
        criterion: Some(crit(9)),
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn every_field_comes_from_the_latest_stage_that_sets_it(rest in prop::collection::vec(raw_stage(), 0..5)) {
        let mut raw = vec![complete_first()];
        raw.extend(rest);
        let resolved = resolve_stages(&raw).unwrap();
        for k in 0..raw.len() {
            let latest = |f: &dyn Fn(&RawStage) -> bool| (0..=k).rev().find(|&j| f(&raw[j]));
            let s = &resolved[k];
            let j = latest(&|r| r.num_epochs.is_some()).unwrap();
            prop_assert_eq!(s.num_epochs, raw[j].num_epochs.unwrap());
            let j = latest(&|r| r.optimizer.is_some()).unwrap();
            prop_assert_eq!(&s.optimizer, raw[j].optimizer.as_ref().unwrap());
            let j = latest(&|r| r.criterion.is_some()).unwrap();
            prop_assert_eq!(&s.criterion, raw[j].criterion.as_ref().unwrap());
            let j = latest(&|r| r.train_loader.is_some()).unwrap();
            prop_assert_eq!(&s.train_loader, raw[j].train_loader.as_ref().unwrap());
            match latest(&|r| r.val_loader.is_some()) {
                Some(j) => prop_assert_eq!(&s.val_loader, raw[j].val_loader.as_ref().unwrap()),
                None => prop_assert_eq!(&s.val_loader, &None),
            }
            match latest(&|r| r.scheduler.is_some()) {
                Some(j) => prop_assert_eq!(&s.scheduler, raw[j].scheduler.as_ref().unwrap()),
                None => prop_assert_eq!(&s.scheduler, &None),
            }
            match latest(&|r| r.log_freq.is_some()) {
                Some(j) => prop_assert_eq!(s.log_freq, raw[j].log_freq.unwrap()),
                None => prop_assert_eq!(s.log_freq, distill_core::config::DEFAULT_LOG_FREQ),
            }
            match latest(&|r| r.student.is_some()) {
                Some(j) => prop_assert_eq!(&s.student, raw[j].student.as_ref().unwrap()),
                None => prop_assert_eq!(&s.student, &resolve_student_default()),
            }
        }
    }
}
