use std::sync::Arc;

use distill_core::error::{Error, Side};
use distill_core::hooks::{CaptureKind, HookSpec, Network};
use distill_core::losses::hint_loss;
use distill_core::nn::{named_parameters, num_parameters, Module};
use distill_core::optim::{OptimizerBuilder, SgdConfig};
use distill_core::params::Params;
use distill_core::tensor::{DType, Tensor};
use distill_core::toolkit::{
    freeze, load_ckpt, redesign, save_ckpt, trainable_params, AuxSpec, ConvRegressor, Paraphraser, RedesignSpec,
    SpecialModule,
};
use distill_core::zoo::tinyresnet;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn net(depth: usize, width: usize, classes: usize, seed: u64) -> Arc<dyn Module> {
    let p = Params::new().with("width", width).with("image_size", 8).with("num_classes", classes);
    Arc::new(tinyresnet(&p, Some(depth), &mut StdRng::seed_from_u64(seed)).unwrap())
}

fn batch(seed: u64) -> Tensor {
    Tensor::randn(vec![4, 3, 8, 8], 1.0, DType::F32, &mut StdRng::seed_from_u64(seed))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn hint_prefix() -> Vec<String> {
    strings(&["conv1", "bn1", "relu", "layer1", "layer2"])
}

fn aux(name: &str, type_name: &str, path: &str) -> AuxSpec {
    AuxSpec {
        name: name.into(),
        type_name: type_name.into(),
        params: Params::new(),
        path: path.into(),
        io: Side::Output,
        trainable: true,
        ckpt: None,
    }
}

#[test]
fn freezing() {
    let teacher = net(2, 8, 10, 0);
    freeze(&teacher, &[], false).unwrap();
    assert!(trainable_params(teacher.as_ref()).is_empty());

    let student = net(1, 4, 10, 1);
    freeze(&student, &strings(&["fc"]), true).unwrap();
    for (name, p) in named_parameters(student.as_ref()) {
        assert_eq!(p.is_trainable(), !name.starts_with("fc."), "{name}");
    }
    assert!(matches!(freeze(&student, &strings(&["fcc"]), true), Err(Error::UnknownModulePath { .. })));
}

#[test]
fn optimizer_step_skips_frozen_parameters() {
    let student = net(1, 4, 10, 2);
    freeze(&student, &strings(&["layer1"]), true).unwrap();
    let before: Vec<(String, Tensor)> =
        named_parameters(student.as_ref()).into_iter().map(|(n, p)| (n, p.value())).collect();
    let mut opt =
        SgdConfig::from_params(&Params::new().with("lr", 0.1)).unwrap().build(trainable_params(student.as_ref()));
    let y = Network::new(student.clone()).forward(&batch(3), true).unwrap();
    let loss = y.sqr().mean_all();
    opt.step(&loss.backward().unwrap()).unwrap();
    let after = named_parameters(student.as_ref());
    for ((name, old), (_, p)) in before.iter().zip(&after) {
        let moved = p.value().max_abs_diff(old).unwrap();
        if name.starts_with("layer1.") {
            assert_eq!(moved, 0.0, "{name}");
        }
    }
    let fc = after.iter().find(|(n, _)| n == "fc.weight").unwrap();
    let old = &before.iter().find(|(n, _)| n == "fc.weight").unwrap().1;
    assert!(fc.1.value().max_abs_diff(old).unwrap() > 0.0);
}

#[test]
fn empty_redesign_does_no_work() {
    let m = redesign(&net(2, 4, 10, 4), &RedesignSpec::from_list(&strings(&["empty"]))).unwrap();
    let n = Network::new(m);
    n.forward(&batch(5), false).unwrap();
    assert_eq!(n.module_calls(), 0);
    assert_eq!(RedesignSpec::from_list(&[]), RedesignSpec::Keep);
}

#[test]
fn pruned_captures_match_at_retained_sites() {
    let full = net(3, 8, 10, 6);
    let pruned = redesign(&full, &RedesignSpec::from_list(&hint_prefix())).unwrap();
    let x = batch(7);
    let hooks = [HookSpec::new("layer1", CaptureKind::Output), HookSpec::new("layer2", CaptureKind::Output)];
    let a = Network::new(full.clone());
    let b = Network::new(pruned);
    a.attach(&hooks).unwrap();
    b.attach(&hooks).unwrap();
    a.forward(&x, false).unwrap();
    let out = b.forward(&x, false).unwrap();
    for path in ["layer1", "layer2"] {
        let want = a.io().get(path, Side::Output).unwrap();
        assert!(b.io().get(path, Side::Output).unwrap().bit_eq(&want), "{path}");
    }
    assert!(out.bit_eq(&a.io().get("layer2", Side::Output).unwrap()));
    assert!(b.module_calls() < a.module_calls());
}

#[test]
fn pruned_training_updates_the_shared_model() {
    let full = net(2, 4, 10, 8);
    let pruned = redesign(&full, &RedesignSpec::from_list(&hint_prefix())).unwrap();
    let mut opt =
        SgdConfig::from_params(&Params::new().with("lr", 0.5)).unwrap().build(trainable_params(pruned.as_ref()));
    let before =
        named_parameters(full.as_ref()).into_iter().find(|(n, _)| n == "layer2.0.conv1.weight").unwrap().1.value();
    let h = Network::new(pruned.clone()).forward(&batch(9), true).unwrap();
    let loss = hint_loss(&h, &Tensor::zeros(h.shape().to_vec(), DType::F32)).unwrap();
    opt.step(&loss.backward().unwrap()).unwrap();

    // the pruned view holds the same parameters; reverting loses nothing
    let trained: Vec<(String, Tensor)> =
        named_parameters(pruned.as_ref()).into_iter().map(|(n, p)| (n, p.value())).collect();
    let base = named_parameters(full.as_ref());
    for (name, t) in &trained {
        let p = &base.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(p.value().max_abs_diff(t).unwrap(), 0.0, "{name}");
    }
    let after = &base.iter().find(|(n, _)| n == "layer2.0.conv1.weight").unwrap().1;
    assert!(after.value().max_abs_diff(&before).unwrap() > 0.0);
}

#[test]
fn incompatible_redesign_is_rejected() {
    let m = net(2, 4, 10, 10);
    match redesign(&m, &RedesignSpec::from_list(&strings(&["conv1", "fc"]))) {
        Err(Error::ShapeMismatch { context, .. }) => assert!(context.contains("fc"), "{context}"),
        other => panic!("{:?}", other.err()),
    }
    assert!(matches!(
        redesign(&m, &RedesignSpec::from_list(&strings(&["conv1", "layer9"]))),
        Err(Error::UnknownModulePath { .. })
    ));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let a = net(2, 4, 10, 11);
    save_ckpt(a.as_ref(), &path).unwrap();
    let b = net(2, 4, 10, 12);
    load_ckpt(b.as_ref(), &path).unwrap();
    let x = batch(13);
    let ya = Network::new(a).forward(&x, false).unwrap();
    let yb = Network::new(b).forward(&x, false).unwrap();
    assert_eq!(ya.max_abs_diff(&yb).unwrap(), 0.0);

    let wide = net(2, 4, 100, 14);
    match load_ckpt(wide.as_ref(), &path) {
        Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains("fc.weight"), "{msg}"),
        other => panic!("{:?}", other.err()),
    }
    assert!(load_ckpt(wide.as_ref(), &dir.path().join("absent.ckpt")).is_err());
}

#[test]
fn regressor_output_is_recorded() {
    let student = redesign(&net(1, 4, 10, 15), &RedesignSpec::from_list(&hint_prefix())).unwrap();
    let p = Params::new().with("in_channels", 8).with("out_channels", 32).with("kernel_size", 3);
    let reg = Arc::new(ConvRegressor::from_params(&p, &mut StdRng::seed_from_u64(16)).unwrap());
    let special: Arc<dyn Module> =
        Arc::new(SpecialModule::new(student, vec![(aux("regressor", "ConvRegressor", "layer2"), reg)]).unwrap());
    let n = Network::new(special);
    n.attach(&[HookSpec::new("layer2", CaptureKind::Output)]).unwrap();
    let y = n.forward(&batch(17), true).unwrap();
    let io = n.io();
    let r = io.get("regressor", Side::Output).unwrap();
    assert_eq!(r.shape(), &[4, 32, 4, 4]);
    assert!(y.bit_eq(&io.get("layer2", Side::Output).unwrap()));
    assert!(r.requires_grad());
}

#[test]
fn paraphraser_on_a_frozen_teacher() {
    let teacher = net(3, 16, 10, 18);
    freeze(&teacher, &[], false).unwrap();
    let p = Params::new().with("in_channels", 64).with("rate", 0.5);
    let para = Arc::new(Paraphraser::from_params(&p, &mut StdRng::seed_from_u64(19)).unwrap());
    let special = Arc::new(
        SpecialModule::new(teacher.clone(), vec![(aux("paraphraser", "Paraphraser", "layer3"), para)]).unwrap(),
    );
    assert!(special.auxiliary("paraphraser").is_some());
    let as_module: Arc<dyn Module> = special.clone();
    assert!(!trainable_params(as_module.as_ref()).is_empty());
    assert!(trainable_params(special.base().as_ref()).is_empty());

    let n = Network::new(as_module);
    n.attach(&[HookSpec::new("layer3", CaptureKind::Output)]).unwrap();
    n.forward(&batch(20), true).unwrap();
    let io = n.io();
    let feat = io.get("layer3", Side::Output).unwrap();
    assert_eq!(io.get("paraphraser", Side::Output).unwrap().shape(), feat.shape());

    // a frozen base keeps running with fixed statistics even in a training pass
    let want = Network::new(teacher).forward(&batch(20), false).unwrap();
    let n2 = Network::new(special as Arc<dyn Module>);
    n2.attach(&[HookSpec::new("layer3", CaptureKind::Output)]).unwrap();
    assert!(n2.forward(&batch(20), true).unwrap().bit_eq(&want));
}

#[test]
fn no_auxiliaries_behaves_like_the_base() {
    let base = net(2, 4, 10, 21);
    let special: Arc<dyn Module> = Arc::new(SpecialModule::new(base.clone(), vec![]).unwrap());
    assert_eq!(num_parameters(special.as_ref()), num_parameters(base.as_ref()));
    for train in [false, true] {
        let x = batch(22);
        let a = Network::new(base.clone()).forward(&x, train).unwrap();
        let b = Network::new(special.clone()).forward(&x, train).unwrap();
        assert!(a.bit_eq(&b), "train={train}");
    }
}

#[test]
fn auxiliary_names_must_be_fresh() {
    let p = Params::new().with("in_channels", 4).with("out_channels", 4);
    let mk = || -> Arc<dyn Module> { Arc::new(ConvRegressor::from_params(&p, &mut StdRng::seed_from_u64(0)).unwrap()) };
    for bad in ["fc", "a.b", ""] {
        assert!(
            SpecialModule::new(net(1, 4, 10, 23), vec![(aux(bad, "ConvRegressor", "layer1"), mk())]).is_err(),
            "{bad}"
        );
    }
    let twice = vec![(aux("r", "ConvRegressor", "layer1"), mk()), (aux("r", "ConvRegressor", "layer1"), mk())];
    assert!(SpecialModule::new(net(1, 4, 10, 23), twice).is_err());
}
