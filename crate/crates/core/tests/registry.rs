use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use distill_core::error::Error;
use distill_core::hooks::Network;
use distill_core::nn::Module;
use distill_core::params::Params;
use distill_core::registry::{Category, Component, Registry};
use distill_core::tensor::{DType, Tensor};
use distill_core::zoo::tinyresnet;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn small_net(p: &Params, rng: &mut StdRng) -> distill_core::Result<Component> {
    let p = p.clone().with("depth", 1).with("width", 4).with("image_size", 8);
    Ok(Component::Model(Arc::new(tinyresnet(&p, None, rng)?)))
}

fn out_dim(m: &Arc<dyn Module>, image: usize) -> usize {
    let x = Tensor::zeros(vec![1, 3, image, image], DType::F32);
    Network::new(m.clone()).forward(&x, false).unwrap().shape()[1]
}

#[test]
fn register_and_resolve() {
    let mut r = Registry::with_builtins();
    r.register(Category::Model, "MyModel", small_net).unwrap();
    assert!(r.contains(Category::Model, "MyModel"));
    assert!(!r.is_builtin(Category::Model, "MyModel"));
    let m = r.model("MyModel", &Params::new().with("num_classes", 7), &mut StdRng::seed_from_u64(0)).unwrap();
    assert_eq!(out_dim(&m, 8), 7);
}

#[test]
fn registration_errors() {
    let mut r = Registry::with_builtins();
    assert!(matches!(
        r.register(Category::Loss, "KDLoss", |_, _| unreachable!()),
        Err(Error::DuplicateRegistration { category: Category::Loss, .. })
    ));
    assert!(matches!(r.register(Category::Model, "", small_net), Err(Error::InvalidName(_))));
}

#[test]
fn unknown_names_and_suggestions() {
    let mut r = Registry::with_builtins();
    r.register(Category::Model, "MyModel", small_net).unwrap();
    match r.lookup(Category::Model, "NoSuchNet") {
        Err(Error::UnknownComponent { suggestions, .. }) => assert!(suggestions.is_empty(), "{suggestions:?}"),
        other => panic!("{:?}", other.err()),
    }
    match r.lookup(Category::Model, "MyModle") {
        Err(Error::UnknownComponent { suggestions, .. }) => assert_eq!(suggestions, vec!["MyModel".to_string()]),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn builtin_instantiation() {
    let r = Registry::with_builtins();
    let mut rng = StdRng::seed_from_u64(0);
    let m = r.model("resnet_tiny", &Params::new().with("num_classes", 10), &mut rng).unwrap();
    assert_eq!(out_dim(&m, 16), 10);
    let m = r.model("resnet_tiny", &Params::new(), &mut rng).unwrap();
    assert_eq!(out_dim(&m, 16), 10);

    let kd = Params::from_value(&serde_yaml::from_str("{temperature: 1.0, alpha: 0.5, reduction: batchmean}").unwrap())
        .unwrap();
    assert!(matches!(r.instantiate(Category::Loss, "KDLoss", &kd).unwrap(), Component::Loss(_)));
}

#[test]
fn bad_params_name_the_parameter() {
    let r = Registry::with_builtins();
    match r.instantiate(Category::Loss, "KDLoss", &Params::new().with("alpha", 2.0)) {
        Err(Error::Construction { params, .. }) => assert_eq!(params, vec!["alpha".to_string()]),
        other => panic!("{:?}", other.err()),
    }
    match r.instantiate(Category::Loss, "KDLoss", &Params::new().with("temprature", 2.0)) {
        Err(e @ Error::Construction { .. }) => assert!(e.to_string().contains("temprature"), "{e}"),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn factory_round_trip_through_a_counting_stub() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = calls.clone();
    let mut r = Registry::empty();
    r.register(Category::Loss, "Counted", move |p, _| {
        seen.fetch_add(1, Ordering::SeqCst);
        let scale: f64 = p.require("scale")?;
        Ok(Component::Loss(Arc::new(Scaled(scale))))
    })
    .unwrap();
    let loss = r.loss("Counted", &Params::new().with("scale", 3.0)).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    let x = Tensor::from_vec_f64(vec![1.0, 2.0], vec![1, 2]).unwrap();
    assert_eq!(loss.compute(&[x], &[], &[0]).unwrap().to_scalar().unwrap(), 9.0);
    assert!(r.loss("Counted", &Params::new()).is_err());
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

struct Scaled(f64);

impl distill_core::losses::Criterion for Scaled {
    fn compute(&self, s: &[Tensor], _: &[Tensor], _: &[usize]) -> distill_core::Result<Tensor> {
        Ok(s[0].sum_all().scale(self.0))
    }
}

#[test]
fn clones_are_independent() {
    let base = Registry::with_builtins();
    let mut other = base.clone();
    other.register(Category::Model, "MyModel", small_net).unwrap();
    assert!(!base.contains(Category::Model, "MyModel"));
}

proptest! {
    #[test]
    fn registration_order_does_not_matter(names in prop::collection::btree_set("[A-Za-z][A-Za-z0-9_]{0,8}", 1..8), seed in any::<u64>()) {
        let names: Vec<String> = names.into_iter().collect();
        let mut shuffled = names.clone();
        shuffled.shuffle(&mut StdRng::seed_from_u64(seed));
        let build = |order: &[String]| {
            let mut r = Registry::empty();
            for n in order {
                let tag = names.iter().position(|m| m == n).unwrap() as f64;
                r.register(Category::Loss, n, move |_, _| Ok(Component::Loss(Arc::new(Scaled(tag))))).unwrap();
            }
            r
        };
        let (a, b) = (build(&names), build(&shuffled));
        prop_assert_eq!(a.names(Category::Loss), b.names(Category::Loss));
        let x = Tensor::from_vec_f64(vec![1.0], vec![1, 1]).unwrap();
        for n in &names {
            let va = a.loss(n, &Params::new()).unwrap().compute(&[x.clone()], &[], &[0]).unwrap().to_scalar().unwrap();
            let vb = b.loss(n, &Params::new()).unwrap().compute(&[x.clone()], &[], &[0]).unwrap().to_scalar().unwrap();
            prop_assert_eq!(va, vb);
        }
    }

    #[test]
    fn single_edits_are_suggested(idx in 0usize..6, pos in any::<prop::sample::Index>(), c in "[a-z]") {
        let r = Registry::with_builtins();
        let names = r.names(Category::Loss);
        let name = &names[idx % names.len()];
        let mut typo: Vec<char> = name.chars().collect();
        let i = pos.index(typo.len());
        typo[i] = c.chars().next().unwrap();
        let typo: String = typo.into_iter().collect();
        prop_assume!(&typo != name);
        match r.lookup(Category::Loss, &typo) {
            Err(Error::UnknownComponent { suggestions, .. }) => prop_assert!(suggestions.contains(name)),
            Ok(_) => {}
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
