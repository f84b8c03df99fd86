//! Name-keyed component registry.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::data::{Dataset, SupplementaryProvider, Transform};
use crate::error::{Error, Result};
use crate::losses::Criterion;
use crate::nn::Module;
use crate::optim::{LrScheduler, OptimizerBuilder};
use crate::params::Params;
use crate::toolkit::{ModelWrapper, SpecialSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Model,
    Dataset,
    Transform,
    Loss,
    Optimizer,
    Scheduler,
    Auxiliary,
    Wrapper,
    Special,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Model,
        Category::Dataset,
        Category::Transform,
        Category::Loss,
        Category::Optimizer,
        Category::Scheduler,
        Category::Auxiliary,
        Category::Wrapper,
        Category::Special,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Model => "model",
            Category::Dataset => "dataset",
            Category::Transform => "transform",
            Category::Loss => "loss",
            Category::Optimizer => "optimizer",
            Category::Scheduler => "scheduler",
            Category::Auxiliary => "auxiliary",
            Category::Wrapper => "wrapper",
            Category::Special => "special",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A constructed component.
#[derive(Clone)]
pub enum Component {
    Model(Arc<dyn Module>),
    Dataset(Arc<dyn Dataset>),
    Transform(Arc<dyn Transform>),
    Loss(Arc<dyn Criterion>),
    Optimizer(Arc<dyn OptimizerBuilder>),
    Scheduler(Arc<dyn LrScheduler>),
    Auxiliary(Arc<dyn Module>),
    Wrapper(Arc<dyn ModelWrapper>),
    Provider(Arc<dyn SupplementaryProvider>),
    Special(SpecialSpec),
}

impl Component {
    pub fn category(&self) -> Category {
        match self {
            Component::Model(_) => Category::Model,
            Component::Dataset(_) => Category::Dataset,
            Component::Transform(_) => Category::Transform,
            Component::Loss(_) => Category::Loss,
            Component::Optimizer(_) => Category::Optimizer,
            Component::Scheduler(_) => Category::Scheduler,
            Component::Auxiliary(_) => Category::Auxiliary,
            Component::Wrapper(_) | Component::Provider(_) => Category::Wrapper,
            Component::Special(_) => Category::Special,
        }
    }
}

pub type Factory = Arc<dyn Fn(&Params, &mut StdRng) -> Result<Component> + Send + Sync>;

#[derive(Clone)]
struct Entry {
    factory: Factory,
    builtin: bool,
}

/// Maps (category, name) to factories. Cloning is cheap; clones are independent.
#[derive(Clone)]
pub struct Registry {
    entries: BTreeMap<(Category, String), Entry>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.trim().is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::InvalidName(name.to_string()));
    }
    Ok(())
}

impl Registry {
    pub fn empty() -> Self {
        Registry { entries: BTreeMap::new() }
    }

    /// Registry holding every built-in component.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        crate::builtins::register_all(&mut r);
        for e in r.entries.values_mut() {
            e.builtin = true;
        }
        r
    }

    pub fn register<F>(&mut self, category: Category, name: &str, factory: F) -> Result<()>
    where
        F: Fn(&Params, &mut StdRng) -> Result<Component> + Send + Sync + 'static,
    {
        self.register_with(category, name, factory, false)
    }

    /// Like [`Registry::register`]; with `replace` an existing entry is overwritten.
    pub fn register_with<F>(&mut self, category: Category, name: &str, factory: F, replace: bool) -> Result<()>
    where
        F: Fn(&Params, &mut StdRng) -> Result<Component> + Send + Sync + 'static,
    {
        check_name(name)?;
        let key = (category, name.to_string());
        if self.entries.contains_key(&key) && !replace {
            return Err(Error::DuplicateRegistration { category, name: name.to_string() });
        }
        self.entries.insert(key, Entry { factory: Arc::new(factory), builtin: false });
        Ok(())
    }

    pub fn contains(&self, category: Category, name: &str) -> bool {
        self.entries.contains_key(&(category, name.to_string()))
    }

    pub fn is_builtin(&self, category: Category, name: &str) -> bool {
        self.entries.get(&(category, name.to_string())).is_some_and(|e| e.builtin)
    }

    pub fn names(&self, category: Category) -> Vec<String> {
        self.entries.keys().filter(|(c, _)| *c == category).map(|(_, n)| n.clone()).collect()
    }

    pub fn lookup(&self, category: Category, name: &str) -> Result<Factory> {
        check_name(name)?;
        match self.entries.get(&(category, name.to_string())) {
            Some(e) => Ok(e.factory.clone()),
            None => Err(Error::UnknownComponent {
                category,
                name: name.to_string(),
                suggestions: self.near_misses(category, name),
            }),
        }
    }

    fn near_misses(&self, category: Category, name: &str) -> Vec<String> {
        let lower = name.to_lowercase();
        let mut hits: Vec<(usize, String)> = self
            .names(category)
            .into_iter()
            .filter_map(|n| {
                let cand = n.to_lowercase();
                let d = strsim::levenshtein(&lower, &cand);
                // a typo'd suffix ("resnet_tiny_v2") still points at the stem
                let prefix = cand.len() >= 3 && (lower.starts_with(&cand) || cand.starts_with(&lower));
                (d <= 2 || prefix).then_some((d, n))
            })
            .collect();
        hits.sort();
        hits.into_iter().map(|(_, n)| n).collect()
    }

    /// Construct with a fixed-seed RNG.
    pub fn instantiate(&self, category: Category, name: &str, params: &Params) -> Result<Component> {
        self.instantiate_with(category, name, params, &mut StdRng::seed_from_u64(0))
    }

    pub fn instantiate_with(
        &self,
        category: Category,
        name: &str,
        params: &Params,
        rng: &mut StdRng,
    ) -> Result<Component> {
        let factory = self.lookup(category, name)?;
        let wrap = |message: String, bad: Vec<String>| Error::Construction {
            category,
            name: name.to_string(),
            params: bad,
            message,
        };
        match factory(params, rng) {
            Ok(c) if c.category() == category => Ok(c),
            Ok(c) => Err(wrap(format!("factory produced a {} component", c.category()), vec![])),
            Err(Error::InvalidParam { name: p, message }) => Err(wrap(message, vec![p])),
            Err(e @ Error::Construction { .. }) => Err(e),
            Err(e) => Err(wrap(e.to_string(), params.keys().map(str::to_string).collect())),
        }
    }

    pub fn model(&self, name: &str, params: &Params, rng: &mut StdRng) -> Result<Arc<dyn Module>> {
        match self.instantiate_with(Category::Model, name, params, rng)? {
            Component::Model(m) => Ok(m),
            _ => unreachable!("category checked"),
        }
    }

    pub fn auxiliary(&self, name: &str, params: &Params, rng: &mut StdRng) -> Result<Arc<dyn Module>> {
        match self.instantiate_with(Category::Auxiliary, name, params, rng)? {
            Component::Auxiliary(m) => Ok(m),
            _ => unreachable!("category checked"),
        }
    }

    pub fn dataset(&self, name: &str, params: &Params) -> Result<Arc<dyn Dataset>> {
        match self.instantiate(Category::Dataset, name, params)? {
            Component::Dataset(d) => Ok(d),
            _ => unreachable!("category checked"),
        }
    }

    pub fn transform(&self, name: &str, params: &Params) -> Result<Arc<dyn Transform>> {
        match self.instantiate(Category::Transform, name, params)? {
            Component::Transform(t) => Ok(t),
            _ => unreachable!("category checked"),
        }
    }

    pub fn loss(&self, name: &str, params: &Params) -> Result<Arc<dyn Criterion>> {
        match self.instantiate(Category::Loss, name, params)? {
            Component::Loss(l) => Ok(l),
            _ => unreachable!("category checked"),
        }
    }

    pub fn optimizer(&self, name: &str, params: &Params) -> Result<Arc<dyn OptimizerBuilder>> {
        match self.instantiate(Category::Optimizer, name, params)? {
            Component::Optimizer(o) => Ok(o),
            _ => unreachable!("category checked"),
        }
    }

    pub fn scheduler(&self, name: &str, params: &Params) -> Result<Arc<dyn LrScheduler>> {
        match self.instantiate(Category::Scheduler, name, params)? {
            Component::Scheduler(s) => Ok(s),
            _ => unreachable!("category checked"),
        }
    }

    pub fn special(&self, name: &str, params: &Params) -> Result<SpecialSpec> {
        match self.instantiate(Category::Special, name, params)? {
            Component::Special(s) => Ok(s),
            _ => unreachable!("category checked"),
        }
    }

    pub fn wrapper(&self, name: &str, params: &Params) -> Result<Component> {
        self.instantiate(Category::Wrapper, name, params)
    }
}
