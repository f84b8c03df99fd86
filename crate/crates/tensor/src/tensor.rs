use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::shape::numel;
use crate::{DType, Result, Storage, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    pub(crate) fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// Gradient rule of a recorded operation.
pub(crate) trait Backward: Send + Sync {
    /// Returns one gradient per input; `None` where the input needs none.
    fn backward(&self, grad: &Storage, inputs: &[Tensor], output: &Tensor) -> Result<Vec<Option<Storage>>>;
}

struct Node {
    inputs: Vec<Tensor>,
    op: Box<dyn Backward>,
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Storage>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Immutable, contiguous, row-major tensor with optional autodiff history.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording any autodiff history on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    pub fn from_storage(storage: Storage, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != storage.len() {
            return Err(TensorError::Reshape { from: vec![storage.len()], to: shape });
        }
        Ok(Self::leaf(TensorId::fresh(), shape, Arc::new(storage), false))
    }

    pub(crate) fn leaf(id: TensorId, shape: Vec<usize>, data: Arc<Storage>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner { id, shape, data, requires_grad, node: None }))
    }

    /// Result of an op: keeps the history only if some input requires grad.
    pub(crate) fn from_op(shape: Vec<usize>, data: Storage, inputs: &[&Tensor], op: impl Backward + 'static) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            requires_grad: track,
            node: track.then(|| Node { inputs: inputs.iter().map(|&t| t.clone()).collect(), op: Box::new(op) }),
        }))
    }

    pub fn from_vec(values: Vec<f32>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_storage(Storage::F32(values), shape)
    }

    pub fn from_vec_f64(values: Vec<f64>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_storage(Storage::F64(values), shape)
    }

    pub fn from_f64_slice(values: &[f64], shape: impl Into<Vec<usize>>, dtype: DType) -> Result<Self> {
        Self::from_storage(Storage::from_f64(dtype, values), shape)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::leaf(TensorId::fresh(), shape, Arc::new(Storage::zeros(dtype, n)), false)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64, dtype: DType) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::leaf(TensorId::fresh(), shape, Arc::new(Storage::full(dtype, n, value)), false)
    }

    pub fn ones(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(Vec::new(), value, dtype)
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, dtype: DType, rng: &mut R) -> Self {
        let shape = shape.into();
        let values: Vec<f64> = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::leaf(TensorId::fresh(), shape, Arc::new(Storage::from_f64(dtype, &values)), false)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        dtype: DType,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let values: Vec<f64> = (0..numel(&shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::leaf(TensorId::fresh(), shape, Arc::new(Storage::from_f64(dtype, &values)), false)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, d: isize) -> Result<usize> {
        Ok(self.0.shape[crate::shape::axis(self.rank(), d)?])
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.0.data
    }

    pub(crate) fn storage_arc(&self) -> &Arc<Storage> {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Fresh leaf sharing this tensor's data that gradients will be reported for.
    pub fn requires_grad_(&self) -> Tensor {
        Self::leaf(TensorId::fresh(), self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Same data, no history.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::leaf(TensorId::fresh(), self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.0.data.to_f64_vec()
    }

    pub fn to_vec_f32(&self) -> Vec<f32> {
        match &*self.0.data {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Rank { op: "to_scalar", expected: 0, got: self.shape().to_vec() });
        }
        Ok(self.to_vec_f64()[0])
    }

    /// Bitwise equality of shape, dtype and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        match (self.storage(), other.storage()) {
            (Storage::F32(a), Storage::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Storage::F64(a), Storage::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(self.to_vec_f64().iter().zip(other.to_vec_f64()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        match self.storage() {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Reverse-mode sweep from this tensor, seeded with ones.
    pub fn backward(&self) -> Result<Grads> {
        let seed = Storage::full(self.dtype(), self.numel(), 1.0);
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Storage) -> Result<Grads> {
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return Ok(grads);
        }
        let order = self.topo_order();
        let mut pending: HashMap<TensorId, Storage> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => grads.accumulate(t.id(), &t.0.shape, g),
                Some(node) => {
                    let input_grads = node.op.backward(&g, &node.inputs, t)?;
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel());
                        match pending.get_mut(&inp.id()) {
                            Some(acc) => acc.add_assign(&ig),
                            None => {
                                pending.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Post-order of the history graph (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for inp in &node.inputs {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.to_vec_f64().into_iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Gradients of leaf tensors from one backward sweep.
#[derive(Default)]
pub struct Grads {
    map: HashMap<TensorId, Tensor>,
}

impl Grads {
    fn accumulate(&mut self, id: TensorId, shape: &[usize], g: Storage) {
        match self.map.remove(&id) {
            Some(prev) => {
                let mut acc = prev.storage().clone();
                acc.add_assign(&g);
                self.map.insert(id, Tensor::leaf(TensorId::fresh(), shape.to_vec(), Arc::new(acc), false));
            }
            None => {
                self.map.insert(id, Tensor::leaf(TensorId::fresh(), shape.to_vec(), Arc::new(g), false));
            }
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn get_id(&self, id: TensorId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
