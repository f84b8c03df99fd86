use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use crate::tensor::TensorId;
use crate::{DType, Result, Storage, Tensor, TensorError};

struct ParamInner {
    id: TensorId,
    shape: Vec<usize>,
    value: RwLock<Arc<Storage>>,
    trainable: AtomicBool,
}

/// Shared, mutable parameter (or buffer) storage.
///
/// Clones alias the same storage, so a module reused in several model
/// layouts sees every update made through any of them.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl Param {
    pub fn new(init: Tensor) -> Self {
        Param(Arc::new(ParamInner {
            id: TensorId::fresh(),
            shape: init.shape().to_vec(),
            value: RwLock::new(init.storage_arc().clone()),
            trainable: AtomicBool::new(true),
        }))
    }

    /// A non-trainable buffer (e.g. running statistics).
    pub fn buffer(init: Tensor) -> Self {
        let p = Self::new(init);
        p.set_trainable(false);
        p
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.0.value.read().expect("param lock").dtype()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.store(trainable, Ordering::Relaxed);
    }

    /// Current value as a leaf tensor; gradients are keyed by this parameter's id
    /// when it is trainable.
    pub fn tensor(&self) -> Tensor {
        let data = self.0.value.read().expect("param lock").clone();
        let track = self.is_trainable() && crate::is_grad_enabled();
        Tensor::leaf(self.0.id, self.0.shape.clone(), data, track)
    }

    /// Current value without history.
    pub fn value(&self) -> Tensor {
        let data = self.0.value.read().expect("param lock").clone();
        Tensor::leaf(TensorId::fresh(), self.0.shape.clone(), data, false)
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "Param::set",
                lhs: self.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *self.0.value.write().expect("param lock") = value.storage_arc().clone();
        Ok(())
    }

    pub fn set_storage(&self, storage: Storage) -> Result<()> {
        if storage.len() != self.numel() {
            return Err(TensorError::Reshape { from: vec![storage.len()], to: self.shape().to_vec() });
        }
        *self.0.value.write().expect("param lock") = Arc::new(storage);
        Ok(())
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param").field("shape", &self.0.shape).field("trainable", &self.is_trainable()).finish()
    }
}
