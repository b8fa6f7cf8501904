use std::sync::{Arc, RwLock};

use super::GpModel;

/// One writer, many readers. Readers take an `Arc` snapshot and query it
/// without holding the lock; the writer mutates a private copy and swaps it
/// in, so a reader never sees a half-updated (K̄⁻¹, β, dataset) triple.
#[derive(Debug, Clone)]
pub struct SharedModel {
    inner: Arc<RwLock<Arc<GpModel>>>,
}

impl SharedModel {
    pub fn new(model: GpModel) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(model))),
        }
    }

    pub fn snapshot(&self) -> Arc<GpModel> {
        self.inner.read().expect("model lock poisoned").clone()
    }

    /// Apply `f` to a copy of the current model and publish the result. The
    /// write lock is held for the whole update so concurrent writers serialize.
    pub fn update<T>(&self, f: impl FnOnce(&mut GpModel) -> T) -> T {
        let mut guard = self.inner.write().expect("model lock poisoned");
        let mut next = (**guard).clone();
        let out = f(&mut next);
        *guard = Arc::new(next);
        out
    }
}
