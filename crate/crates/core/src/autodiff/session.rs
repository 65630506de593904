use std::collections::HashMap;
use std::ops::Deref;

use crate::error::Result;
use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};
use super::tape::{Gradients, Tape, Var};

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are bound onto the tape lazily the first time a layer asks
/// for them. Batch-norm layers in train mode write their running
/// statistics straight into the store, which is why the session holds it
/// mutably.
pub struct Session<'s> {
    tape: Tape,
    store: &'s mut ParamStore,
    train: bool,
    record_grads: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'s> Session<'s> {
    /// Session that records parameter gradients.
    pub fn new(store: &'s mut ParamStore, train: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            train,
            record_grads: true,
            bound: HashMap::new(),
        }
    }

    /// Forward-only session: parameters are bound as constants.
    pub fn inference(store: &'s mut ParamStore, train: bool) -> Self {
        Session {
            record_grads: false,
            ..Session::new(store, train)
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn records_grads(&self) -> bool {
        self.record_grads
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let value = p.value.clone();
        let v = if self.record_grads && p.role.is_trainable() {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(id, v);
        v
    }

    /// Differentiable input when gradients are recorded, constant otherwise.
    pub fn input(&self, t: Tensor) -> Var {
        if self.record_grads {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        }
    }

    /// Runs backward from `root` and adds the parameter gradients into the
    /// store. Gradients accumulate; call [`ParamStore::zero_grad`] between steps.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let grads = self.tape.backward(root)?;
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                let dst = &mut self.store.get_mut(id).gradient;
                dst.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        Ok(grads)
    }
}

impl Deref for Session<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}
