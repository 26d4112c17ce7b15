use std::cell::RefCell;
use std::collections::HashMap;

use super::{ParamId, ParamStore, Tape, Tensor, Var};

/// Binds stored parameters to a tape, creating each leaf at most once so all
/// uses of a parameter share one gradient slot.
pub struct Scope<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t> Scope<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Scope {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        *self
            .bound
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.param(self.store, id))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn grad_enabled(&self) -> bool {
        self.tape.grad_enabled()
    }
}
