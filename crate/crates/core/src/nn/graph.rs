use std::ops::{Deref, DerefMut};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};

/// A tape bound to the parameter store it reads from.
///
/// In trainable mode parameters enter the tape as gradient leaves; in frozen
/// mode they enter as constants, so no backward pass can reach them.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    trainable: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            trainable: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if self.trainable {
            self.tape.param(self.store, id)
        } else {
            self.tape.frozen_param(self.store, id)
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
