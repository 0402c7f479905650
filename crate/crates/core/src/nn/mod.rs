//! Parameterized layers.
//!
//! Layers hold only ids into a [`ParamStore`]; a forward pass borrows the
//! store immutably through a [`ForwardCtx`], which also carries the dropout
//! generator and collects batch-norm statistics to apply after the step.

mod attention;
mod conv;
mod dense;
mod norm;
mod text;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use attention::{AttentionOutput, MultiHeadAttention};
pub use conv::{Conv2d, ConvBn, ConvKind, DepthwiseConv, InvertedResidual};
pub use dense::{Dense, Dropout};
pub use norm::{BatchNorm, NormUpdate, BN_EPSILON, BN_MOMENTUM};
pub use text::{embed_and_pool, EmbeddingTable, TokenBatch, Vectorizer, OOV_ID, PAD_ID};

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{arg_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a non-trainable tensor (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Named<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Owns every trainable parameter and running buffer of a model, in
/// creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Named {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        self.buffers.push(Named {
            name: name.into(),
            tensor,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    /// Replaces all tensors, keeping names; shapes must match.
    pub(crate) fn replace_all(&mut self, params: Vec<Tensor<T>>, buffers: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(arg_err!("tensor count does not match parameter store layout"));
        }
        for (slot, t) in self.params.iter_mut().zip(params) {
            if slot.tensor.shape() != t.shape() {
                return Err(arg_err!(
                    "parameter {} expects shape {:?}, got {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    t.shape()
                ));
            }
            slot.tensor = t.with_requires_grad(true);
        }
        for (slot, t) in self.buffers.iter_mut().zip(buffers) {
            if slot.tensor.shape() != t.shape() {
                return Err(arg_err!("buffer {} has the wrong shape", slot.name));
            }
            slot.tensor = t;
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    phase: Phase,
    rng: Option<&'a mut ChaCha8Rng>,
    updates: Vec<NormUpdate<T>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn eval(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        ForwardCtx {
            tape,
            store,
            phase: Phase::Eval,
            rng: None,
            updates: Vec::new(),
        }
    }

    pub fn train(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            tape,
            store,
            phase: Phase::Train,
            rng: Some(rng),
            updates: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id, self.store.get(id))
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng.as_mut().expect("training pass carries a generator")
    }

    pub(crate) fn push_update(&mut self, update: NormUpdate<T>) {
        self.updates.push(update);
    }

    /// Batch-norm running-statistic updates gathered during a training pass.
    pub fn into_updates(self) -> Vec<NormUpdate<T>> {
        self.updates
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`, for layers followed by (clipped) ReLU.
    HeUniform {
        fan_in: usize,
    },
    /// `U(−√(3/fan_in), √(3/fan_in))`, unit-variance for linear maps.
    LecunUniform {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match self {
            Init::HeUniform { fan_in } => {
                let limit = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -limit, limit, rng)
            }
            Init::LecunUniform { fan_in } => {
                let limit = (3.0 / fan_in as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -limit, limit, rng)
            }
            Init::Normal { std } => Tensor::normal(shape.to_vec(), 0.0, std, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
        }
    }
}
