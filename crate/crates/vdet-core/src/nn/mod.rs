//! Parameter registry and the detection network building blocks.

use crate::kernels::{BnState, Mode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub mod blocks;

pub use blocks::{
    Bottleneck, C2f, C3Block, C3Unit, Cbam, CbamSpec, Cbs, DeformCbs, GhostConv, GhostSpec, Sppf,
};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Index of a batch-norm running-statistics slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnId(pub(crate) usize);

/// Ordered, uniquely named parameter tensors plus batch-norm state.
/// Registry order is the serialization order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    bn_states: Vec<(String, BnState<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), bn_states: Vec::new() }
    }

    pub fn add_param(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.params.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.params.push((name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn_state(&mut self, name: String, channels: usize) -> BnId {
        self.bn_states.push((name, BnState::new(channels)));
        BnId(self.bn_states.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BnState<T>)> {
        self.bn_states.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn bn_states_mut(&mut self) -> &mut [(String, BnState<T>)] {
        &mut self.bn_states
    }

    pub fn set_bn_state(&mut self, id: BnId, state: BnState<T>) {
        self.bn_states[id.0].1 = state;
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar parameter count.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix` and ends
    /// with `suffix`.
    pub fn count_elements(&self, prefix: &str, suffix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && n.ends_with(suffix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Weight initialization rule.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    ScaledUniform { fan_in: usize },
    Zero,
    One,
}

/// Allocates named parameters with deterministic initialization order.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let tensor = match init {
            Init::ScaledUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, self.rng)
            }
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, T::one()),
        };
        self.store.add_param(name, tensor)
    }
}

/// Per-forward context: tape leaves aligned with the parameter registry,
/// mutable batch-norm state, and the execution mode.
pub struct FwdCtx<'a, T> {
    pub vars: &'a [Var],
    pub bn_states: &'a mut [(String, BnState<T>)],
    pub mode: Mode,
}

impl<'a, T: Scalar> FwdCtx<'a, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Pushes every registry parameter onto a tape, in registry order.
pub fn stage_params<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    requires_grad: bool,
) -> Vec<Var> {
    store.params.iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect()
}

