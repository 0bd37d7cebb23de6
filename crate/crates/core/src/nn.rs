//! Small building blocks shared by the model modules.

use crate::error::Result;
use crate::numerics::{linear, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// A tape paired with the parameter store it reads from during one forward
/// pass.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Gaussian init with variance `gain² / fan_in`.
pub fn init_weight(rng: &mut Rng, din: usize, dout: usize, gain: f64) -> Tensor {
    rng.normal_tensor(&[din, dout], gain / (din as f64).sqrt())
}

/// Fully connected layer on the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        Self::with_weight(store, name, init_weight(rng, din, dout, 1.0), bias)
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor, bias: bool) -> Result<Self> {
        let (din, dout) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, din, dout })
    }

    pub fn forward<'t>(&self, cx: Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.map(|b| cx.p(b));
        linear(x, &cx.p(self.weight), b.as_ref())
    }
}
