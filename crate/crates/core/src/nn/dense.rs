use rand::Rng;

use super::{ForwardCtx, Init, ParamStore, Phase};
use crate::autograd::{ParamId, Var};
use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Fully connected layer `x·W + b` over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), init.tensor(&[in_dim, out_dim], rng));
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies the layer to `x[N×in]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(dim_err!("dense layer expects N×{}, got {shape:?}", self.in_dim));
        }
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Inverted dropout: at train time each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`; evaluation is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(arg_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Var {
        if ctx.phase() == Phase::Eval || self.rate == 0.0 {
            return x;
        }
        let keep = lit::<T>(1.0 / (1.0 - self.rate));
        let shape = ctx.tape.shape(x).to_vec();
        let rate = self.rate;
        let rng = ctx.rng();
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let m = ctx.tape.constant(mask);
        ctx.tape.mul(x, m).expect("mask has the input's shape")
    }
}
