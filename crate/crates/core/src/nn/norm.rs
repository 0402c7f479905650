use super::{BufferId, ForwardCtx, ParamStore, Phase};
use crate::autograd::{BatchMoments, NormStats, ParamId, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Running-average momentum: `running ← m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

/// Batch normalization over the trailing channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Pending running-statistic update for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub moments: BatchMoments<T>,
}

impl<T: Scalar> NormUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = lit::<T>(self.momentum);
        let one_minus = T::one() - m;
        let blend = |running: &mut Tensor<T>, batch: &[T]| {
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_minus * b;
            }
        };
        blend(store.buffer_mut(self.running_mean), &self.moments.mean);
        blend(store.buffer_mut(self.running_var), &self.moments.var);
    }
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Train: normalize by batch statistics and queue a running-stat update.
    /// Eval: normalize by the running statistics.
    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        if ctx.tape.shape(x).last() != Some(&self.channels) {
            return Err(dim_err!(
                "batch norm over {} channels got input {:?}",
                self.channels,
                ctx.tape.shape(x)
            ));
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = lit::<T>(self.epsilon);
        match ctx.phase() {
            Phase::Train => {
                let (y, moments) = ctx.tape.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
                ctx.push_update(NormUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    moments: moments.expect("batch statistics requested"),
                });
                Ok(y)
            }
            Phase::Eval => {
                let store = ctx.store;
                let stats = NormStats::Fixed {
                    mean: store.buffer(self.running_mean).data(),
                    var: store.buffer(self.running_var).data(),
                };
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, stats, eps)?;
                Ok(y)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn train_forward(store: &ParamStore<f64>, bn: &BatchNorm, x: &Tensor<f64>) -> (Tensor<f64>, Vec<NormUpdate<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(&mut tape, store, &mut rng);
        let xv = ctx.tape.constant(x.clone());
        let y = bn.forward(&mut ctx, xv).unwrap();
        let updates = ctx.into_updates();
        (tape.value(y).clone(), updates)
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        // per channel: values {-1, 1, -1, 1} → mean 0, biased var 1
        let x = Tensor::from_f64([4, 2], &[-1., 1., 1., -1., -1., 1., 1., -1.]).unwrap();
        let (y, _) = train_forward(&store, &bn, &x);
        let scale = 1.0 / (1.0f64 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3 && (a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        *store.get_mut(bn.gamma) = Tensor::zeros([3]);
        *store.get_mut(bn.beta) = Tensor::from_f64([3], &[0.5, -2.0, 7.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::standard_normal([2, 4, 4, 3], &mut rng);
        let (y, _) = train_forward(&store, &bn, &x);
        for row in y.data().chunks(3) {
            assert_eq!(row, &[0.5, -2.0, 7.0]);
        }
    }

    #[test]
    fn random_batch_is_standardized_per_channel() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::normal([8, 3, 3, 4], 5.0, 5.0, &mut rng);
        let (y, updates) = train_forward(&store, &bn, &x);
        let rows = y.numel() / 4;
        for c in 0..4 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / rows as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4, "channel {c} variance {var}");
        }
        assert_eq!(updates.len(), 1);
    }

    #[test]
    fn size_one_batch_with_zero_variance_is_finite() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(&mut tape, &store, &mut rng);
        let xv = ctx.tape.constant(Tensor::from_f64([1, 2], &[3.0, -4.0]).unwrap());
        let y = bn.forward(&mut ctx, xv).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap();
        let (_, updates) = train_forward(&store, &bn, &x);
        updates[0].apply(&mut store);
        let rm = store.buffer(bn.running_mean).data()[0];
        let rv = store.buffer(bn.running_var).data()[0];
        assert!((rm - 0.01 * 2.0).abs() < 1e-15);
        assert!((rv - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        *store.buffer_mut(bn.running_mean) = Tensor::from_f64([1], &[2.0]).unwrap();
        *store.buffer_mut(bn.running_var) = Tensor::from_f64([1], &[4.0 - BN_EPSILON]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, &store);
        let xv = ctx.tape.constant(Tensor::from_f64([2, 1], &[4.0, 0.0]).unwrap());
        let y = bn.forward(&mut ctx, xv).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
    }
}
