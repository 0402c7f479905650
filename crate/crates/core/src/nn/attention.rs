use rand::Rng;

use super::{Dense, ForwardCtx, Init, ParamStore};
use crate::autograd::Var;
use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{lit, Scalar};

/// Multi-head scaled dot-product attention where queries and keys/values
/// come from different sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub key_dim: usize,
    pub model_dim: usize,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
}

pub struct AttentionOutput {
    /// `B×Nq×D`
    pub output: Var,
    /// `B×heads×Nq×Nk`, rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        model_dim: usize,
        heads: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || key_dim == 0 || model_dim == 0 {
            return Err(arg_err!("attention dimensions must be positive"));
        }
        let inner = heads * key_dim;
        let proj = |store: &mut ParamStore<T>, rng: &mut R, suffix: &str, i, o| {
            Dense::new(
                store,
                &format!("{name}.{suffix}"),
                i,
                o,
                Init::LecunUniform { fan_in: i },
                rng,
            )
        };
        let query = proj(store, rng, "query", model_dim, inner);
        let key = proj(store, rng, "key", model_dim, inner);
        let value = proj(store, rng, "value", model_dim, inner);
        let output = proj(store, rng, "output", inner, model_dim);
        Ok(MultiHeadAttention {
            heads,
            key_dim,
            model_dim,
            query,
            key,
            value,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .map(|d| d.param_count())
            .sum()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, queries: Var, keys_values: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, queries, keys_values)?.output)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        queries: Var,
        keys_values: Var,
    ) -> Result<AttentionOutput> {
        let qs = ctx.tape.shape(queries).to_vec();
        let ks = ctx.tape.shape(keys_values).to_vec();
        let (&[b, nq, dq], &[b2, nk, dk]) = (qs.as_slice(), ks.as_slice()) else {
            return Err(dim_err!("attention needs B×N×D inputs, got {qs:?} and {ks:?}"));
        };
        if nk == 0 {
            return Err(arg_err!("attention needs at least one key"));
        }
        if b != b2 || dq != self.model_dim || dk != self.model_dim {
            return Err(dim_err!(
                "attention over model dim {} got queries {qs:?} and keys {ks:?}",
                self.model_dim
            ));
        }
        let (h, kd) = (self.heads, self.key_dim);

        // B×N×D → (B·h)×N×kd
        let split_heads = |ctx: &mut ForwardCtx<'_, T>, x: Var, proj: &Dense, n: usize| -> Result<Var> {
            let flat = ctx.tape.reshape(x, &[b * n, self.model_dim])?;
            let p = proj.forward(ctx, flat)?;
            let p = ctx.tape.reshape(p, &[b, n, h, kd])?;
            let p = ctx.tape.permute(p, &[0, 2, 1, 3])?;
            ctx.tape.reshape(p, &[b * h, n, kd])
        };
        let q = split_heads(ctx, queries, &self.query, nq)?;
        let k = split_heads(ctx, keys_values, &self.key, nk)?;
        let v = split_heads(ctx, keys_values, &self.value, nk)?;

        let scores = ctx.tape.batch_matmul(q, k, true)?;
        let scores = ctx.tape.scale(scores, lit::<T>(1.0 / (kd as f64).sqrt()));
        let weights = ctx.tape.softmax(scores, 2)?;
        let mixed = ctx.tape.batch_matmul(weights, v, false)?;

        let mixed = ctx.tape.reshape(mixed, &[b, h, nq, kd])?;
        let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = ctx.tape.reshape(mixed, &[b * nq, h * kd])?;
        let out = self.output.forward(ctx, mixed)?;
        let output = ctx.tape.reshape(out, &[b, nq, self.model_dim])?;
        let weights = ctx.tape.reshape(weights, &[b, h, nq, nk])?;
        Ok(AttentionOutput { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f64>, MultiHeadAttention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, 4, &mut rng).unwrap();
        // non-zero biases so the affine parts are exercised
        for d in [&mha.query, &mha.key, &mha.value, &mha.output] {
            let n = store.get(d.bias).numel();
            *store.get_mut(d.bias) = Tensor::uniform([n], -0.5, 0.5, &mut rng);
        }
        (store, mha, rng)
    }

    #[test]
    fn single_key_output_ignores_queries() {
        let (store, mha, mut rng) = setup(3);
        let kv = Tensor::standard_normal([1, 1, 8], &mut rng);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let q = Tensor::standard_normal([1, 3, 8], &mut rng);
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::eval(&mut tape, &store);
            let qv = ctx.tape.constant(q);
            let kvv = ctx.tape.constant(kv.clone());
            let out = mha.forward_with_weights(&mut ctx, qv, kvv).unwrap();
            assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
            outputs.push(tape.value(out.output).clone());
        }
        let rows: Vec<&[f64]> = outputs.iter().flat_map(|t| t.data().chunks(8)).collect();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(rows[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_values_give_identical_rows() {
        let (store, mha, mut rng) = setup(5);
        let row = Tensor::<f64>::standard_normal([8], &mut rng);
        let kv = Tensor::from_fn([1, 4, 8], |i| row.data()[i % 8]);
        let q = Tensor::standard_normal([1, 5, 8], &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, &store);
        let qv = ctx.tape.constant(q);
        let kvv = ctx.tape.constant(kv);
        let out = mha.forward(&mut ctx, qv, kvv).unwrap();
        let data = tape.value(out).data();
        for r in data.chunks(8).skip(1) {
            for (a, b) in r.iter().zip(&data[..8]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_model_dim() {
        let (store, mha, _) = setup(1);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, &store);
        let q = ctx.tape.constant(Tensor::zeros([1, 2, 8]));
        let kv = ctx.tape.constant(Tensor::zeros([1, 2, 6]));
        assert!(matches!(mha.forward(&mut ctx, q, kv), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn param_count_includes_biases() {
        let (store, mha, _) = setup(0);
        assert_eq!(mha.param_count(), 3 * (8 * 8 + 8) + (8 * 8 + 8));
        assert_eq!(store.scalar_count(), mha.param_count());
    }
}
