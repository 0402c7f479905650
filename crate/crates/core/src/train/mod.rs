//! Loss, optimizer, the epoch loop and checkpoints.

mod checkpoint;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RunInfo,
    CHECKPOINT_VERSION,
};

use crate::autograd::{Gradients, Tape, Var};
use crate::data::{epoch_seed, make_batches, AugmentPolicy, DishRecord, ImageSource};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::model::{ArchConfig, Model};
use crate::nn::{ForwardCtx, ParamStore, Vectorizer};
use crate::tensor::{lit, Scalar, Tensor};

/// Every knob of a training run. Architecture fields sit at the top level
/// in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    /// Seeds parameter init, the split, shuffling, augmentation and dropout.
    pub seed: u64,
    pub split_ratio: f64,
    pub augment: bool,
    pub augment_policy: AugmentPolicy,
    pub min_kcal: f64,
    pub max_kcal: f64,
    #[serde(flatten)]
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-7,
            seed: 0,
            split_ratio: 0.8,
            augment: true,
            augment_policy: AugmentPolicy::default(),
            min_kcal: crate::data::DEFAULT_MIN_KCAL,
            max_kcal: crate::data::DEFAULT_MAX_KCAL,
            arch: ArchConfig::micro(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon_adam > 0.0) {
            return bad("epsilon_adam must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        self.augment_policy
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.arch.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon_adam,
        }
    }
}

/// Mean of squared differences between `pred` and `target` (same shape).
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(dim_err!(
            "loss needs equal shapes, got {:?} and {:?}",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(arg_err!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        ));
    }
    for id in store.ids() {
        match grads.get(id) {
            Some(g) if g.shape() == store.get(id).shape() => {}
            _ => {
                return Err(arg_err!(
                    "no gradient of matching shape for parameter {}",
                    store.name(id)
                ))
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
    let (c1, c2) = (lit::<T>(1.0 - cfg.beta1), lit::<T>(1.0 - cfg.beta2));
    let bias1 = lit::<T>(1.0 - cfg.beta1.powi(t));
    let bias2 = lit::<T>(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (lit::<T>(cfg.learning_rate), lit::<T>(cfg.epsilon));
    for id in store.ids() {
        let g = grads.get(id).expect("checked above").data();
        let (m, v) = (state.m[id.0].data_mut(), state.v[id.0].data_mut());
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimizer state plus progress, enough to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub adam: AdamState<T>,
    pub epochs_done: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        TrainState {
            adam: AdamState::new(store),
            epochs_done: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the batch MSE, kcal².
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,loss` rows under a header. Wall-clock times are left out so
    /// that identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{}\n", e.epoch, e.loss));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// What the loop needs besides the model.
pub struct TrainData<'a> {
    pub records: &'a [DishRecord],
    pub images: &'a dyn ImageSource,
    /// Required for the multimodal model.
    pub vectorizer: Option<&'a Vectorizer>,
}

/// Runs epochs `state.epochs_done .. cfg.epochs`: per batch a train-mode
/// forward, MSE, backward, Adam step, then batch-norm statistic updates.
///
/// Shuffling, augmentation and dropout draw from generators derived from
/// `(cfg.seed, epoch)`, so a run resumed from a checkpoint continues exactly
/// as an uninterrupted one.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let adam = cfg.adam();
    let mut log = TrainLog {
        seed: cfg.seed,
        epochs: Vec::new(),
    };
    let size = model.config().image_size;
    for epoch in state.epochs_done..cfg.epochs {
        let started = Instant::now();
        let seed = epoch_seed(cfg.seed, epoch);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(7);
        let augment = cfg.augment.then_some(cfg.augment_policy);
        let batches = make_batches(
            data.records,
            cfg.batch_size,
            data.vectorizer,
            size,
            seed,
            true,
            augment,
            data.images,
        )?;
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let tokens = match model.text {
                Some(_) => Some(
                    batch
                        .tokens
                        .as_ref()
                        .ok_or_else(|| arg_err!("multimodal training needs a vectorizer"))?,
                ),
                None => None,
            };
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(&mut tape, &model.store, &mut dropout_rng);
            let x = ctx.tape.constant(batch.images.cast());
            let pred = model.forward(&mut ctx, x, tokens)?;
            let target = ctx.tape.constant(batch.targets.cast());
            let loss_var = mse_loss(ctx.tape, pred, target)?;
            let updates = ctx.into_updates();
            let loss = tape.value(loss_var).item()?.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            let grads = tape.backward(loss_var)?;
            adam_step(&mut model.store, &grads, &mut state.adam, &adam)?;
            for u in &updates {
                u.apply(&mut model.store);
            }
            total += loss;
            count += 1;
        }
        state.epochs_done = epoch + 1;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / count as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}
