//! Split, fit, evaluate: one model on one dataset, end to end.

use crate::data::{split, DishRecord, ImageSource, SplitDataset};
use crate::error::Result;
use crate::model::{Model, ModelKind, OutputScale};
use crate::nn::Vectorizer;
use crate::stats::{evaluate, report, EvalReport, PredictionSet};
use crate::tensor::Scalar;
use crate::train::{train, TrainConfig, TrainData, TrainLog, TrainState};

/// Train/test split plus the vocabulary fitted on the training names
/// (multimodal only). Both model kinds see the same split for a given
/// `cfg.seed`.
pub fn prepare(
    records: &[DishRecord],
    kind: ModelKind,
    cfg: &TrainConfig,
) -> Result<(SplitDataset, Option<Vectorizer>)> {
    cfg.validate()?;
    let parts = split(records, cfg.split_ratio, cfg.seed)?;
    let vectorizer = match kind {
        ModelKind::Unimodal => None,
        ModelKind::Multimodal => {
            let names: Vec<&str> = parts.train.iter().map(|r| r.dish_name.as_str()).collect();
            Some(Vectorizer::fit(&names, cfg.arch.vocab_size, cfg.arch.max_tokens)?)
        }
    };
    Ok((parts, vectorizer))
}

/// A freshly initialized model whose output scaling matches the training
/// targets.
pub fn init_model<T: Scalar>(kind: ModelKind, cfg: &TrainConfig, train_records: &[DishRecord]) -> Result<Model<T>> {
    let mut model = Model::build(kind, &cfg.arch, cfg.seed)?;
    let kcal: Vec<f64> = train_records.iter().map(|r| r.calories).collect();
    model.output_scale = OutputScale::from_targets(&kcal);
    Ok(model)
}

pub struct RunOutcome<T: Scalar> {
    pub model: Model<T>,
    pub state: TrainState<T>,
    pub vectorizer: Option<Vectorizer>,
    pub split: SplitDataset,
    pub log: TrainLog,
    pub predictions: PredictionSet,
    pub report: EvalReport,
}

/// Splits, trains for `cfg.epochs` and evaluates on the held-out side.
pub fn run_experiment<T: Scalar>(
    kind: ModelKind,
    records: &[DishRecord],
    images: &dyn ImageSource,
    cfg: &TrainConfig,
) -> Result<RunOutcome<T>> {
    let (parts, vectorizer) = prepare(records, kind, cfg)?;
    let mut model = init_model::<T>(kind, cfg, &parts.train)?;
    let mut state = TrainState::new(&model.store);
    let data = TrainData {
        records: &parts.train,
        images,
        vectorizer: vectorizer.as_ref(),
    };
    let log = train(&mut model, &mut state, &data, cfg)?;
    let predictions = evaluate(&model, &parts.test, vectorizer.as_ref(), images, cfg.batch_size)?;
    let report = report(&predictions)?;
    Ok(RunOutcome {
        model,
        state,
        vectorizer,
        split: parts,
        log,
        predictions,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::ArchConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            arch: ArchConfig {
                image_size: 16,
                ..ArchConfig::micro()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn both_kinds_share_the_split() {
        let ds = synth_generate(30, 3, 0.5).unwrap();
        let cfg = tiny_cfg();
        let (a, va) = prepare(&ds.records, ModelKind::Unimodal, &cfg).unwrap();
        let (b, vb) = prepare(&ds.records, ModelKind::Multimodal, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(va.is_none());
        let v = vb.unwrap();
        // only training names contribute to the vocabulary
        for tok in v.tokens() {
            assert!(a.train.iter().any(|r| r.dish_name.contains(tok.as_str())));
        }
    }

    #[test]
    fn run_is_deterministic() {
        let ds = synth_generate(24, 9, 0.5).unwrap();
        let cfg = tiny_cfg();
        let a = run_experiment::<f32>(ModelKind::Multimodal, &ds.records, &ds.images, &cfg).unwrap();
        let b = run_experiment::<f32>(ModelKind::Multimodal, &ds.records, &ds.images, &cfg).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.log.losses(), b.log.losses());
        assert_eq!(a.model, b.model);
        assert_eq!(a.predictions.len(), 24 - 19);
        let ids: Vec<&String> = a.split.test.iter().map(|r| &r.dish_id).collect();
        assert_eq!(a.predictions.dish_ids.iter().collect::<Vec<_>>(), ids);
    }

    #[test]
    fn output_scale_tracks_training_targets() {
        let ds = synth_generate(20, 1, 0.0).unwrap();
        let m = init_model::<f32>(ModelKind::Unimodal, &tiny_cfg(), &ds.records).unwrap();
        let kcal: Vec<f64> = ds.records.iter().map(|r| r.calories).collect();
        let mean = kcal.iter().sum::<f64>() / kcal.len() as f64;
        assert!((m.output_scale.offset - mean).abs() < 1e-9);
    }
}
