//! Self-check suites runnable from the command line: gradient checks,
//! frozen statistics fixtures and pipeline invariants.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::autograd::{Tape, Var};
use crate::data::{make_batches, split, synth_generate, AugmentPolicy};
use crate::error::{arg_err, Error, Result};
use crate::experiment::run_experiment;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::model::{ArchConfig, Model, ModelKind};
use crate::nn::{
    embed_and_pool, BatchNorm, Conv2d, Dense, DepthwiseConv, Dropout, EmbeddingTable, ForwardCtx, Init,
    InvertedResidual, MultiHeadAttention, ParamStore, TokenBatch,
};
use crate::stats::{paired_t_test, report, student_t_upper_tail, PredictionSet};
use crate::tensor::{Padding, Tensor};
use crate::train::{decode_checkpoint, encode_checkpoint, mse_loss, TrainConfig};

/// Largest relative error allowed for a single layer.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Largest relative error allowed for a whole model.
pub const MODEL_TOLERANCE: f64 = 1e-5;
/// Finite-difference step for layers.
pub const FD_STEP: f64 = 1e-4;
/// Finite-difference step for whole models.
pub const MODEL_FD_STEP: f64 = 1e-5;
/// Relative tolerance against the statistics fixtures.
pub const FIXTURE_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance of the Student t tail fixtures.
pub const TAIL_TOLERANCE: f64 = 1e-10;

const STATS_FIXTURES: &str = include_str!("../fixtures/stats_oracle.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Stats,
    Pipeline,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Stats => "stats",
            Suite::Pipeline => "pipeline",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "stats" => Ok(Suite::Stats),
            "pipeline" => Ok(Suite::Pipeline),
            other => Err(arg_err!(
                "unknown suite `{other}` (expected gradcheck, stats or pipeline)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{mark} {}: {}\n", c.name, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} suite: {} checks, {failed} failed, {:.1}s\n",
            self.suite,
            self.checks.len(),
            self.seconds
        ));
        out
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let started = Instant::now();
    let checks = match suite {
        Suite::Gradcheck => gradcheck_suite()?,
        Suite::Stats => stats_suite()?,
        Suite::Pipeline => pipeline_suite()?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------- gradcheck

/// One gradient check: a name, the worst coordinate and its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element gets a
/// distinct weight.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Checks a layer held in `store`; `x` is appended after the parameters,
/// so it is `v[store.len()]` inside `f`.
fn layer_check<F>(name: &'static str, store: &ParamStore<f64>, x: Tensor<f64>, f: F) -> Result<GradCase>
where
    F: Fn(&mut ForwardCtx<'_, f64>, Var) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.tensor.clone()).collect();
    let xi = inputs.len();
    inputs.push(x);
    let report = gradcheck(
        |tape, v| {
            let mut gen = rng(99);
            let mut ctx = ForwardCtx::train(tape, store, &mut gen);
            let y = f(&mut ctx, v[xi])?;
            probe(ctx.tape, y, 7)
        },
        &inputs,
        FD_STEP,
    )?;
    Ok(GradCase {
        name,
        report,
        tolerance: LAYER_TOLERANCE,
    })
}

fn op_check<F>(name: &'static str, inputs: &[Tensor<f64>], f: F) -> Result<GradCase>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = gradcheck(
        |tape, v| {
            let y = f(tape, v)?;
            probe(tape, y, 11)
        },
        inputs,
        FD_STEP,
    )?;
    Ok(GradCase {
        name,
        report,
        tolerance: LAYER_TOLERANCE,
    })
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::standard_normal(shape.to_vec(), &mut rng(seed))
}

/// Every layer and primitive in double precision.
pub fn gradcheck_layers() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut g = rng(1);

    out.push(op_check(
        "matmul",
        &[normal(&[3, 4], 1), normal(&[4, 2], 2)],
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(op_check("softmax", &[normal(&[3, 5], 3)], |t, v| t.softmax(v[0], 1))?);
    out.push(op_check("relu", &[normal(&[4, 6], 4)], |t, v| Ok(t.relu(v[0])))?);
    out.push(op_check("relu6", &[normal(&[4, 6], 5).map(|x| 4.0 * x)], |t, v| {
        Ok(t.relu6(v[0]))
    })?);
    out.push(op_check("global average pool", &[normal(&[2, 3, 3, 4], 6)], |t, v| {
        t.mean(v[0], &[1, 2])
    })?);
    out.push(op_check(
        "flatten and concat",
        &[normal(&[2, 2, 3], 7), normal(&[2, 4], 8)],
        |t, v| {
            let f = t.flatten(v[0])?;
            t.concat(&[f, v[1]])
        },
    )?);
    out.push(op_check(
        "mse loss",
        &[normal(&[5, 1], 9), normal(&[5, 1], 10)],
        |t, v| mse_loss(t, v[0], v[1]),
    )?);
    out.push(op_check(
        "conv2d same stride 2",
        &[normal(&[2, 5, 5, 3], 11), normal(&[3, 3, 3, 4], 12)],
        |t, v| t.conv2d(v[0], v[1], 2, Padding::Same),
    )?);
    out.push(op_check(
        "conv2d valid stride 1",
        &[normal(&[1, 5, 4, 2], 13), normal(&[2, 3, 2, 3], 14)],
        |t, v| t.conv2d(v[0], v[1], 1, Padding::Valid),
    )?);
    out.push(op_check(
        "depthwise conv2d same stride 2",
        &[normal(&[2, 5, 5, 3], 15), normal(&[3, 3, 3], 16)],
        |t, v| t.depthwise_conv2d(v[0], v[1], 2, Padding::Same),
    )?);

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 4, 3, Init::HeUniform { fan_in: 4 }, &mut g);
    out.push(layer_check("dense", &store, normal(&[5, 4], 17), |ctx, x| {
        dense.forward(ctx, x)
    })?);

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 6, 6, Init::HeUniform { fan_in: 6 }, &mut g);
    let drop = Dropout::new(0.3)?;
    out.push(layer_check(
        "dropout (train mode)",
        &store,
        normal(&[4, 6], 18),
        |ctx, x| {
            let y = dense.forward(ctx, x)?;
            Ok(drop.forward(ctx, y))
        },
    )?);

    let mut store = ParamStore::new();
    let norm = BatchNorm::new(&mut store, "norm", 3);
    // non-trivial affine parameters
    *store.get_mut(norm.gamma) = normal(&[3], 19).map(|x| 1.0 + 0.3 * x);
    *store.get_mut(norm.beta) = normal(&[3], 20);
    out.push(layer_check(
        "batch norm (train mode)",
        &store,
        normal(&[2, 3, 2, 3], 21),
        |ctx, x| norm.forward(ctx, x),
    )?);

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 3, 2, 4, 1, &mut g);
    out.push(layer_check(
        "conv2d layer",
        &store,
        normal(&[2, 4, 4, 2], 22),
        |ctx, x| conv.forward(ctx, x),
    )?);

    let mut store = ParamStore::new();
    let dw = DepthwiseConv::new(&mut store, "dw", 3, 3, 1, &mut g);
    out.push(layer_check(
        "depthwise layer",
        &store,
        normal(&[2, 4, 4, 3], 23),
        |ctx, x| dw.forward(ctx, x),
    )?);

    let mut store = ParamStore::new();
    let block = InvertedResidual::new(&mut store, "block", 3, 3, 1, 2, &mut g)?;
    out.push(layer_check(
        "inverted residual (skip)",
        &store,
        normal(&[2, 4, 4, 3], 24),
        |ctx, x| block.forward(ctx, x),
    )?);

    let mut store = ParamStore::new();
    let block = InvertedResidual::new(&mut store, "block", 2, 4, 2, 3, &mut g)?;
    out.push(layer_check(
        "inverted residual (stride 2)",
        &store,
        normal(&[2, 5, 5, 2], 25),
        |ctx, x| block.forward(ctx, x),
    )?);

    let mut store = ParamStore::new();
    let table = EmbeddingTable::new(&mut store, "embed", 6, 4, &mut g);
    let ids = TokenBatch::new(2, 4, vec![2, 3, 3, 0, 5, 1, 0, 0])?;
    let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.tensor.clone()).collect();
    inputs[0] = normal(&[6, 4], 26);
    out.push(GradCase {
        name: "embedding and pooling",
        report: gradcheck(
            |tape, _| {
                let mut ctx = ForwardCtx::eval(tape, &store);
                let (seq, pooled) = embed_and_pool(&mut ctx, &table, &ids)?;
                let a = probe(ctx.tape, seq, 3)?;
                let b = probe(ctx.tape, pooled, 4)?;
                ctx.tape.add(a, b)
            },
            &inputs,
            FD_STEP,
        )?,
        tolerance: LAYER_TOLERANCE,
    });

    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 4, 2, 3, &mut g)?;
    let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.tensor.clone()).collect();
    let (qi, ki) = (inputs.len(), inputs.len() + 1);
    inputs.push(normal(&[2, 3, 4], 27));
    inputs.push(normal(&[2, 5, 4], 28));
    out.push(GradCase {
        name: "cross attention",
        report: gradcheck(
            |tape, v| {
                let mut ctx = ForwardCtx::eval(tape, &store);
                let y = attn.forward(&mut ctx, v[qi], v[ki])?;
                probe(ctx.tape, y, 5)
            },
            &inputs,
            FD_STEP,
        )?,
        tolerance: LAYER_TOLERANCE,
    });
    Ok(out)
}

/// Architecture used for whole-model checks: the micro configuration on
/// small images so every parameter can be perturbed.
pub fn gradcheck_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        ..ArchConfig::micro()
    }
}

/// Train-mode forward plus MSE of a micro model, differentiated with
/// respect to every parameter.
pub fn gradcheck_model(kind: ModelKind, step: f64) -> Result<GradCase> {
    let cfg = gradcheck_arch();
    let model = Model::<f64>::build(kind, &cfg, 3)?;
    let b = 3;
    let s = cfg.image_size;
    let images = Tensor::uniform([b, s, s, 3], 0.0, 1.0, &mut rng(4));
    let targets = normal(&[b, 1], 5);
    let tokens = TokenBatch::new(
        b,
        cfg.max_tokens,
        (0..b * cfg.max_tokens).map(|i| (i * 7 + 3) % 11).collect(),
    )?;
    let text = (kind == ModelKind::Multimodal).then_some(&tokens);
    let inputs: Vec<Tensor<f64>> = model.store.params().iter().map(|p| p.tensor.clone()).collect();
    let report = gradcheck(
        |tape, _| {
            let mut gen = rng(6);
            let mut ctx = ForwardCtx::train(tape, &model.store, &mut gen);
            let x = ctx.tape.constant(images.clone());
            let pred = model.forward(&mut ctx, x, text)?;
            let y = ctx.tape.constant(targets.clone());
            mse_loss(ctx.tape, pred, y)
        },
        &inputs,
        step,
    )?;
    Ok(GradCase {
        name: match kind {
            ModelKind::Unimodal => "unimodal micro model",
            ModelKind::Multimodal => "multimodal micro model",
        },
        report,
        tolerance: MODEL_TOLERANCE,
    })
}

fn gradcheck_suite() -> Result<Vec<CheckOutcome>> {
    let mut cases = gradcheck_layers()?;
    cases.push(gradcheck_model(ModelKind::Unimodal, MODEL_FD_STEP)?);
    cases.push(gradcheck_model(ModelKind::Multimodal, MODEL_FD_STEP)?);
    Ok(cases
        .into_iter()
        .map(|c| {
            let detail = format!(
                "max relative error {:.2e} over {} coordinates (tolerance {:.0e})",
                c.report.max_rel_error, c.report.coordinates, c.tolerance
            );
            CheckOutcome::new(c.name, c.passed(), detail)
        })
        .collect())
}

// -------------------------------------------------------------------- stats

#[derive(Deserialize)]
struct ReportCase {
    y_true: Vec<f64>,
    y_pred: Vec<f64>,
    mae: f64,
    abs_err_std: f64,
    r2: f64,
}

#[derive(Deserialize)]
struct TTestCase {
    errors_a: Vec<f64>,
    errors_b: Vec<f64>,
    t: f64,
    p: f64,
    df: usize,
}

#[derive(Deserialize)]
struct TailCase {
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Fixtures {
    report_cases: Vec<ReportCase>,
    ttest_cases: Vec<TTestCase>,
    tail_cases: Vec<TailCase>,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Worst relative deviation from the frozen fixtures, per statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSummary {
    pub report_cases: usize,
    pub ttest_cases: usize,
    pub tail_cases: usize,
    pub report_failures: usize,
    pub ttest_failures: usize,
    pub tail_failures: usize,
    pub max_tail_error: f64,
}

pub fn check_stats_fixtures() -> Result<FixtureSummary> {
    let fx: Fixtures = serde_json::from_str(STATS_FIXTURES).map_err(|e| arg_err!("statistics fixtures: {e}"))?;
    let mut report_failures = 0;
    for c in &fx.report_cases {
        let ids = (0..c.y_true.len()).map(|i| i.to_string()).collect();
        let r = report(&PredictionSet::new(ids, c.y_true.clone(), c.y_pred.clone())?)?;
        let ok = rel_close(r.mae, c.mae, FIXTURE_TOLERANCE)
            && rel_close(r.abs_err_std, c.abs_err_std, FIXTURE_TOLERANCE)
            && rel_close(r.r2, c.r2, FIXTURE_TOLERANCE);
        report_failures += usize::from(!ok);
    }
    let mut ttest_failures = 0;
    for c in &fx.ttest_cases {
        let r = paired_t_test(&c.errors_a, &c.errors_b, 0.1)?;
        let ok =
            rel_close(r.t_stat, c.t, FIXTURE_TOLERANCE) && rel_close(r.p_value, c.p, FIXTURE_TOLERANCE) && r.df == c.df;
        ttest_failures += usize::from(!ok);
    }
    let mut tail_failures = 0;
    let mut max_tail_error = 0.0f64;
    for c in &fx.tail_cases {
        let err = (student_t_upper_tail(c.t, c.df) - c.p).abs();
        max_tail_error = max_tail_error.max(err);
        tail_failures += usize::from(err > TAIL_TOLERANCE);
    }
    Ok(FixtureSummary {
        report_cases: fx.report_cases.len(),
        ttest_cases: fx.ttest_cases.len(),
        tail_cases: fx.tail_cases.len(),
        report_failures,
        ttest_failures,
        tail_failures,
        max_tail_error,
    })
}

fn stats_suite() -> Result<Vec<CheckOutcome>> {
    let s = check_stats_fixtures()?;
    let p = student_t_upper_tail(0.6339, 652.0);
    Ok(vec![
        CheckOutcome::new(
            "report fixtures",
            s.report_failures == 0,
            format!(
                "{}/{} cases within {FIXTURE_TOLERANCE:.0e}",
                s.report_cases - s.report_failures,
                s.report_cases
            ),
        ),
        CheckOutcome::new(
            "paired t-test fixtures",
            s.ttest_failures == 0,
            format!(
                "{}/{} cases within {FIXTURE_TOLERANCE:.0e}",
                s.ttest_cases - s.ttest_failures,
                s.ttest_cases
            ),
        ),
        CheckOutcome::new(
            "Student t tail fixtures",
            s.tail_failures == 0,
            format!(
                "{}/{} cases, max abs error {:.1e}",
                s.tail_cases - s.tail_failures,
                s.tail_cases,
                s.max_tail_error
            ),
        ),
        CheckOutcome::new(
            "tail at t = 0.6339, df = 652",
            (0.2603..=0.2643).contains(&p),
            format!("p = {p:.6}, band [0.2603, 0.2643]"),
        ),
    ])
}

// ----------------------------------------------------------------- pipeline

fn pipeline_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let a = synth_generate(40, 5, 0.5)?;
    let b = synth_generate(40, 5, 0.5)?;
    out.push(CheckOutcome::new(
        "synthetic data determinism",
        a.records == b.records,
        "same seed gives identical records",
    ));

    let parts = split(&a.records, 0.8, 3)?;
    let mut ids: Vec<&str> = parts
        .train
        .iter()
        .chain(&parts.test)
        .map(|r| r.dish_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut all: Vec<&str> = a.records.iter().map(|r| r.dish_id.as_str()).collect();
    all.sort_unstable();
    out.push(CheckOutcome::new(
        "split is a partition",
        ids == all && parts.train.len() == 32,
        format!(
            "{} train + {} test of {}",
            parts.train.len(),
            parts.test.len(),
            a.records.len()
        ),
    ));

    let policy = Some(AugmentPolicy::default());
    let collect =
        || -> Result<Vec<_>> { make_batches(&a.records, 16, None, 32, 9, true, policy, &a.images)?.collect() };
    let (b1, b2) = (collect()?, collect()?);
    let in_range = b1
        .iter()
        .all(|b| b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    out.push(CheckOutcome::new(
        "batching determinism",
        b1 == b2 && in_range,
        format!("{} batches bitwise identical, pixels in [0, 1]", b1.len()),
    ));

    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        arch: ArchConfig {
            image_size: 16,
            ..ArchConfig::micro()
        },
        ..TrainConfig::default()
    };
    let r1 = run_experiment::<f32>(ModelKind::Multimodal, &a.records, &a.images, &cfg)?;
    let r2 = run_experiment::<f32>(ModelKind::Multimodal, &a.records, &a.images, &cfg)?;
    out.push(CheckOutcome::new(
        "training determinism",
        r1.model == r2.model && r1.predictions == r2.predictions,
        "two seeded runs give identical parameters and predictions",
    ));

    let bytes = encode_checkpoint(&r1.model, &r1.state, r1.vectorizer.as_ref(), None);
    let back = decode_checkpoint::<f32>(&bytes)?;
    out.push(CheckOutcome::new(
        "checkpoint round trip",
        back.model == r1.model && back.state == r1.state && back.vectorizer == r1.vectorizer,
        format!("{} bytes restored bitwise", bytes.len()),
    ));
    Ok(out)
}
