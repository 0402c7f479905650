//! Test-set statistics, the one-tailed paired t-test and predicted-vs-true
//! scatter output.

mod dist;
mod scatter;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use self::dist::{beta_inc, ln_beta, ln_gamma, student_t_upper_tail};
pub use self::scatter::{scatter_csv, scatter_emit, scatter_svg, SCATTER_HEADER};

use crate::data::{make_batches, DishRecord, ImageSource};
use crate::error::{arg_err, Error, Result};
use crate::model::Model;
use crate::nn::Vectorizer;
use crate::tensor::Scalar;

/// Paired true and predicted calories, matched by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub dish_ids: Vec<String>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
}

impl PredictionSet {
    pub fn new(dish_ids: Vec<String>, y_true: Vec<f64>, y_pred: Vec<f64>) -> Result<Self> {
        if dish_ids.len() != y_true.len() || y_true.len() != y_pred.len() {
            return Err(arg_err!(
                "prediction set lengths differ: {} ids, {} true, {} predicted",
                dish_ids.len(),
                y_true.len(),
                y_pred.len()
            ));
        }
        Ok(PredictionSet {
            dish_ids,
            y_true,
            y_pred,
        })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    /// `|y_pred − y_true|` per dish.
    pub fn abs_errors(&self) -> Vec<f64> {
        self.y_true
            .iter()
            .zip(&self.y_pred)
            .map(|(t, p)| (p - t).abs())
            .collect()
    }

    /// Parses the scatter data format written by [`scatter_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| arg_err!("predictions: {e}"))?.clone();
        let want: Vec<&str> = SCATTER_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(arg_err!("predictions: expected header `{SCATTER_HEADER}`"));
        }
        let (mut ids, mut yt, mut yp) = (Vec::new(), Vec::new(), Vec::new());
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| arg_err!("predictions row {}: {e}", line + 2))?;
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| arg_err!("predictions row {}: bad number `{}`", line + 2, &row[i]))
            };
            ids.push(row[0].to_string());
            yt.push(num(1)?);
            yp.push(num(2)?);
        }
        PredictionSet::new(ids, yt, yp)
    }

    /// Absolute errors of both sets ordered by `a`'s dish ids. The id sets
    /// must be identical; a mismatch names up to five offenders.
    pub fn paired_errors(a: &PredictionSet, b: &PredictionSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let index = |ps: &PredictionSet| -> Result<std::collections::HashMap<String, usize>> {
            let mut map = std::collections::HashMap::with_capacity(ps.len());
            for (i, id) in ps.dish_ids.iter().enumerate() {
                if map.insert(id.clone(), i).is_some() {
                    return Err(Error::Pairing(format!("dish id `{id}` appears more than once")));
                }
            }
            Ok(map)
        };
        let (ia, ib) = (index(a)?, index(b)?);
        let mut offenders: Vec<String> = a
            .dish_ids
            .iter()
            .filter(|id| !ib.contains_key(*id))
            .map(|id| format!("{id} (only in A)"))
            .chain(
                b.dish_ids
                    .iter()
                    .filter(|id| !ia.contains_key(*id))
                    .map(|id| format!("{id} (only in B)")),
            )
            .collect();
        if !offenders.is_empty() {
            let total = offenders.len();
            offenders.truncate(5);
            return Err(Error::Pairing(format!(
                "{total} dish ids are not shared by both evaluations: {}",
                offenders.join(", ")
            )));
        }
        let (ea, eb) = (a.abs_errors(), b.abs_errors());
        let eb_aligned = a.dish_ids.iter().map(|id| eb[ib[id]]).collect();
        Ok((ea, eb_aligned))
    }
}

/// Summary statistics of one model on one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Sample standard deviation (n − 1 divisor) of the absolute errors.
    pub abs_err_std: f64,
    pub r2: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        format!(
            "mae={}\nabs_err_std={}\nr2={}\nn={}\n",
            self.mae, self.abs_err_std, self.r2, self.n
        )
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the n − 1 divisor.
fn sample_sd(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn report(ps: &PredictionSet) -> Result<EvalReport> {
    let n = ps.len();
    if n < 2 {
        return Err(arg_err!("a report needs at least 2 predictions, got {n}"));
    }
    if ps.y_pred.len() != n {
        return Err(arg_err!("{} predictions for {n} true values", ps.y_pred.len()));
    }
    let err = ps.abs_errors();
    let mae = mean(&err);
    let abs_err_std = sample_sd(&err, mae);
    let y_mean = mean(&ps.y_true);
    let ss_tot: f64 = ps.y_true.iter().map(|y| (y - y_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = ps.y_true.iter().zip(&ps.y_pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(EvalReport {
        mae,
        abs_err_std,
        r2: 1.0 - ss_res / ss_tot,
        n,
    })
}

/// Outcome of the one-tailed paired t-test of `H₁: μ_d > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_stat: f64,
    pub p_value: f64,
    pub df: usize,
    /// Mean and sample standard deviation of the differences; absent when
    /// the result was built from published summary values.
    pub mean_diff: Option<f64>,
    pub sd_diff: Option<f64>,
    pub alpha: f64,
    pub reject_null: bool,
    pub n: usize,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(arg_err!("alpha must lie in (0, 1), got {alpha}"))
    }
}

impl TTestResult {
    /// A result from reported values, e.g. a published `t`, `p` and `n`.
    pub fn from_published(t_stat: f64, p_value: f64, n: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if n < 2 {
            return Err(arg_err!("n must be at least 2, got {n}"));
        }
        if !(0.0..=1.0).contains(&p_value) {
            return Err(arg_err!("p-value must lie in [0, 1], got {p_value}"));
        }
        Ok(TTestResult {
            t_stat,
            p_value,
            df: n - 1,
            mean_diff: None,
            sd_diff: None,
            alpha,
            reject_null: p_value < alpha,
            n,
        })
    }
}

/// Paired t-test on `d_i = errors_a_i − errors_b_i`; the alternative is
/// that `a` has the larger mean error.
pub fn paired_t_test(errors_a: &[f64], errors_b: &[f64], alpha: f64) -> Result<TTestResult> {
    check_alpha(alpha)?;
    if errors_a.len() != errors_b.len() {
        return Err(arg_err!(
            "paired samples differ in length: {} vs {}",
            errors_a.len(),
            errors_b.len()
        ));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(arg_err!("a paired t-test needs at least 2 pairs, got {n}"));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(arg_err!("paired samples contain non-finite values"));
    }
    let m = mean(&d);
    let sd = sample_sd(&d, m);
    let t_stat = if sd > 0.0 {
        m * (n as f64).sqrt() / sd
    } else if m == 0.0 {
        // every difference is zero
        0.0
    } else {
        return Err(Error::DegenerateVariance(format!(
            "all {n} differences equal {m}; the t statistic is unbounded"
        )));
    };
    let p_value = student_t_upper_tail(t_stat, (n - 1) as f64);
    Ok(TTestResult {
        t_stat,
        p_value,
        df: n - 1,
        mean_diff: Some(m),
        sd_diff: Some(sd),
        alpha,
        reject_null: p_value < alpha,
        n,
    })
}

/// Side-by-side summary of a baseline (`uni`) and a candidate (`multi`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub uni: EvalReport,
    pub multi: EvalReport,
    /// `mae_uni − mae_multi`; positive when the candidate is better.
    pub mae_reduction: f64,
    /// `abs_err_std_uni − abs_err_std_multi`.
    pub sd_reduction: f64,
    /// `r2_multi − r2_uni`.
    pub r2_gain: f64,
    pub ttest: TTestResult,
}

pub fn compare(uni: &EvalReport, multi: &EvalReport, ttest: &TTestResult) -> Result<Comparison> {
    if uni.n != multi.n || uni.n != ttest.n {
        return Err(arg_err!(
            "comparison sizes differ: {} vs {} reports, {} t-test pairs",
            uni.n,
            multi.n,
            ttest.n
        ));
    }
    Ok(Comparison {
        uni: *uni,
        multi: *multi,
        mae_reduction: uni.mae - multi.mae,
        sd_reduction: uni.abs_err_std - multi.abs_err_std,
        r2_gain: multi.r2 - uni.r2,
        ttest: *ttest,
    })
}

impl Comparison {
    pub fn verdict(&self) -> &'static str {
        if self.ttest.reject_null {
            "reject H0"
        } else {
            "fail to reject H0"
        }
    }

    /// Machine-readable `key=value` lines with stable names.
    pub fn to_kv(&self) -> String {
        let t = &self.ttest;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("n", &t.n);
        put("mae_uni", &self.uni.mae);
        put("mae_multi", &self.multi.mae);
        put("abs_err_std_uni", &self.uni.abs_err_std);
        put("abs_err_std_multi", &self.multi.abs_err_std);
        put("r2_uni", &self.uni.r2);
        put("r2_multi", &self.multi.r2);
        put("mae_reduction", &self.mae_reduction);
        put("abs_err_std_reduction", &self.sd_reduction);
        put("r2_gain", &self.r2_gain);
        put("t_stat", &t.t_stat);
        put("df", &t.df);
        put("p_value", &t.p_value);
        put("alpha", &t.alpha);
        put("reject_null", &t.reject_null);
        s
    }

    pub fn to_text(&self) -> String {
        let t = &self.ttest;
        let mut s = String::new();
        let _ = writeln!(s, "paired comparison over {} dishes (A = baseline, B = candidate)", t.n);
        let _ = writeln!(s, "{:<22}{:>12}{:>12}{:>12}", "", "A", "B", "A - B");
        let _ = writeln!(
            s,
            "{:<22}{:>12.2}{:>12.2}{:>12.2}",
            "MAE (kcal)", self.uni.mae, self.multi.mae, self.mae_reduction
        );
        let _ = writeln!(
            s,
            "{:<22}{:>12.2}{:>12.2}{:>12.2}",
            "sd of |error| (kcal)", self.uni.abs_err_std, self.multi.abs_err_std, self.sd_reduction
        );
        let _ = writeln!(
            s,
            "{:<22}{:>12.4}{:>12.4}{:>12.4}",
            "R2", self.uni.r2, self.multi.r2, -self.r2_gain
        );
        let _ = writeln!(s, "H0: mean(|e_A| - |e_B|) = 0 vs H1: > 0");
        let _ = writeln!(s, "t = {:.4}, df = {}, one-tailed p = {:.4}", t.t_stat, t.df, t.p_value);
        let _ = writeln!(s, "alpha = {}: {}", t.alpha, self.verdict());
        s
    }
}

/// Evaluation-mode predictions for `records`, in input order and without
/// augmentation.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[DishRecord],
    vectorizer: Option<&Vectorizer>,
    images: &dyn ImageSource,
    batch_size: usize,
) -> Result<PredictionSet> {
    if records.is_empty() {
        return Err(arg_err!("cannot evaluate on an empty test set"));
    }
    let size = model.config().image_size;
    let mut ids = Vec::with_capacity(records.len());
    let mut y_true = Vec::with_capacity(records.len());
    let mut y_pred = Vec::with_capacity(records.len());
    for batch in make_batches(records, batch_size, vectorizer, size, 0, false, None, images)? {
        let batch = batch?;
        let pred = model.predict(&batch.images.cast(), batch.tokens.as_ref())?;
        y_pred.extend(pred.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)));
        ids.extend(batch.dish_ids);
    }
    for r in records {
        y_true.push(r.calories);
    }
    PredictionSet::new(ids, y_true, y_pred)
}
