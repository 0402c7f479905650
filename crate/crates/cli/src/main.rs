mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use calnet_core::data::{synth_generate, Dataset};
use calnet_core::experiment::{init_model, prepare};
use calnet_core::stats::scatter_emit;
use calnet_core::train::{load_checkpoint, save_checkpoint, RunInfo, TrainData};
use calnet_core::verify::{run_suite, Suite};
use calnet_core::{compare, evaluate, paired_t_test, report, ModelKind, PredictionSet, TrainState};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Overrides;
use crate::manifest::{unix_now, DatasetInfo, RunManifest, MANIFEST_FILE};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "log.csv";
const REPORT_FILE: &str = "report.txt";
const PREDICTIONS_PREFIX: &str = "predictions";
const COMPARISON_TEXT: &str = "comparison.txt";
const COMPARISON_KV: &str = "comparison.kv";

/// Calorie regression from dish photos, with and without dish names.
#[derive(Debug, Parser)]
#[command(name = "calnet", version)]
struct Cli {
    /// Parent of default output directories when --out is omitted.
    #[arg(long, env = "CALNET_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Unimodal,
    Multimodal,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Unimodal => ModelKind::Unimodal,
            Kind::Multimodal => ModelKind::Multimodal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitSide {
    /// Held-out records of the training run's split.
    Test,
    /// Every record that passes the metadata filters.
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    Stats,
    Pipeline,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset in the metadata.csv + images/ layout.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of calorie variance carried by dish names (0 disables).
        #[arg(long, default_value_t = 0.5)]
        text_signal: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write checkpoint, loss log and manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: Kind,
        /// TOML file with TrainConfig keys; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict on a dataset and write the report and scatter files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitSide,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        force: bool,
    },
    /// Paired one-tailed t-test of absolute errors, A minus B.
    Compare {
        /// Eval output directory or predictions CSV of the baseline.
        #[arg(long)]
        eval_a: PathBuf,
        /// Eval output directory or predictions CSV of the candidate.
        #[arg(long)]
        eval_b: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run an invariant suite; exits non-zero on any failure.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            bail!("{} exists and is not empty; pass --force to replace it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(out: &Path, n: usize, seed: u64, text_signal: f64, force: bool) -> Result<()> {
    // validate before touching the filesystem
    let ds = synth_generate(n, seed, text_signal)?;
    prepare_out(out, force)?;
    ds.export(out)?;
    println!("wrote {n} synthetic dishes to {}", out.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    kind: ModelKind,
    cfg_file: Option<&Path>,
    flags: &Overrides,
    out: &Path,
    force: bool,
) -> Result<()> {
    let started = unix_now();
    let cfg = config::resolve(cfg_file, flags)?;
    let ds = Dataset::open(data, cfg.min_kcal, cfg.max_kcal)?;
    let (parts, vectorizer) = prepare(&ds.records, kind, &cfg)?;
    prepare_out(out, force)?;

    let mut model = init_model::<f32>(kind, &cfg, &parts.train)?;
    let mut state = TrainState::new(&model.store);
    let train_data = TrainData {
        records: &parts.train,
        images: ds.images.as_ref(),
        vectorizer: vectorizer.as_ref(),
    };
    let log = calnet_core::train(&mut model, &mut state, &train_data, &cfg)?;

    let fingerprint = ds.fingerprint(cfg.seed);
    let run = RunInfo {
        train_config: cfg.clone(),
        dataset_fingerprint: fingerprint.clone(),
        split_seed: cfg.seed,
        split_ratio: cfg.split_ratio,
    };
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &model,
        &state,
        vectorizer.as_ref(),
        Some(&run),
    )?;
    write(out, LOG_FILE, log.to_csv())?;

    let mut manifest = RunManifest::new("train", started);
    manifest.config = Some(cfg);
    manifest.dataset = Some(DatasetInfo {
        path: data.display().to_string(),
        fingerprint,
        records: ds.records.len(),
        train: parts.train.len(),
        test: parts.test.len(),
    });
    manifest.artifacts = vec![CHECKPOINT_FILE.into(), LOG_FILE.into(), MANIFEST_FILE.into()];
    manifest.epoch_seconds = log.epochs.iter().map(|e| e.seconds).collect();
    manifest.write(out)?;
    let last = log.epochs.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "trained {kind} for {} epochs on {} dishes, final loss {last:.2}; outputs in {}",
        log.epochs.len(),
        parts.train.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, side: SplitSide, batch_size: usize, out: &Path, force: bool) -> Result<()> {
    let started = unix_now();
    let ck = load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let defaults = calnet_core::TrainConfig::default();
    let (min_kcal, max_kcal) = ck.run.as_ref().map_or((defaults.min_kcal, defaults.max_kcal), |r| {
        (r.train_config.min_kcal, r.train_config.max_kcal)
    });
    let ds = Dataset::open(data, min_kcal, max_kcal)?;

    let mut mismatch = None;
    let (records, fingerprint, counts) = match (&ck.run, side) {
        (Some(run), _) => {
            let fingerprint = ds.fingerprint(run.split_seed);
            if fingerprint != run.dataset_fingerprint {
                eprintln!(
                    "warning: dataset fingerprint {} differs from the checkpoint's {}; the split may not match training",
                    &fingerprint[..12],
                    &run.dataset_fingerprint[..12.min(run.dataset_fingerprint.len())]
                );
            }
            mismatch = Some(fingerprint != run.dataset_fingerprint);
            let parts = calnet_core::data::split(&ds.records, run.split_ratio, run.split_seed)?;
            let counts = (parts.train.len(), parts.test.len());
            let records = match side {
                SplitSide::Test => parts.test,
                SplitSide::All => ds.records.clone(),
            };
            (records, fingerprint, counts)
        }
        (None, SplitSide::All) => (ds.records.clone(), ds.fingerprint(0), (0, ds.records.len())),
        (None, SplitSide::Test) => bail!("checkpoint has no run information to rebuild the split; use --split all"),
    };

    let predictions = evaluate(
        &ck.model,
        &records,
        ck.vectorizer.as_ref(),
        ds.images.as_ref(),
        batch_size,
    )?;
    let rep = report(&predictions)?;
    prepare_out(out, force)?;
    write(out, REPORT_FILE, rep.to_kv())?;
    let (csv, svg) = scatter_emit(&predictions, &out.join(PREDICTIONS_PREFIX))?;

    let mut manifest = RunManifest::new("eval", started);
    manifest.config = ck.run.as_ref().map(|r| r.train_config.clone());
    manifest.dataset = Some(DatasetInfo {
        path: data.display().to_string(),
        fingerprint,
        records: ds.records.len(),
        train: counts.0,
        test: counts.1,
    });
    manifest.fingerprint_mismatch = mismatch;
    let name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    manifest.artifacts = vec![REPORT_FILE.into(), name(&csv), name(&svg), MANIFEST_FILE.into()];
    manifest.write(out)?;
    print!("{}", rep.to_kv());
    Ok(())
}

/// Accepts an eval directory or a predictions CSV.
fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let file = if path.is_dir() {
        path.join(format!("{PREDICTIONS_PREFIX}.csv"))
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    PredictionSet::from_csv(&text).with_context(|| format!("in {}", file.display()))
}

fn cmd_compare(a: &Path, b: &Path, alpha: f64, out: &Path, force: bool) -> Result<()> {
    let started = unix_now();
    let (pa, pb) = (read_predictions(a)?, read_predictions(b)?);
    let (ea, eb) = PredictionSet::paired_errors(&pa, &pb)?;
    let ttest = paired_t_test(&ea, &eb, alpha)?;
    let cmp = compare(&report(&pa)?, &report(&pb)?, &ttest)?;
    prepare_out(out, force)?;
    write(out, COMPARISON_TEXT, cmp.to_text())?;
    write(out, COMPARISON_KV, cmp.to_kv())?;
    let mut manifest = RunManifest::new("compare", started);
    manifest.artifacts = vec![COMPARISON_TEXT.into(), COMPARISON_KV.into(), MANIFEST_FILE.into()];
    manifest.write(out)?;
    print!("{}", cmp.to_text());
    Ok(())
}

fn cmd_verify(which: SuiteArg) -> Result<bool> {
    let suites = match which {
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::Stats => vec![Suite::Stats],
        SuiteArg::Pipeline => vec![Suite::Pipeline],
        SuiteArg::All => vec![Suite::Stats, Suite::Pipeline, Suite::Gradcheck],
    };
    let mut ok = true;
    for s in suites {
        let rep = run_suite(s)?;
        print!("{}", rep.to_text());
        ok &= rep.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let root = &cli.out_root;
    let default_out = |out: Option<PathBuf>, name: String| out.unwrap_or_else(|| root.join(name));
    match cli.command {
        Command::Synth {
            n,
            seed,
            text_signal,
            out,
            force,
        } => {
            let out = default_out(out, format!("synth-n{n}-seed{seed}"));
            cmd_synth(&out, n, seed, text_signal, force)?;
        }
        Command::Train {
            data,
            model,
            config,
            out,
            force,
            overrides,
        } => {
            let kind = ModelKind::from(model);
            let out = default_out(out, format!("train-{kind}-seed{}", overrides.seed.unwrap_or(0)));
            cmd_train(&data, kind, config.as_deref(), &overrides, &out, force)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            batch_size,
            force,
        } => {
            let parent = checkpoint
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned());
            let out = default_out(out, format!("eval-{}", parent.unwrap_or_else(|| "checkpoint".into())));
            let started = Instant::now();
            cmd_eval(&checkpoint, &data, split, batch_size, &out, force)?;
            eprintln!("evaluated in {:.1}s", started.elapsed().as_secs_f64());
        }
        Command::Compare {
            eval_a,
            eval_b,
            alpha,
            out,
            force,
        } => {
            let out = default_out(out, "compare".into());
            cmd_compare(&eval_a, &eval_b, alpha, &out, force)?;
        }
        Command::Verify { suite } => return cmd_verify(suite),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
