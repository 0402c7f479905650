//! Dataset ingestion, splitting, image loading and augmentation, batching,
//! and the synthetic dataset generator.
//!
//! On disk a dataset directory holds `metadata.csv` (columns `dish_id`,
//! `dish_name`, `total_calories`; others ignored) and `images/<dish_id>.png`.

mod batch;
mod image;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::batch::{epoch_seed, make_batches, Batch, BatchIter};
pub use self::image::{
    augment, load_image, resize_bilinear, rgb_to_tensor, AugmentDraw, AugmentPolicy, DiskImages, ImageSource,
    InvertMode, MemoryImages,
};
pub use self::synth::{synth_generate, SynthDataset, SynthTruth, SYNTH_IMAGE_SIZE, SYNTH_MIN_RECORDS};

use crate::error::{arg_err, Error, Result};

pub const METADATA_FILE: &str = "metadata.csv";
pub const IMAGE_DIR: &str = "images";
pub const DEFAULT_MIN_KCAL: f64 = 1.0;
pub const DEFAULT_MAX_KCAL: f64 = 3000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishRecord {
    pub dish_id: String,
    pub dish_name: String,
    /// kcal, finite and positive.
    pub calories: f64,
    pub image_path: PathBuf,
}

/// Outcome of reading a metadata file.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub records: Vec<DishRecord>,
    /// Rows rejected by the filters.
    pub dropped: usize,
}

/// Reads `dish_id,dish_name,total_calories` rows, dropping rows whose name is
/// empty, whose calories are missing or non-numeric, or whose calories fall
/// outside `[min_kcal, max_kcal]`. Image paths resolve to
/// `<csv dir>/images/<dish_id>.png`.
pub fn load_metadata(csv_path: &Path, min_kcal: f64, max_kcal: f64) -> Result<Metadata> {
    if !(min_kcal <= max_kcal) {
        return Err(arg_err!("calorie range [{min_kcal}, {max_kcal}] is empty"));
    }
    let bytes = fs::read(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let image_root = csv_path.parent().unwrap_or(Path::new(".")).join(IMAGE_DIR);
    parse_metadata(&bytes, csv_path, &image_root, min_kcal, max_kcal)
}

fn parse_metadata(bytes: &[u8], path: &Path, image_root: &Path, min_kcal: f64, max_kcal: f64) -> Result<Metadata> {
    let meta_err = |message: String| Error::Metadata {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| meta_err(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| meta_err(format!("missing required column {name:?}")))
    };
    let (id_col, name_col, kcal_col) = (column("dish_id")?, column("dish_name")?, column("total_calories")?);

    let mut records = Vec::new();
    let mut dropped = 0;
    for row in reader.records() {
        let row = row.map_err(|e| meta_err(e.to_string()))?;
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
        let (id, name) = (field(id_col), field(name_col));
        let kcal = field(kcal_col).parse::<f64>().ok();
        match kcal {
            Some(k)
                if !id.is_empty()
                    && !name.is_empty()
                    && k.is_finite()
                    && k > 0.0
                    && (min_kcal..=max_kcal).contains(&k) =>
            {
                records.push(DishRecord {
                    dish_id: id.to_string(),
                    dish_name: name.to_string(),
                    calories: k,
                    image_path: image_root.join(format!("{id}.png")),
                });
            }
            _ => dropped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
            dropped,
        });
    }
    Ok(Metadata { records, dropped })
}

/// Renders records in the metadata layout read by [`load_metadata`].
pub fn metadata_csv(records: &[DishRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dish_id", "dish_name", "total_calories"])
        .expect("in-memory write");
    for r in records {
        w.write_record([r.dish_id.as_str(), r.dish_name.as_str(), &format!("{}", r.calories)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<DishRecord>,
    pub test: Vec<DishRecord>,
    pub seed: u64,
}

/// Shuffles with a generator seeded by `seed` and sends the first
/// `floor(ratio·N)` records to the training side.
pub fn split(records: &[DishRecord], ratio: f64, seed: u64) -> Result<SplitDataset> {
    if records.len() < 2 {
        return Err(arg_err!("need at least 2 records to split, got {}", records.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(arg_err!("split ratio must lie in (0, 1), got {ratio}"));
    }
    let n_train = (ratio * records.len() as f64).floor() as usize;
    if n_train == 0 || n_train == records.len() {
        return Err(arg_err!(
            "ratio {ratio} leaves one side of a {}-record split empty",
            records.len()
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(SplitDataset {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        seed,
    })
}

/// Records plus the image source that serves them.
pub struct Dataset {
    pub records: Vec<DishRecord>,
    /// Rows removed by the metadata filters.
    pub dropped: usize,
    /// Records removed because their image file does not exist.
    pub missing_images: usize,
    pub images: Box<dyn ImageSource>,
    metadata_digest: [u8; 32],
}

impl Dataset {
    /// Opens `<dir>/metadata.csv` and `<dir>/images/`.
    pub fn open(dir: &Path, min_kcal: f64, max_kcal: f64) -> Result<Self> {
        let csv_path = dir.join(METADATA_FILE);
        let bytes = fs::read(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let meta = parse_metadata(&bytes, &csv_path, &dir.join(IMAGE_DIR), min_kcal, max_kcal)?;
        let total = meta.records.len();
        let records: Vec<DishRecord> = meta.records.into_iter().filter(|r| r.image_path.is_file()).collect();
        let missing_images = total - records.len();
        if records.is_empty() {
            return Err(Error::EmptyDataset {
                path: csv_path,
                dropped: meta.dropped + missing_images,
            });
        }
        Ok(Dataset {
            records,
            dropped: meta.dropped,
            missing_images,
            images: Box::new(DiskImages::new()),
            metadata_digest: Sha256::digest(&bytes).into(),
        })
    }

    pub(crate) fn in_memory(records: Vec<DishRecord>, images: MemoryImages) -> Self {
        let digest = Sha256::digest(metadata_csv(&records).as_bytes()).into();
        Dataset {
            records,
            dropped: 0,
            missing_images: 0,
            images: Box::new(images),
            metadata_digest: digest,
        }
    }

    /// Hex sha256 over the metadata bytes and the split seed.
    pub fn fingerprint(&self, split_seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(self.metadata_digest);
        h.update(split_seed.to_le_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
