use std::fs;
use std::path::{Path, PathBuf};

use ::image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{metadata_csv, Dataset, DishRecord, MemoryImages, IMAGE_DIR, METADATA_FILE};
use crate::error::{arg_err, Error, Result};

pub const SYNTH_MIN_RECORDS: usize = 10;
/// Side length of generated images.
pub const SYNTH_IMAGE_SIZE: usize = 64;
pub const SYNTH_META_FILE: &str = "synth_meta.json";

const BASE_KCAL: f64 = 600.0;
/// Standard deviation shared by the image factor and the text factor.
const FACTOR_SD: f64 = 0.35;
const AREA_RANGE: (f64, f64) = (0.05, 0.45);
const STYLES: [&str; 6] = ["grilled", "fresh", "baked", "spicy", "roasted", "steamed"];
const DISHES: [&str; 8] = ["salad", "soup", "pasta", "steak", "curry", "burger", "rice", "cake"];
const BACKGROUND: [u8; 3] = [24, 20, 28];

/// Description of the generating process, exported beside the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub n: usize,
    pub seed: u64,
    /// Weight `s` of the text factor; 0 means names carry no information.
    pub text_signal: f64,
    pub base_kcal: f64,
    pub image_size: usize,
    /// Mean and standard deviation of the covered-area fraction under the
    /// drawing distribution.
    pub area_mean: f64,
    pub area_sd: f64,
    pub factor_sd: f64,
    /// Calorie multiplier `g` of each dish token.
    pub dish_multipliers: Vec<(String, f64)>,
    /// Tokens that never affect calories.
    pub style_tokens: Vec<String>,
    pub formula: String,
}

impl SynthTruth {
    fn new(n: usize, seed: u64, text_signal: f64) -> Self {
        let (lo, hi) = AREA_RANGE;
        // equally spaced, standardized to zero mean and unit variance
        let k = DISHES.len();
        let raw: Vec<f64> = (0..k).map(|j| -1.0 + 2.0 * j as f64 / (k - 1) as f64).collect();
        let sd = (raw.iter().map(|z| z * z).sum::<f64>() / k as f64).sqrt();
        SynthTruth {
            n,
            seed,
            text_signal,
            base_kcal: BASE_KCAL,
            image_size: SYNTH_IMAGE_SIZE,
            area_mean: (lo + hi) / 2.0,
            area_sd: (hi - lo) / 12f64.sqrt(),
            factor_sd: FACTOR_SD,
            dish_multipliers: DISHES
                .iter()
                .zip(&raw)
                .map(|(d, z)| (d.to_string(), 1.0 + FACTOR_SD * z / sd))
                .collect(),
            style_tokens: STYLES.iter().map(|s| s.to_string()).collect(),
            formula: "kcal = base·(1−s)·f(A) + base·s·g(dish); f(A) = 1 + factor_sd·(A − area_mean)/area_sd; \
                      A = fraction of pixels covered by blobs"
                .into(),
        }
    }

    /// Image factor for a covered fraction `area`.
    pub fn area_factor(&self, area: f64) -> f64 {
        1.0 + self.factor_sd * (area - self.area_mean) / self.area_sd
    }

    pub fn calories(&self, area: f64, dish: usize) -> f64 {
        let s = self.text_signal;
        self.base_kcal * ((1.0 - s) * self.area_factor(area) + s * self.dish_multipliers[dish].1)
    }
}

pub struct SynthDataset {
    pub records: Vec<DishRecord>,
    pub images: MemoryImages,
    pub truth: SynthTruth,
    /// Covered-area fraction of each record's image.
    pub areas: Vec<f64>,
    /// Index into `truth.dish_multipliers` of each record's dish token.
    pub dishes: Vec<usize>,
}

/// Generates `n` dishes: blob images whose covered area drives one part of
/// the calories and names whose dish token drives the rest, mixed by
/// `text_signal`.
pub fn synth_generate(n: usize, seed: u64, text_signal: f64) -> Result<SynthDataset> {
    if n < SYNTH_MIN_RECORDS {
        return Err(arg_err!(
            "synthetic datasets need at least {SYNTH_MIN_RECORDS} records, got {n}"
        ));
    }
    if !(0.0..=1.0).contains(&text_signal) {
        return Err(arg_err!("text_signal must lie in [0, 1], got {text_signal}"));
    }
    let truth = SynthTruth::new(n, seed, text_signal);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut images = MemoryImages::new();
    let mut areas = Vec::with_capacity(n);
    let mut dishes = Vec::with_capacity(n);
    for i in 0..n {
        let (img, area) = draw_image(&mut rng, SYNTH_IMAGE_SIZE);
        let dish = rng.random_range(0..DISHES.len());
        let style = STYLES[rng.random_range(0..STYLES.len())];
        let dish_id = format!("dish_{i:05}");
        records.push(DishRecord {
            dish_id: dish_id.clone(),
            dish_name: format!("{style} {}", DISHES[dish]),
            calories: truth.calories(area, dish),
            image_path: PathBuf::from(IMAGE_DIR).join(format!("{dish_id}.png")),
        });
        images.insert(dish_id, img);
        areas.push(area);
        dishes.push(dish);
    }
    Ok(SynthDataset {
        records,
        images,
        truth,
        areas,
        dishes,
    })
}

/// Draws one to three bright discs on a dark background; returns the image
/// and the fraction of pixels covered.
fn draw_image(rng: &mut ChaCha8Rng, size: usize) -> (RgbImage, f64) {
    let target = rng.random_range(AREA_RANGE.0..AREA_RANGE.1);
    let blobs = rng.random_range(1..=3usize);
    let weights: Vec<f64> = (0..blobs).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let side = size as f64;
    let mut discs: Vec<(f64, f64, f64, [u8; 3])> = Vec::with_capacity(blobs);
    for w in &weights {
        let r = (target * w / total * side * side / std::f64::consts::PI).sqrt();
        // keep discs apart so the covered area tracks the target
        let mut centre = (0.0, 0.0);
        for _ in 0..64 {
            centre = (rng.random_range(r..=side - r), rng.random_range(r..=side - r));
            let clear = discs
                .iter()
                .all(|(cx, cy, cr, _)| (centre.0 - cx).hypot(centre.1 - cy) >= r + cr);
            if clear {
                break;
            }
        }
        let color = [
            rng.random_range(120..=255u8),
            rng.random_range(120..=255u8),
            rng.random_range(120..=255u8),
        ];
        discs.push((centre.0, centre.1, r, color));
    }
    let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb(BACKGROUND));
    let mut covered = 0usize;
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        if let Some(&(_, _, _, color)) = discs
            .iter()
            .rev()
            .find(|(cx, cy, r, _)| (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r)
        {
            *px = Rgb(color);
            covered += 1;
        }
    }
    (img, covered as f64 / (size * size) as f64)
}

impl SynthDataset {
    pub fn into_dataset(self) -> Dataset {
        Dataset::in_memory(self.records, self.images)
    }

    /// Writes `metadata.csv`, `images/<dish_id>.png` and `synth_meta.json`
    /// under `dir`, creating it if needed.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let image_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        let meta = dir.join(METADATA_FILE);
        fs::write(&meta, metadata_csv(&self.records)).map_err(|e| Error::io(&meta, e))?;
        for r in &self.records {
            let path = image_dir.join(format!("{}.png", r.dish_id));
            let img = self.images.get(&r.dish_id).expect("every record has an image");
            img.save_with_format(&path, ::image::ImageFormat::Png)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        }
        let truth = dir.join(SYNTH_META_FILE);
        let json = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        fs::write(&truth, json + "\n").map_err(|e| Error::io(&truth, e))?;
        Ok(())
    }
}
