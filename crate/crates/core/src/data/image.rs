use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use ::image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DishRecord;
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// Converts 8-bit RGB to a `size×size×3` tensor in `[0, 1]`, resizing
/// bilinearly when needed.
pub fn rgb_to_tensor(img: &RgbImage, size: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 || size == 0 {
        return Err(arg_err!("cannot convert a {w}×{h} image to {size}×{size}"));
    }
    let src = Tensor::from_parts(vec![h, w, 3], img.as_raw().iter().map(|&v| v as f32 / 255.0).collect());
    if (h, w) == (size, size) {
        Ok(src)
    } else {
        resize_bilinear(&src, size, size)
    }
}

/// Bilinear resize of an `H×W×C` tensor with half-pixel sample centers and
/// edge clamping.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[in_h, in_w, c] = src.shape() else {
        return Err(arg_err!("resize expects H×W×C, got {:?}", src.shape()));
    };
    if out_h == 0 || out_w == 0 {
        return Err(arg_err!("resize target must be positive"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(out_h, in_h), taps(out_w, in_w));
    let data = src.data();
    let px = |y: usize, x: usize, ch: usize| data[(y * in_w + x) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                let bottom = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

/// Decodes an image file, resizes it to `size×size` and scales to `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = ::image::open(path).map_err(|e| Error::ImageLoad {
        dish_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    rgb_to_tensor(&img.to_rgb8(), size)
}

/// Supplies record images as `size×size×3` tensors.
pub trait ImageSource: Send + Sync {
    fn image(&self, record: &DishRecord, size: usize) -> Result<Tensor<f32>>;
}

/// Reads from `record.image_path`, caching decoded tensors.
#[derive(Default)]
pub struct DiskImages {
    cache: Mutex<HashMap<(String, usize), Tensor<f32>>>,
}

impl DiskImages {
    pub fn new() -> Self {
        DiskImages::default()
    }
}

impl ImageSource for DiskImages {
    fn image(&self, record: &DishRecord, size: usize) -> Result<Tensor<f32>> {
        let key = (record.dish_id.clone(), size);
        if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let t = load_image(&record.image_path, size).map_err(|e| match e {
            Error::ImageLoad { path, message, .. } => Error::ImageLoad {
                dish_id: record.dish_id.clone(),
                path,
                message,
            },
            other => other,
        })?;
        self.cache.lock().expect("cache lock").insert(key, t.clone());
        Ok(t)
    }
}

/// 8-bit images held in memory, keyed by dish id.
#[derive(Default)]
pub struct MemoryImages {
    images: HashMap<String, RgbImage>,
    cache: Mutex<HashMap<(String, usize), Tensor<f32>>>,
}

impl MemoryImages {
    pub fn new() -> Self {
        MemoryImages::default()
    }

    pub fn insert(&mut self, dish_id: impl Into<String>, image: RgbImage) {
        self.images.insert(dish_id.into(), image);
    }

    pub fn get(&self, dish_id: &str) -> Option<&RgbImage> {
        self.images.get(dish_id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageSource for MemoryImages {
    fn image(&self, record: &DishRecord, size: usize) -> Result<Tensor<f32>> {
        let key = (record.dish_id.clone(), size);
        if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let img = self.images.get(&record.dish_id).ok_or_else(|| Error::ImageLoad {
            dish_id: record.dish_id.clone(),
            path: record.image_path.clone(),
            message: "no in-memory image for this dish".into(),
        })?;
        let t = rgb_to_tensor(img, size)?;
        self.cache.lock().expect("cache lock").insert(key, t.clone());
        Ok(t)
    }
}

/// How "randomly inverted" is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvertMode {
    /// Mirror left to right.
    #[default]
    Flip,
    /// Replace every value `x` with `1 − x`.
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    #[serde(default)]
    pub invert: InvertMode,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            brightness_range: (0.9, 1.1),
            contrast_range: (0.9, 1.1),
            invert: InvertMode::Flip,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(arg_err!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        for (name, (lo, hi)) in [("brightness", self.brightness_range), ("contrast", self.contrast_range)] {
            if !(lo <= 1.0 && 1.0 <= hi && lo >= 0.0) {
                return Err(arg_err!("{name} range ({lo}, {hi}) must be non-negative and contain 1"));
            }
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..=hi) } else { lo };
        AugmentDraw {
            invert: rng.random_bool(self.flip_prob),
            brightness: uniform(rng, self.brightness_range),
            contrast: uniform(rng, self.contrast_range),
            mode: self.invert,
        }
    }
}

/// One realization of the random augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub invert: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub mode: InvertMode,
}

impl AugmentDraw {
    /// Inversion, then `x·b`, then `m + c·(x − m)` about the image mean `m`,
    /// clamped to `[0, 1]`.
    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let &[h, w, c] = image.shape() else {
            return Err(arg_err!("augment expects H×W×C, got {:?}", image.shape()));
        };
        let mut data = image.data().to_vec();
        if self.invert {
            match self.mode {
                InvertMode::Flip => {
                    for row in data.chunks_mut(w * c) {
                        for x in 0..w / 2 {
                            for ch in 0..c {
                                row.swap(x * c + ch, (w - 1 - x) * c + ch);
                            }
                        }
                    }
                }
                InvertMode::Pixel => data.iter_mut().for_each(|v| *v = 1.0 - *v),
            }
        }
        let b = self.brightness as f32;
        data.iter_mut().for_each(|v| *v *= b);
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let (m, k) = (mean as f32, self.contrast as f32);
        data.iter_mut().for_each(|v| *v = (m + k * (*v - m)).clamp(0.0, 1.0));
        Ok(Tensor::from_parts(vec![h, w, c], data))
    }
}

pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    policy.draw(rng).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_draw(invert: bool) -> AugmentDraw {
        AugmentDraw {
            invert,
            brightness: 1.0,
            contrast: 1.0,
            mode: InvertMode::Flip,
        }
    }

    #[test]
    fn gray_image_decodes_to_128_over_255() {
        let img = RgbImage::from_pixel(10, 7, ::image::Rgb([128, 128, 128]));
        let t = rgb_to_tensor(&img, 5).unwrap();
        assert_eq!(t.shape(), &[5, 5, 3]);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn downsizing_4x4_to_2x2_averages_blocks() {
        let vals: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let src = Tensor::new([4, 4, 1], vals).unwrap();
        let out = resize_bilinear(&src, 2, 2).unwrap();
        // samples fall at (0.5, 0.5), (0.5, 2.5), … in source pixel coordinates
        let expect = [
            (0. + 1. + 4. + 5.) / 4.,
            (2. + 3. + 6. + 7.) / 4.,
            (8. + 9. + 12. + 13.) / 4.,
            (10. + 11. + 14. + 15.) / 4.,
        ];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_images_survive_resizing() {
        let src = Tensor::full([5, 3, 3], 0.3f32);
        let out = resize_bilinear(&src, 8, 4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn identity_draw_and_double_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform([4, 5, 3], 0.0, 1.0, &mut rng);
        let same = identity_draw(false).apply(&img).unwrap();
        assert!(same.max_abs_diff(&img).unwrap() < 1e-6);
        let flipped = identity_draw(true).apply(&img).unwrap();
        assert_ne!(flipped, img);
        assert_eq!(flipped.at(&[1, 0, 2]), img.at(&[1, 4, 2]));
        let back = identity_draw(true).apply(&flipped).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn constant_image_only_sees_brightness() {
        let img = Tensor::full([3, 3, 3], 0.5f32);
        let draw = AugmentDraw {
            invert: true,
            brightness: 1.1,
            contrast: 0.9,
            mode: InvertMode::Flip,
        };
        let out = draw.apply(&img).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.55).abs() < 1e-6));
    }

    #[test]
    fn pixel_inversion_mode() {
        let img = Tensor::full([2, 2, 3], 0.25f32);
        let draw = AugmentDraw {
            mode: InvertMode::Pixel,
            ..identity_draw(true)
        };
        assert!(draw.apply(&img).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            brightness_range: (1.05, 1.1),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
