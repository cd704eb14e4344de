//! Random query patch data pipeline.
//!
//! A pretext sample is a resized scene plus `M` randomly cropped, augmented
//! and occasionally zeroed query patches, each labelled with the crop's own
//! rectangle in the resized scene. Patch `k`'s target always stays at
//! position `k`; grouping onto object queries happens in the model.

mod dataset;
mod image;
pub mod ppm;
mod synth;

pub use dataset::{
    load_detection_dir, parse_ground_truth, parse_manifest, write_synth_dataset, GroundTruthLine, DETECTION_GT_FILE,
    MANIFEST_FILE,
};
pub use image::ImageRaster;
pub use synth::{synth_image, SceneSpec, ShapeKind, NUM_SHAPE_CLASSES};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class: usize,
    pub bbox: BoxCxCyWh,
}

/// A labelled scene for detection fine-tuning and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub image: ImageRaster,
    pub objects: Vec<LabeledBox>,
}

/// Mixes a base seed with an index into an independent 64-bit seed
/// (SplitMix64 finalizer over the combined words).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Colour-jitter strengths; factors are drawn from `[1 − s, 1 + s]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { brightness: 0.4, contrast: 0.4, saturation: 0.4, grayscale_prob: 0.2 }
    }
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec =
        AugmentSpec { brightness: 0.0, contrast: 0.0, saturation: 0.0, grayscale_prob: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    /// Query patches per sample (M).
    pub num_patches: usize,
    /// Upper bound on M, normally the number of object queries.
    pub max_patches: usize,
    pub patch_side: usize,
    pub short_range: [usize; 2],
    pub long_max: usize,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop_frac: f64,
    pub augment: Option<AugmentSpec>,
    pub dropout: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            num_patches: 4,
            max_patches: 16,
            patch_side: 16,
            short_range: [48, 64],
            long_max: 80,
            min_crop_frac: 0.125,
            augment: Some(AugmentSpec::default()),
            dropout: 0.1,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.short_range;
        if lo == 0 || lo > hi || hi > self.long_max {
            return Err(Error::Config(format!(
                "resize policy needs 0 < short_side_min <= short_side_max <= long_side_max, got [{lo}, {hi}] / {}",
                self.long_max
            )));
        }
        if !(self.min_crop_frac > 0.0 && self.min_crop_frac <= 1.0) {
            return Err(Error::Config(format!("min_crop_frac {} outside (0, 1]", self.min_crop_frac)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("patch dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.num_patches == 0 || self.num_patches > self.max_patches {
            return Err(Error::Config(format!(
                "need 1 <= num_patches ({}) <= max_patches ({})",
                self.num_patches, self.max_patches
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample {
    pub image: ImageRaster,
    pub patches: Vec<ImageRaster>,
    pub gt_boxes: Vec<BoxCxCyWh>,
    pub dropped: Vec<bool>,
    pub seed: u64,
}

/// Rescales so the shorter side lands uniformly in `short_range`, capping the
/// longer side at `long_max`. Aspect ratio is preserved.
pub fn resize_policy(img: &ImageRaster, short_range: [usize; 2], long_max: usize, seed: u64) -> Result<ImageRaster> {
    let [lo, hi] = short_range;
    if lo == 0 || lo > hi || hi > long_max {
        return Err(Error::Config(format!(
            "resize policy needs 0 < lo <= hi <= long_max, got [{lo}, {hi}] / {long_max}"
        )));
    }
    let mut rng = rng_for(seed);
    let target = rng.gen_range(lo..=hi) as f64;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut scale = target / w.min(h);
    if w.max(h) * scale > long_max as f64 {
        scale = long_max as f64 / w.max(h);
    }
    let nw = ((w * scale).round() as usize).clamp(1, long_max);
    let nh = ((h * scale).round() as usize).clamp(1, long_max);
    Ok(img.resize(nw, nh))
}

/// `m` independent uniform crops, each resized to `patch_side²`, and their
/// rectangles as normalized centre/size boxes.
pub fn crop_queries(
    img: &ImageRaster,
    m: usize,
    cfg: &PretextConfig,
    seed: u64,
) -> Result<(Vec<ImageRaster>, Vec<BoxCxCyWh>)> {
    if m > cfg.max_patches {
        return Err(Error::Capacity { what: "query patches", got: m, max: cfg.max_patches });
    }
    let mut rng = rng_for(seed);
    let (w, h) = (img.width(), img.height());
    let min_w = ((w as f64 * cfg.min_crop_frac).ceil() as usize).clamp(1, w);
    let min_h = ((h as f64 * cfg.min_crop_frac).ceil() as usize).clamp(1, h);
    let mut patches = Vec::with_capacity(m);
    let mut boxes = Vec::with_capacity(m);
    for _ in 0..m {
        let cw = rng.gen_range(min_w..=w);
        let ch = rng.gen_range(min_h..=h);
        let x = rng.gen_range(0..=w - cw);
        let y = rng.gen_range(0..=h - ch);
        patches.push(img.crop(x, y, cw, ch)?.resize(cfg.patch_side, cfg.patch_side));
        boxes.push(crop_box(w, h, x, y, cw, ch));
    }
    Ok((patches, boxes))
}

/// Normalized centre/size box of a pixel rectangle.
pub fn crop_box(w: usize, h: usize, x: usize, y: usize, cw: usize, ch: usize) -> BoxCxCyWh {
    BoxCxCyWh::new(
        (x as f64 + cw as f64 / 2.0) / w as f64,
        (y as f64 + ch as f64 / 2.0) / h as f64,
        cw as f64 / w as f64,
        ch as f64 / h as f64,
    )
}

/// Brightness, contrast and saturation jitter, then random grayscale.
/// Never flips.
pub fn augment(patch: &ImageRaster, spec: &AugmentSpec, seed: u64) -> ImageRaster {
    let mut rng = rng_for(seed);
    let mut factor = |s: f64| if s > 0.0 { rng.gen_range(1.0 - s..=1.0 + s) } else { 1.0 };
    let b = factor(spec.brightness);
    let c = factor(spec.contrast);
    let s = factor(spec.saturation);
    let gray = spec.grayscale_prob > 0.0 && rng.gen_bool(spec.grayscale_prob.min(1.0));

    let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mut px: Vec<[f64; 3]> =
        patch.data().chunks_exact(3).map(|p| [f64::from(p[0]) * b, f64::from(p[1]) * b, f64::from(p[2]) * b]).collect();
    if c != 1.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
        for p in &mut px {
            for v in p.iter_mut() {
                *v = (*v - mean) * c + mean;
            }
        }
    }
    if s != 1.0 || gray {
        for p in &mut px {
            let g = luma(*p);
            let s = if gray { 0.0 } else { s };
            for v in p.iter_mut() {
                *v = (*v - g) * s + g;
            }
        }
    }
    let data = px.iter().flat_map(|p| p.iter().map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
    ImageRaster::new(patch.width(), patch.height(), data).expect("same geometry")
}

/// Zeroes each patch independently with probability `rate`.
pub fn patch_dropout(patches: &mut [ImageRaster], rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("patch dropout rate {rate} outside [0, 1)")));
    }
    let mut rng = rng_for(seed);
    Ok(patches
        .iter_mut()
        .map(|p| {
            let drop = rate > 0.0 && rng.gen_bool(rate);
            if drop {
                p.zero();
            }
            drop
        })
        .collect())
}

/// Assembles one pretext sample; a pure function of `(image, cfg, seed)`.
pub fn build_pretext_sample(image: &ImageRaster, cfg: &PretextConfig, seed: u64) -> Result<PretextSample> {
    let resized = resize_policy(image, cfg.short_range, cfg.long_max, derive_seed(seed, 1))?;
    let (mut patches, gt_boxes) = crop_queries(&resized, cfg.num_patches, cfg, derive_seed(seed, 2))?;
    if let Some(spec) = &cfg.augment {
        for (k, p) in patches.iter_mut().enumerate() {
            *p = augment(p, spec, derive_seed(seed, 100 + k as u64));
        }
    }
    let dropped = patch_dropout(&mut patches, cfg.dropout, derive_seed(seed, 3))?;
    Ok(PretextSample { image: resized, patches, gt_boxes, dropped, seed })
}
