//! Synthesis of good / bad / background box samples from ground truth.
//!
//! Good samples are the ground-truth boxes verbatim. Bad samples perturb a
//! ground-truth box (translation and per-axis scale) and rejection-sample
//! until the IoU against the source lands strictly inside the configured
//! window. Background samples are random boxes with at most
//! `background_iou_max` overlap against every annotation in the image.
//!
//! Synthesis is deterministic for a given seed: each image owns an RNG
//! substream derived from `(seed, image_id)`, so parallel runs produce the
//! same manifest as serial runs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, Dataset, GtBox, ManifestMeta};
use crate::error::{Error, Result};
use crate::geometry::{iou, Rect};
use crate::rng;

pub const SAMPLES_FORMAT_VERSION: u32 = 1;

/// Quality tier of a synthesized sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Bad,
    Background,
}

impl std::fmt::Display for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Quality::Good => write!(f, "good"),
            Quality::Bad => write!(f, "bad"),
            Quality::Background => write!(f, "background"),
        }
    }
}

/// One synthesized training or evaluation sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSample {
    pub image_id: u64,
    pub file_path: String,
    #[serde(rename = "box")]
    pub rect: Rect<f64>,
    /// Dense class id; background samples use the dedicated background id `n`.
    pub class_id: usize,
    pub quality: Quality,
    pub source_annotation_id: Option<u64>,
    /// Seed for downstream per-sample randomness (crop jitter).
    pub rng_seed: u64,
}

impl BoxSample {
    /// Stable identifier used for crop dumps and reports.
    pub fn sample_ref(&self) -> String {
        match self.source_annotation_id {
            Some(a) => format!("img{}-{}-ann{}", self.image_id, self.quality, a),
            None => format!("img{}-{}-seed{:08x}", self.image_id, self.quality, self.rng_seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub bad_iou_min: f64,
    pub bad_iou_max: f64,
    pub background_iou_max: f64,
    pub max_rejection_attempts: u32,
    /// Background boxes targeted per image.
    pub backgrounds_per_image: u32,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            bad_iou_min: 0.5,
            bad_iou_max: 0.8,
            background_iou_max: 0.2,
            max_rejection_attempts: 50,
            backgrounds_per_image: 1,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.bad_iou_min && self.bad_iou_min < self.bad_iou_max && self.bad_iou_max <= 1.0)
        {
            return Err(Error::Format(format!(
                "bad IoU window [{}, {}] is invalid",
                self.bad_iou_min, self.bad_iou_max
            )));
        }
        if !(0.0 <= self.background_iou_max && self.background_iou_max < self.bad_iou_min) {
            return Err(Error::Format(format!(
                "background IoU bound {} must sit below the bad window",
                self.background_iou_max
            )));
        }
        if self.max_rejection_attempts == 0 {
            return Err(Error::Format("max_rejection_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Why a planned sample was skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipNote {
    pub image_id: u64,
    pub quality: Quality,
    pub source_annotation_id: Option<u64>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub good: usize,
    pub bad: usize,
    pub background: usize,
    pub skips: Vec<SkipNote>,
}

impl SynthStats {
    pub fn total(&self) -> usize {
        self.good + self.bad + self.background
    }
}

const BAD_SHIFT_FRACTION: f64 = 0.35;
const BAD_SCALE_MIN: f64 = 0.7;
const BAD_SCALE_MAX: f64 = 1.3;
const BACKGROUND_MIN_SIDE: f64 = 20.0;
const BACKGROUND_ASPECT_MAX: f64 = 3.0;

/// Perturb a ground-truth box into a bad sample: IoU against the source
/// strictly inside `(bad_iou_min, bad_iou_max)` after clamping to the image.
/// `None` when the rejection budget runs out.
pub fn perturb_bad(
    gt: &GtBox,
    image_width: u32,
    image_height: u32,
    cfg: &SynthesisConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Rect<f64>> {
    let gt_rect = gt.rect();
    let shift = BAD_SHIFT_FRACTION * gt_rect.max_side();
    let (cx, cy) = gt_rect.center();
    for _ in 0..cfg.max_rejection_attempts {
        let dx: f64 = rng.gen_range(-shift..=shift);
        let dy: f64 = rng.gen_range(-shift..=shift);
        let sx: f64 = rng.gen_range(BAD_SCALE_MIN..=BAD_SCALE_MAX);
        let sy: f64 = rng.gen_range(BAD_SCALE_MIN..=BAD_SCALE_MAX);
        let w = gt_rect.w * sx;
        let h = gt_rect.h * sy;
        let cand = Rect::new(cx + dx - w / 2.0, cy + dy - h / 2.0, w, h)
            .clamp_to(image_width as f64, image_height as f64);
        if cand.is_degenerate() {
            continue;
        }
        let overlap = iou(&cand, &gt_rect);
        if overlap > cfg.bad_iou_min && overlap < cfg.bad_iou_max {
            return Some(cand);
        }
    }
    None
}

/// Draw a background box: sides at least 20 px, inside the image, IoU at most
/// `background_iou_max` against every annotation. `None` when the budget runs
/// out (densely covered image) or the image is too small to host one.
pub fn sample_background(
    image: &AnnotatedImage,
    cfg: &SynthesisConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Rect<f64>> {
    let w_img = image.width as f64;
    let h_img = image.height as f64;
    if w_img < BACKGROUND_MIN_SIDE || h_img < BACKGROUND_MIN_SIDE {
        return None;
    }
    let hi = (w_img.min(h_img) / 2.0).max(BACKGROUND_MIN_SIDE);
    for _ in 0..cfg.max_rejection_attempts {
        // Log-uniform size, aspect ratio in [1/3, 3].
        let size = (rng.gen_range(BACKGROUND_MIN_SIDE.ln()..=hi.ln())).exp();
        let aspect = rng
            .gen_range((1.0 / BACKGROUND_ASPECT_MAX).ln()..=BACKGROUND_ASPECT_MAX.ln())
            .exp();
        let w = (size * aspect.sqrt()).clamp(BACKGROUND_MIN_SIDE, w_img);
        let h = (size / aspect.sqrt()).clamp(BACKGROUND_MIN_SIDE, h_img);
        let x = rng.gen_range(0.0..=(w_img - w));
        let y = rng.gen_range(0.0..=(h_img - h));
        let cand = Rect::new(x, y, w, h);
        if image
            .boxes
            .iter()
            .all(|gt| iou(&cand, &gt.rect()) <= cfg.background_iou_max)
        {
            return Some(cand);
        }
    }
    None
}

// Stream labels keep per-purpose substreams independent of each other.
const STREAM_BAD: u64 = 1;
const STREAM_BACKGROUND: u64 = 2;
const SEED_GOOD: u64 = 3;
const SEED_BAD: u64 = 4;
const SEED_BACKGROUND: u64 = 5;

fn synthesize_image(image: &AnnotatedImage, cfg: &SynthesisConfig) -> (Vec<BoxSample>, Vec<SkipNote>) {
    let mut samples = Vec::new();
    let mut skips = Vec::new();

    for gt in &image.boxes {
        samples.push(BoxSample {
            image_id: image.image_id,
            file_path: image.file_path.clone(),
            rect: gt.rect(),
            class_id: gt.class_id,
            quality: Quality::Good,
            source_annotation_id: Some(gt.annotation_id),
            rng_seed: rng::derive_seed(cfg.seed, &[image.image_id, SEED_GOOD, gt.annotation_id]),
        });
    }

    let mut bad_rng = rng::stream(cfg.seed, &[image.image_id, STREAM_BAD]);
    for gt in &image.boxes {
        match perturb_bad(gt, image.width, image.height, cfg, &mut bad_rng) {
            Some(rect) => samples.push(BoxSample {
                image_id: image.image_id,
                file_path: image.file_path.clone(),
                rect,
                class_id: gt.class_id,
                quality: Quality::Bad,
                source_annotation_id: Some(gt.annotation_id),
                rng_seed: rng::derive_seed(cfg.seed, &[image.image_id, SEED_BAD, gt.annotation_id]),
            }),
            None => skips.push(SkipNote {
                image_id: image.image_id,
                quality: Quality::Bad,
                source_annotation_id: Some(gt.annotation_id),
                reason: "rejection budget exhausted".into(),
            }),
        }
    }

    let mut bg_rng = rng::stream(cfg.seed, &[image.image_id, STREAM_BACKGROUND]);
    for k in 0..cfg.backgrounds_per_image {
        match sample_background(image, cfg, &mut bg_rng) {
            Some(rect) => samples.push(BoxSample {
                image_id: image.image_id,
                file_path: image.file_path.clone(),
                rect,
                class_id: usize::MAX, // patched to the dense background id below
                quality: Quality::Background,
                source_annotation_id: None,
                rng_seed: rng::derive_seed(
                    cfg.seed,
                    &[image.image_id, SEED_BACKGROUND, k as u64],
                ),
            }),
            None => skips.push(SkipNote {
                image_id: image.image_id,
                quality: Quality::Background,
                source_annotation_id: None,
                reason: "rejection budget exhausted".into(),
            }),
        }
    }

    (samples, skips)
}

/// Synthesize the full sample corpus for a (filtered) dataset.
/// Deterministic in `cfg.seed`; skips never abort the run.
pub fn synthesize(dataset: &Dataset, cfg: &SynthesisConfig) -> Result<(Vec<BoxSample>, SynthStats)> {
    cfg.validate()?;
    let background_class = dataset.categories.background_class();
    let per_image: Vec<(Vec<BoxSample>, Vec<SkipNote>)> = dataset
        .images
        .par_iter()
        .map(|img| synthesize_image(img, cfg))
        .collect();

    let mut samples = Vec::new();
    let mut stats = SynthStats::default();
    for (mut image_samples, skips) in per_image {
        for s in &mut image_samples {
            match s.quality {
                Quality::Good => stats.good += 1,
                Quality::Bad => stats.bad += 1,
                Quality::Background => {
                    s.class_id = background_class;
                    stats.background += 1;
                }
            }
        }
        samples.extend(image_samples);
        stats.skips.extend(skips);
    }
    Ok((samples, stats))
}

/// Constraint violations found by re-measuring a manifest against its dataset.
#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub sample_ref: String,
    pub detail: String,
}

/// Re-measure every sample against the ground truth. Good boxes must equal
/// their source annotation, bad boxes must sit inside the IoU window, and
/// background boxes must clear every annotation in the image.
pub fn validate_samples(
    samples: &[BoxSample],
    dataset: &Dataset,
    cfg: &SynthesisConfig,
) -> Vec<Violation> {
    let by_id: std::collections::HashMap<u64, &AnnotatedImage> =
        dataset.images.iter().map(|i| (i.image_id, i)).collect();
    let mut violations = Vec::new();
    for s in samples {
        let Some(image) = by_id.get(&s.image_id) else {
            violations.push(Violation {
                sample_ref: s.sample_ref(),
                detail: "unknown image id".into(),
            });
            continue;
        };
        match s.quality {
            Quality::Good => {
                let ok = image
                    .boxes
                    .iter()
                    .any(|g| Some(g.annotation_id) == s.source_annotation_id && g.rect() == s.rect);
                if !ok {
                    violations.push(Violation {
                        sample_ref: s.sample_ref(),
                        detail: "good sample does not match its annotation".into(),
                    });
                }
            }
            Quality::Bad => {
                let Some(gt) = image
                    .boxes
                    .iter()
                    .find(|g| Some(g.annotation_id) == s.source_annotation_id)
                else {
                    violations.push(Violation {
                        sample_ref: s.sample_ref(),
                        detail: "bad sample has no source annotation".into(),
                    });
                    continue;
                };
                let overlap = iou(&s.rect, &gt.rect());
                if !(overlap >= cfg.bad_iou_min && overlap <= cfg.bad_iou_max) {
                    violations.push(Violation {
                        sample_ref: s.sample_ref(),
                        detail: format!("bad sample IoU {overlap} outside window"),
                    });
                }
            }
            Quality::Background => {
                for g in &image.boxes {
                    let overlap = iou(&s.rect, &g.rect());
                    if overlap > cfg.background_iou_max {
                        violations.push(Violation {
                            sample_ref: s.sample_ref(),
                            detail: format!(
                                "background sample IoU {overlap} against annotation {}",
                                g.annotation_id
                            ),
                        });
                    }
                }
            }
        }
    }
    violations
}

/// Write samples as JSONL (one record per line) plus the meta sidecar.
pub fn write_samples_manifest(
    samples: &[BoxSample],
    path: &Path,
    meta: &ManifestMeta,
) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    crate::dataset::write_meta(path, meta)
}

pub fn read_samples_manifest(path: &Path) -> Result<(Vec<BoxSample>, ManifestMeta)> {
    let meta = crate::dataset::read_meta(path)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str::<BoxSample>(&line)?);
    }
    Ok((samples, meta))
}
