//! Encoder abstraction and the trainable toy encoder pair.
//!
//! The [`VisionTextEncoder`] trait is the adapter slot: any pretrained
//! vision-language checkpoint (a CLIP-style tower pair) can sit behind it.
//! The desk-scale path uses [`ToyEncoderPair`]: a small MLP over pooled
//! marker-relative color statistics on the vision side and a linear map over
//! bag-of-token prompt features on the text side. Both produce unit-norm
//! embeddings of the same dimension.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crop::CropSample;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::prompts::PromptBank;
use crate::rng;
use crate::scalar::Scalar;

/// Pretrained-convention temperature: exp(ln(1/0.07)).
pub const LOGIT_SCALE_INIT: f64 = 1.0 / 0.07;
pub const LOGIT_SCALE_MAX: f64 = 100.0;
pub const LOGIT_SCALE_FLOOR: f64 = 1e-3;

/// Which tower(s) receive gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableParts {
    VisionOnly,
    TextOnly,
    #[default]
    Full,
}

/// The encoder pair contract used by inference and evaluation.
pub trait VisionTextEncoder<T: Scalar> {
    fn embed_dim(&self) -> usize;
    /// Unit-norm image embedding.
    fn encode_image(&self, crop: &CropSample) -> Result<Array1<T>>;
    /// Unit-norm text embedding.
    fn encode_text(&self, prompt: &str) -> Result<Array1<T>>;
    /// Positive similarity temperature, clamped to a sane range.
    fn logit_scale(&self) -> T;
}

// ---------------------------------------------------------------------------
// Crop featurizer
// ---------------------------------------------------------------------------

/// Bump when the feature layout changes; stored in checkpoints.
pub const FEATURE_VERSION: u32 = 1;

pub const FEATURE_DIM: usize = 72;

const HIST_BINS: usize = 27; // 3 levels per RGB channel

fn zone_bounds(r: &Rect<f64>, res: u32) -> (u32, u32, u32, u32) {
    let x0 = r.x.round().max(0.0) as u32;
    let y0 = r.y.round().max(0.0) as u32;
    let x1 = (r.right().round().max(0.0) as u32).min(res);
    let y1 = (r.bottom().round().max(0.0) as u32).min(res);
    (x0.min(res), y0.min(res), x1, y1)
}

/// Mean and standard deviation of RGB (0-1) over a zone, skipping `hole`.
fn zone_stats(
    img: &image::RgbImage,
    zone: &Rect<f64>,
    hole: Option<&Rect<f64>>,
) -> ([f64; 3], [f64; 3]) {
    let res = img.width();
    let (x0, y0, x1, y1) = zone_bounds(zone, res);
    let hole_bounds = hole.map(|h| zone_bounds(h, res));
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some((hx0, hy0, hx1, hy1)) = hole_bounds {
                if x >= hx0 && x < hx1 && y >= hy0 && y < hy1 {
                    continue;
                }
            }
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                let v = p.0[c] as f64 / 255.0;
                sum[c] += v;
                sumsq[c] += v * v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let n = count as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        std[c] = (sumsq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

fn zone_histogram(img: &image::RgbImage, zone: &Rect<f64>) -> [f64; HIST_BINS] {
    let res = img.width();
    let (x0, y0, x1, y1) = zone_bounds(zone, res);
    let mut hist = [0.0f64; HIST_BINS];
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = img.get_pixel(x, y);
            let bin = (p.0[0] as usize / 86) * 9 + (p.0[1] as usize / 86) * 3 + (p.0[2] as usize / 86);
            hist[bin] += 1.0;
            count += 1;
        }
    }
    if count > 0 {
        for h in &mut hist {
            *h /= count as f64;
        }
    }
    hist
}

fn inflate(r: &Rect<f64>, fx: f64, fy: f64) -> Rect<f64> {
    Rect::new(r.x - fx, r.y - fy, r.w + 2.0 * fx, r.h + 2.0 * fy)
}

/// Marker-relative pooled features for one rendered crop.
///
/// Layout: interior color histogram (27), interior mean/std (6), surround
/// ring mean/std (6), whole-crop mean/std (6), per-side inside/outside strip
/// means (24), marker geometry (3). All values are in roughly [0, 1].
pub fn crop_features(crop: &CropSample) -> Vec<f64> {
    let img = &crop.pixels;
    let res = img.width() as f64;
    let m = crop.marker_in_crop;

    let mut out = Vec::with_capacity(FEATURE_DIM);

    // Interior: central 60% of the marker box, clear of the frame band.
    let interior = inflate(&m, -0.2 * m.w, -0.2 * m.h);
    out.extend_from_slice(&zone_histogram(img, &interior));
    let (mean_a, std_a) = zone_stats(img, &interior, None);
    out.extend_from_slice(&mean_a);
    out.extend_from_slice(&std_a);

    // Surround ring between 1.15x and 1.45x of the marker box.
    let ring_outer = inflate(&m, 0.45 * m.w, 0.45 * m.h);
    let ring_inner = inflate(&m, 0.15 * m.w, 0.15 * m.h);
    let (mean_r, std_r) = zone_stats(img, &ring_outer, Some(&ring_inner));
    out.extend_from_slice(&mean_r);
    out.extend_from_slice(&std_r);

    // Whole crop.
    let full = Rect::new(0.0, 0.0, res, res);
    let (mean_f, std_f) = zone_stats(img, &full, None);
    out.extend_from_slice(&mean_f);
    out.extend_from_slice(&std_f);

    // Per-side strips just inside and just outside each marker edge. The gap
    // keeps the strips clear of the frame band after resizing.
    let gap = (0.06 * m.max_side()).clamp(3.0, 8.0);
    let sw = (0.18 * m.w).max(2.0);
    let sh = (0.18 * m.h).max(2.0);
    let strips = [
        // left in / out
        Rect::new(m.x + gap, m.y + gap, sw, m.h - 2.0 * gap),
        Rect::new(m.x - gap - sw, m.y + gap, sw, m.h - 2.0 * gap),
        // right
        Rect::new(m.right() - gap - sw, m.y + gap, sw, m.h - 2.0 * gap),
        Rect::new(m.right() + gap, m.y + gap, sw, m.h - 2.0 * gap),
        // top
        Rect::new(m.x + gap, m.y + gap, m.w - 2.0 * gap, sh),
        Rect::new(m.x + gap, m.y - gap - sh, m.w - 2.0 * gap, sh),
        // bottom
        Rect::new(m.x + gap, m.bottom() - gap - sh, m.w - 2.0 * gap, sh),
        Rect::new(m.x + gap, m.bottom() + gap, m.w - 2.0 * gap, sh),
    ];
    for strip in &strips {
        let (mean, _) = zone_stats(img, strip, None);
        out.extend_from_slice(&mean);
    }

    // Marker geometry within the crop.
    out.push(m.w / res);
    out.push(m.h / res);
    out.push(m.w.min(m.h) / m.w.max(m.h).max(1.0));

    debug_assert_eq!(out.len(), FEATURE_DIM);
    out
}

// ---------------------------------------------------------------------------
// Prompt tokenization
// ---------------------------------------------------------------------------

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Sorted unique tokens across the bank's prompts.
pub fn build_vocab(bank: &PromptBank) -> Vec<String> {
    let mut tokens: Vec<String> = bank.prompts().iter().flat_map(|p| tokenize(p)).collect();
    tokens.sort();
    tokens.dedup();
    tokens
}

/// Bag-of-token counts over the vocabulary; unknown tokens are ignored.
pub fn text_features(prompt: &str, vocab: &[String]) -> Vec<f64> {
    let mut bag = vec![0.0; vocab.len()];
    for tok in tokenize(prompt) {
        if let Ok(i) = vocab.binary_search(&tok) {
            bag[i] += 1.0;
        }
    }
    bag
}

// ---------------------------------------------------------------------------
// Toy encoder pair
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub vision_hidden: usize,
    /// Expected crop resolution; a mismatch is a shape error.
    pub resolution: u32,
    pub init_seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            embed_dim: 32,
            vision_hidden: 64,
            resolution: 64,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoderPair<T: Scalar> {
    pub cfg: ToyEncoderConfig,
    pub vocab: Vec<String>,
    // vision tower: features -> hidden -> embedding
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    // text tower: bag-of-tokens -> embedding
    pub wt: Array2<T>,
    pub bt: Array1<T>,
    pub log_logit_scale: T,
    pub trainable: TrainableParts,
}

fn xavier<T: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-a..a)))
}

/// Forward caches needed for the backward pass through the vision tower.
pub struct VisionForward<T> {
    pub h_pre: Array2<T>,
    pub h: Array2<T>,
    pub emb: Array2<T>,
    norms: Array1<T>,
    mask: Option<Array2<T>>,
}

/// Forward caches for the text tower.
pub struct TextForward<T> {
    pub input: Array2<T>,
    pub emb: Array2<T>,
    norms: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct VisionGrads<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct TextGrads<T> {
    pub wt: Array2<T>,
    pub bt: Array1<T>,
}

fn normalize_rows<T: Scalar>(raw: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms = Array1::from_iter(raw.axis_iter(Axis(0)).map(|row| {
        row.iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .max(T::from_f64(1e-12))
    }));
    let mut emb = raw.clone();
    for (mut row, &n) in emb.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (emb, norms)
}

/// Backward through row normalization: projects the upstream gradient onto
/// the tangent of the unit sphere and rescales.
fn normalize_backward<T: Scalar>(
    emb: &Array2<T>,
    norms: &Array1<T>,
    d_emb: &Array2<T>,
) -> Array2<T> {
    let mut d_raw = d_emb.clone();
    for ((mut row, e_row), &n) in d_raw
        .axis_iter_mut(Axis(0))
        .zip(emb.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let dot = row.iter().zip(e_row.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (d, &e) in row.iter_mut().zip(e_row.iter()) {
            *d = (*d - e * dot) / n;
        }
    }
    d_raw
}

impl<T: Scalar> ToyEncoderPair<T> {
    pub fn new(cfg: ToyEncoderConfig, bank: &PromptBank, trainable: TrainableParts) -> Self {
        let vocab = build_vocab(bank);
        let mut r = rng::stream(cfg.init_seed, &[0xE0C0]);
        let w1 = xavier(&mut r, cfg.vision_hidden, FEATURE_DIM);
        let b1 = Array1::zeros(cfg.vision_hidden);
        let w2 = xavier(&mut r, cfg.embed_dim, cfg.vision_hidden);
        let b2 = Array1::zeros(cfg.embed_dim);
        let wt = xavier(&mut r, cfg.embed_dim, vocab.len());
        let bt = Array1::zeros(cfg.embed_dim);
        ToyEncoderPair {
            cfg,
            vocab,
            w1,
            b1,
            w2,
            b2,
            wt,
            bt,
            log_logit_scale: T::from_f64(LOGIT_SCALE_INIT.ln()),
            trainable,
        }
    }

    /// Vision forward over a feature batch. `mask` is an inverted-dropout
    /// mask for the hidden layer (entries 0 or 1/(1-p)).
    pub fn vision_forward(&self, x: &Array2<T>, mask: Option<Array2<T>>) -> VisionForward<T> {
        let h_pre = x.dot(&self.w1.t()) + &self.b1;
        let mut h = h_pre.mapv(|v| v.tanh());
        if let Some(m) = &mask {
            h = &h * m;
        }
        let raw = h.dot(&self.w2.t()) + &self.b2;
        let (emb, norms) = normalize_rows(&raw);
        VisionForward {
            h_pre,
            h,
            emb,
            norms,
            mask,
        }
    }

    pub fn vision_backward(
        &self,
        x: &Array2<T>,
        fwd: &VisionForward<T>,
        d_emb: &Array2<T>,
    ) -> VisionGrads<T> {
        let d_raw = normalize_backward(&fwd.emb, &fwd.norms, d_emb);
        let w2 = d_raw.t().dot(&fwd.h);
        let b2 = d_raw.sum_axis(Axis(0));
        let mut d_h = d_raw.dot(&self.w2);
        if let Some(m) = &fwd.mask {
            d_h = &d_h * m;
        }
        let d_h_pre = &d_h * &fwd.h_pre.mapv(|v| {
            let t = v.tanh();
            T::one() - t * t
        });
        let w1 = d_h_pre.t().dot(x);
        let b1 = d_h_pre.sum_axis(Axis(0));
        VisionGrads { w1, b1, w2, b2 }
    }

    /// Text forward over a bag-of-token batch. `mask` is an inverted-dropout
    /// mask applied to the input features.
    pub fn text_forward(&self, u: &Array2<T>, mask: Option<&Array2<T>>) -> TextForward<T> {
        let input = match mask {
            Some(m) => u * m,
            None => u.clone(),
        };
        let raw = input.dot(&self.wt.t()) + &self.bt;
        let (emb, norms) = normalize_rows(&raw);
        TextForward { input, emb, norms }
    }

    pub fn text_backward(&self, fwd: &TextForward<T>, d_emb: &Array2<T>) -> TextGrads<T> {
        let d_raw = normalize_backward(&fwd.emb, &fwd.norms, d_emb);
        TextGrads {
            wt: d_raw.t().dot(&fwd.input),
            bt: d_raw.sum_axis(Axis(0)),
        }
    }

    pub fn features_of(&self, crop: &CropSample) -> Result<Array1<T>> {
        if crop.pixels.width() != self.cfg.resolution || crop.pixels.height() != self.cfg.resolution
        {
            return Err(Error::Shape(format!(
                "crop resolution {}x{} does not match encoder resolution {}",
                crop.pixels.width(),
                crop.pixels.height(),
                self.cfg.resolution
            )));
        }
        Ok(Array1::from_iter(
            crop_features(crop).into_iter().map(T::from_f64),
        ))
    }

    pub fn text_bag(&self, prompt: &str) -> Array1<T> {
        Array1::from_iter(text_features(prompt, &self.vocab).into_iter().map(T::from_f64))
    }

    /// Clamp the stored log scale into the allowed band.
    pub fn clamp_logit_scale(&mut self) {
        let lo = T::from_f64(LOGIT_SCALE_FLOOR.ln());
        let hi = T::from_f64(LOGIT_SCALE_MAX.ln());
        self.log_logit_scale = self.log_logit_scale.max(lo).min(hi);
    }
}

impl<T: Scalar> VisionTextEncoder<T> for ToyEncoderPair<T> {
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn encode_image(&self, crop: &CropSample) -> Result<Array1<T>> {
        let x = self.features_of(crop)?.insert_axis(Axis(0));
        let fwd = self.vision_forward(&x, None);
        Ok(fwd.emb.row(0).to_owned())
    }

    fn encode_text(&self, prompt: &str) -> Result<Array1<T>> {
        let u = self.text_bag(prompt).insert_axis(Axis(0));
        let fwd = self.text_forward(&u, None);
        Ok(fwd.emb.row(0).to_owned())
    }

    fn logit_scale(&self) -> T {
        self.log_logit_scale
            .exp()
            .max(T::from_f64(LOGIT_SCALE_FLOOR))
            .min(T::from_f64(LOGIT_SCALE_MAX))
    }
}
