//! Marker rendering and the randomized square context crop.
//!
//! The marker is a 3-pixel magenta frame drawn at the box position, clipped
//! to the source image. The crop window is a square of side `r * max(w, h)`
//! with `r` drawn from the configured factor range; the window center is
//! jittered so the box is not always centered, then shifted to keep as much
//! of the source image inside the window as possible. Regions outside the
//! source are padded with neutral gray, and the result is resized to the
//! encoder resolution with bilinear filtering.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub side_factor_min: f64,
    pub side_factor_max: f64,
    pub marker_thickness: u32,
    pub marker_color: [u8; 3],
    /// Square output resolution, encoder-defined.
    pub output_resolution: u32,
    pub center_jitter: bool,
    pub pad_fill: [u8; 3],
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            side_factor_min: 1.2,
            side_factor_max: 1.5,
            marker_thickness: 3,
            marker_color: [255, 0, 255],
            output_resolution: 336,
            center_jitter: true,
            pad_fill: [128, 128, 128],
        }
    }
}

impl CropSpec {
    /// Deterministic variant used for inference-time gating: jitter off,
    /// mid-range side factor.
    pub fn inference(output_resolution: u32) -> Self {
        CropSpec {
            side_factor_min: 1.35,
            side_factor_max: 1.35,
            center_jitter: false,
            output_resolution,
            ..CropSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0 < self.side_factor_min && self.side_factor_min <= self.side_factor_max) {
            return Err(Error::Format(format!(
                "side factor range [{}, {}] is invalid",
                self.side_factor_min, self.side_factor_max
            )));
        }
        if self.marker_thickness == 0 {
            return Err(Error::Format("marker_thickness must be at least 1".into()));
        }
        if self.output_resolution == 0 {
            return Err(Error::Format("output_resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Square window in source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: f64,
    pub y: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn rect(&self) -> Rect<f64> {
        Rect::new(self.x, self.y, self.side, self.side)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub window: CropWindow,
    pub edge_adjusted: bool,
    /// The drawn factor `side / max(w, h)`, recorded for audit.
    pub side_factor: f64,
}

/// Margin keeping the box strictly inside a jittered window.
const JITTER_INSET: f64 = 1e-7;

fn jitter_axis(rng: &mut ChaCha8Rng, lo: f64, hi: f64, side: f64) -> f64 {
    let inset = (JITTER_INSET * side).min((hi - lo) / 4.0);
    rng.gen_range((lo + inset)..=(hi - inset))
}

/// Plan the square crop window around a box.
///
/// The window always contains the box. When it cannot fit inside the image it
/// is shifted (and, as a last resort, centered over the image) and flagged as
/// edge-adjusted; padding happens at render time.
pub fn plan_crop(
    rect: &Rect<f64>,
    image_width: u32,
    image_height: u32,
    spec: &CropSpec,
    rng: &mut ChaCha8Rng,
) -> CropPlan {
    let m = rect.max_side();
    let r = if spec.side_factor_max > spec.side_factor_min {
        rng.gen_range(spec.side_factor_min..=spec.side_factor_max)
    } else {
        spec.side_factor_min
    };
    let side = r * m;
    let (cx, cy) = rect.center();

    // Interval of window origins that keep the box inside.
    let lo_x = rect.right() - side;
    let hi_x = rect.x;
    let lo_y = rect.bottom() - side;
    let hi_y = rect.y;

    let (mut x, mut y) = if spec.center_jitter {
        (
            jitter_axis(rng, lo_x, hi_x, side),
            jitter_axis(rng, lo_y, hi_y, side),
        )
    } else {
        (cx - side / 2.0, cy - side / 2.0)
    };

    let mut edge_adjusted = false;
    let w_img = image_width as f64;
    let h_img = image_height as f64;

    if side <= w_img {
        let clamped = x.max(lo_x.max(0.0)).min(hi_x.min(w_img - side));
        if clamped != x {
            edge_adjusted = true;
            x = clamped;
        }
    } else {
        // Window wider than the image: center it so the whole image is inside.
        x = (w_img - side) / 2.0;
        edge_adjusted = true;
    }
    if side <= h_img {
        let clamped = y.max(lo_y.max(0.0)).min(hi_y.min(h_img - side));
        if clamped != y {
            edge_adjusted = true;
            y = clamped;
        }
    } else {
        y = (h_img - side) / 2.0;
        edge_adjusted = true;
    }

    CropPlan {
        window: CropWindow { x, y, side },
        edge_adjusted,
        side_factor: r,
    }
}

/// A rendered sample ready for the vision encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    pub pixels: RgbImage,
    /// Integer-snapped window actually extracted, in source coordinates.
    pub crop_window: CropWindow,
    pub sample_ref: String,
    /// Marker box in output-pixel coordinates.
    pub marker_in_crop: Rect<f64>,
    pub edge_adjusted: bool,
}

struct MarkerBand {
    outer: [i64; 4], // x0, y0, x1, y1 inclusive
    inner: [i64; 4],
}

impl MarkerBand {
    fn new(rect: &Rect<f64>, thickness: u32) -> Self {
        let bx0 = rect.x.round() as i64;
        let by0 = rect.y.round() as i64;
        let bx1 = (rect.x + rect.w).round() as i64 - 1;
        let by1 = (rect.y + rect.h).round() as i64 - 1;
        let t = thickness as i64;
        let half = t / 2;
        MarkerBand {
            outer: [bx0 - half, by0 - half, bx1 + half, by1 + half],
            inner: [
                bx0 + (t - half),
                by0 + (t - half),
                bx1 - (t - half),
                by1 - (t - half),
            ],
        }
    }

    fn contains(&self, px: i64, py: i64) -> bool {
        let in_outer = px >= self.outer[0] && px <= self.outer[2] && py >= self.outer[1] && py <= self.outer[3];
        if !in_outer {
            return false;
        }
        let in_hole = px >= self.inner[0] && px <= self.inner[2] && py >= self.inner[1] && py <= self.inner[3];
        !in_hole
    }
}

/// Extract the marker-and-crop buffer at source scale (before resizing).
/// The marker is painted only where it lands inside the source image, so
/// padded regions never carry marker pixels.
pub fn render_unscaled(
    image: &RgbImage,
    rect: &Rect<f64>,
    plan: &CropPlan,
    spec: &CropSpec,
) -> RgbImage {
    let win_x0 = plan.window.x.round() as i64;
    let win_y0 = plan.window.y.round() as i64;
    let side_px = plan.window.side.round().max(1.0) as u32;
    let band = MarkerBand::new(rect, spec.marker_thickness);
    let pad = Rgb(spec.pad_fill);
    let marker = Rgb(spec.marker_color);
    let (w, h) = (image.width() as i64, image.height() as i64);

    let mut out = RgbImage::from_pixel(side_px, side_px, pad);
    for oy in 0..side_px {
        for ox in 0..side_px {
            let sx = win_x0 + ox as i64;
            let sy = win_y0 + oy as i64;
            if sx >= 0 && sx < w && sy >= 0 && sy < h {
                let color = if band.contains(sx, sy) {
                    marker
                } else {
                    *image.get_pixel(sx as u32, sy as u32)
                };
                out.put_pixel(ox, oy, color);
            }
        }
    }
    out
}

/// Render the full sample: marker, crop, pad, resize.
/// Pure in its inputs; the source image is never mutated.
pub fn render(
    image: &RgbImage,
    rect: &Rect<f64>,
    plan: &CropPlan,
    spec: &CropSpec,
    sample_ref: String,
) -> CropSample {
    let unscaled = render_unscaled(image, rect, plan, spec);
    let side_px = unscaled.width();
    let pixels = if side_px == spec.output_resolution {
        unscaled
    } else {
        imageops::resize(
            &unscaled,
            spec.output_resolution,
            spec.output_resolution,
            FilterType::Triangle,
        )
    };
    let win_x0 = plan.window.x.round();
    let win_y0 = plan.window.y.round();
    let scale = spec.output_resolution as f64 / side_px as f64;
    CropSample {
        pixels,
        crop_window: CropWindow {
            x: win_x0,
            y: win_y0,
            side: side_px as f64,
        },
        sample_ref,
        marker_in_crop: Rect::new(
            (rect.x - win_x0) * scale,
            (rect.y - win_y0) * scale,
            rect.w * scale,
            rect.h * scale,
        ),
        edge_adjusted: plan.edge_adjusted,
    }
}

/// Load a source image from disk as RGB.
pub fn load_image(path: &std::path::Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

/// Write a rendered crop into a dump directory, named by its sample ref.
pub fn dump_crop(sample: &CropSample, dir: &std::path::Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.png", sample.sample_ref));
    sample
        .pixels
        .save(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(path)
}
