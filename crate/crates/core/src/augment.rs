//! Seeded augmentation: color jitter, random crop and horizontal/vertical flips.
//!
//! Jitter is applied as brightness, contrast, saturation, hue, in that order,
//! with clamping to `[0, 1]` after every step. A magnitude of zero skips its
//! step entirely, so zero-magnitude configs are exact no-ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{label_foreground, remap_annotations, Annotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Square crop side; `None` keeps the full patch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            brightness: 0.35,
            contrast: 0.2,
            saturation: 0.1,
            hue: 0.1,
            crop_size: None,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Jitter magnitudes zero, no crop, no flips.
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: true,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            crop_size: None,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("augment.{name} = {v} must be finite and >= 0")));
            }
        }
        if self.hue > 0.5 {
            return Err(Error::Config(format!("augment.hue = {} exceeds 0.5", self.hue)));
        }
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} must lie in [0, 1]")));
            }
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("augment.crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// Factors drawn for one jitter application. `None` means the step is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JitterFactors {
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue_shift: Option<f64>,
}

impl JitterFactors {
    pub fn sample<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Self {
        let mut factor = |m: f64| (m > 0.0).then(|| rng.random_range((1.0 - m).max(0.0)..=1.0 + m));
        let brightness = factor(config.brightness);
        let contrast = factor(config.contrast);
        let saturation = factor(config.saturation);
        let hue_shift = (config.hue > 0.0).then(|| rng.random_range(-config.hue..=config.hue));
        JitterFactors { brightness, contrast, saturation, hue_shift }
    }
}

fn luminance(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// `factor * x + (1 - factor) * other`, clamped.
fn blend(x: f32, other: f32, factor: f32) -> f32 {
    (factor * x + (1.0 - factor) * other).clamp(0.0, 1.0)
}

/// Applies already-drawn factors.
pub fn apply_jitter(image: &Image, factors: &JitterFactors) -> Result<Image> {
    image.check_range()?;
    let mut out = image.clone();
    if let Some(f) = factors.brightness {
        let f = f as f32;
        out.data.iter_mut().for_each(|v| *v = blend(*v, 0.0, f));
    }
    if let Some(f) = factors.contrast {
        let f = f as f32;
        let mean = out.data.chunks_exact(3).map(|p| luminance(p) as f64).sum::<f64>()
            / (out.width * out.height).max(1) as f64;
        let mean = mean as f32;
        out.data.iter_mut().for_each(|v| *v = blend(*v, mean, f));
    }
    if let Some(f) = factors.saturation {
        let f = f as f32;
        for px in out.data.chunks_exact_mut(3) {
            let gray = luminance(px);
            px.iter_mut().for_each(|v| *v = blend(*v, gray, f));
        }
    }
    if let Some(shift) = factors.hue_shift {
        for px in out.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let h = (h + shift as f32).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            px[0] = r.clamp(0.0, 1.0);
            px[1] = g.clamp(0.0, 1.0);
            px[2] = b.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn color_jitter<R: Rng>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Result<Image> {
    image.check_range()?;
    let factors = JitterFactors::sample(config, rng);
    apply_jitter(image, &factors)
}

/// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn flip_boxes_h(annotations: &mut [Annotation], width: f64) {
    for a in annotations {
        let b = a.bbox;
        a.bbox = BBox { x1: width - b.x2, y1: b.y1, x2: width - b.x1, y2: b.y2 };
    }
}

fn flip_boxes_v(annotations: &mut [Annotation], height: f64) {
    for a in annotations {
        let b = a.bbox;
        a.bbox = BBox { x1: b.x1, y1: height - b.y2, x2: b.x2, y2: height - b.y1 };
    }
}

/// Geometric part of the pipeline: crop at a uniform offset, then flip.
///
/// Boxes are translated and clipped into the crop and dropped when less than
/// 30% of their area survives. Flips mirror boxes with `x' = W - x`.
pub fn random_crop_flip<R: Rng>(
    image: &Image,
    annotations: &[Annotation],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Vec<Annotation>)> {
    let (cw, ch) = config.crop_size.map_or((image.width, image.height), |c| (c, c));
    if cw > image.width || ch > image.height {
        return Err(Error::InvalidInput(format!(
            "crop size {cw} exceeds the {}x{} image",
            image.width, image.height
        )));
    }
    let (mut out, mut anns) = if cw == image.width && ch == image.height {
        (image.clone(), annotations.to_vec())
    } else {
        let x0 = rng.random_range(0..=image.width - cw);
        let y0 = rng.random_range(0..=image.height - ch);
        let cropped = image.crop(x0, y0, cw, ch)?;
        (cropped, remap_annotations(annotations, x0 as f64, y0 as f64, cw as f64, ch as f64))
    };
    if config.flip_h_prob > 0.0 && rng.random_bool(config.flip_h_prob) {
        out = out.flip_horizontal();
        flip_boxes_h(&mut anns, out.width as f64);
    }
    if config.flip_v_prob > 0.0 && rng.random_bool(config.flip_v_prob) {
        out = out.flip_vertical();
        flip_boxes_v(&mut anns, out.height as f64);
    }
    Ok((out, anns))
}

/// Full pipeline: crop and flips first, then color jitter. The foreground
/// flag is recomputed from the annotations that survive the crop.
pub fn compose(
    image: &Image,
    annotations: &[Annotation],
    config: &AugmentConfig,
    seed: u64,
) -> Result<(Image, Vec<Annotation>, bool)> {
    if !config.enabled {
        return Ok((image.clone(), annotations.to_vec(), label_foreground(annotations)));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, anns) = random_crop_flip(image, annotations, config, &mut rng)?;
    let img = color_jitter(&img, config, &mut rng)?;
    let fg = label_foreground(&anns);
    Ok((img, anns, fg))
}
