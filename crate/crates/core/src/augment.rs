//! Label-preserving flips, rotations and rescaling.

use image::imageops;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledImage;
use crate::error::{Error, Result};
use crate::imaging::{border_median, sample_bilinear, to_u8, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Continuous rotation interval in degrees.
    pub rotation_degrees: (f64, f64),
    /// Right-angle rotations drawn uniformly and added to the continuous part.
    pub right_angles: Vec<u32>,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: (-15.0, 15.0),
            right_angles: vec![0, 90, 180, 270],
            scale_range: (0.9, 1.1),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which [`random_augment`] is the identity.
    pub fn identity() -> Self {
        Self {
            rotation_degrees: (0.0, 0.0),
            right_angles: vec![0],
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.rotation_degrees;
        let (s0, s1) = self.scale_range;
        if !(r0.is_finite() && r1.is_finite() && r0 <= r1) {
            return Err(Error::InvalidConfig(format!(
                "rotation interval [{r0}, {r1}]"
            )));
        }
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale interval [{s0}, {s1}]")));
        }
        for p in [self.hflip_prob, self.vflip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("flip probability {p}")));
            }
        }
        if self.right_angles.iter().any(|a| a % 90 != 0) {
            return Err(Error::InvalidConfig(
                "right_angles must be multiples of 90".into(),
            ));
        }
        Ok(())
    }
}

pub fn flip(img: &RgbImage, axis: Axis) -> RgbImage {
    match axis {
        Axis::Horizontal => imageops::flip_horizontal(img),
        Axis::Vertical => imageops::flip_vertical(img),
    }
}

/// Counter-clockwise rotation. Multiples of 90° are exact pixel permutations;
/// other angles resample bilinearly onto the same canvas, filling uncovered
/// area with the border median.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let turns = degrees / 90.0;
    if turns.fract() == 0.0 {
        return match (turns as i64).rem_euclid(4) {
            0 => img.clone(),
            1 => imageops::rotate270(img),
            2 => imageops::rotate180(img),
            _ => imageops::rotate90(img),
        };
    }
    let fill = border_median(img);
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cx + dx * cos - dy * sin;
        let sy = cy + dx * sin + dy * cos;
        image::Rgb(sample_bilinear(img, sx, sy, fill).map(to_u8))
    })
}

/// Rescales about the center, cropping or padding back to the input shape.
pub fn scale(img: &RgbImage, factor: f64) -> RgbImage {
    assert!(factor > 0.0, "scale factor must be positive");
    if factor == 1.0 {
        return img.clone();
    }
    let fill = border_median(img);
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    RgbImage::from_fn(w, h, |x, y| {
        let sx = cx + (x as f64 - cx) / factor;
        let sy = cy + (y as f64 - cy) / factor;
        image::Rgb(sample_bilinear(img, sx, sy, fill).map(to_u8))
    })
}

/// Parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub degrees: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub fn sample(config: &AugmentConfig, square: bool, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        };
        let scale = uniform(rng, config.scale_range);
        // quarter turns would transpose non-square images
        let angles: Vec<u32> = config
            .right_angles
            .iter()
            .copied()
            .filter(|a| square || (a / 90) % 2 == 0)
            .collect();
        let right = if angles.is_empty() {
            0
        } else {
            angles[rng.gen_range(0..angles.len())]
        };
        let degrees = right as f64 + uniform(rng, config.rotation_degrees);
        let hflip = rng.gen_bool(config.hflip_prob);
        let vflip = rng.gen_bool(config.vflip_prob);
        Self {
            scale,
            degrees,
            hflip,
            vflip,
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = scale(img, self.scale);
        let right = (self.degrees / 90.0).round() * 90.0;
        if right != 0.0 {
            out = rotate(&out, right);
        }
        let rest = self.degrees - right;
        if rest != 0.0 {
            out = rotate(&out, rest);
        }
        if self.hflip {
            out = flip(&out, Axis::Horizontal);
        }
        if self.vflip {
            out = flip(&out, Axis::Vertical);
        }
        out
    }
}

/// Scale, then rotate, then flip, with parameters drawn from `config`.
pub fn random_augment(
    sample: &LabeledImage,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> LabeledImage {
    let (w, h) = sample.pixels.dimensions();
    let draw = AugmentDraw::sample(config, w == h, rng);
    LabeledImage {
        pixels: draw.apply(&sample.pixels),
        label: sample.label,
        source_id: sample.source_id.clone(),
    }
}
