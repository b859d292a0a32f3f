//! Procedural single-grain images and bulk scenes with exact masks.
//!
//! A grain is a bent ellipse: in its own frame `(u, v)` a pixel center is
//! inside when `(2u/A)² + (2v'/B)² ≤ 1` with `v' = v − k·u²/(A/2)`, where `A`
//! and `B` are the full major and minor axes and `k` is the curvature. The
//! bend is a shear along a parabola, so the footprint area stays `π·A·B/4`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BulkSample, Composition, LabeledImage};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RgbImage};
use crate::variety::{RiceVariety, NUM_CLASSES};

const DEFAULT_MANIFEST: &str = include_str!("../assets/styles.json");

pub const MIN_SCENE_SIDE: u32 = 128;
pub const PLACEMENT_ATTEMPTS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainStyle {
    pub variety: RiceVariety,
    pub major_axis: f64,
    pub minor_axis: f64,
    pub base_color: [u8; 3],
    pub speckle_density: f64,
    pub curvature: f64,
}

impl GrainStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.major_axis > self.minor_axis && self.minor_axis > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{}: need major_axis > minor_axis > 0, got {} and {}",
                self.variety, self.major_axis, self.minor_axis
            )));
        }
        if !(0.0..=1.0).contains(&self.speckle_density) {
            return Err(Error::InvalidConfig(format!(
                "{}: speckle_density {} outside [0, 1]",
                self.variety, self.speckle_density
            )));
        }
        if !self.curvature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{}: curvature not finite",
                self.variety
            )));
        }
        Ok(())
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.major_axis / self.minor_axis
    }

    fn differing_fields(&self, other: &GrainStyle) -> usize {
        [
            self.major_axis != other.major_axis,
            self.minor_axis != other.minor_axis,
            self.base_color != other.base_color,
            self.speckle_density != other.speckle_density,
            self.curvature != other.curvature,
        ]
        .iter()
        .filter(|&&d| d)
        .count()
    }
}

/// The style set plus the rendering constants shared by all grains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleManifest {
    pub background: [u8; 3],
    /// Half-width of the uniform per-channel background noise.
    pub background_noise: u8,
    pub grain_noise: u8,
    pub tint_jitter: u8,
    /// Relative per-grain jitter applied independently to each axis.
    pub axis_jitter: f64,
    pub speckle_darkening: u8,
    /// Background margin around the grain in single-grain images.
    pub grain_margin: u32,
    /// Minimum foreground mean-color distance (RGB Euclidean) between styles,
    /// unless their aspect ratios differ by `min_aspect_separation`.
    pub min_color_separation: f64,
    pub min_aspect_separation: f64,
    pub styles: Vec<GrainStyle>,
}

impl Default for StyleManifest {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_MANIFEST).expect("bundled style manifest")
    }
}

impl StyleManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: StyleManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.len() != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "style manifest needs {NUM_CLASSES} styles, found {}",
                self.styles.len()
            )));
        }
        for (i, s) in self.styles.iter().enumerate() {
            s.validate()?;
            if s.variety.index() != i {
                return Err(Error::InvalidConfig(format!(
                    "style {i} is {}, expected {}",
                    s.variety,
                    RiceVariety::ALL[i]
                )));
            }
            for t in &self.styles[..i] {
                if s.differing_fields(t) < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "styles {} and {} differ in fewer than two fields",
                        t.variety, s.variety
                    )));
                }
            }
        }
        if !(0.0..0.5).contains(&self.axis_jitter) {
            return Err(Error::InvalidConfig(
                "axis_jitter must be in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }

    pub fn style(&self, variety: RiceVariety) -> &GrainStyle {
        &self.styles[variety.index()]
    }
}

/// A grain instance with its jittered geometry fixed.
#[derive(Debug, Clone, Copy)]
struct GrainShape {
    half_major: f64,
    half_minor: f64,
    curvature: f64,
    cos: f64,
    sin: f64,
}

impl GrainShape {
    fn draw(style: &GrainStyle, jitter: f64, rng: &mut impl Rng) -> Self {
        let mut j = || {
            1.0 + if jitter > 0.0 {
                rng.gen_range(-jitter..=jitter)
            } else {
                0.0
            }
        };
        let major = style.major_axis * j();
        let minor = (style.minor_axis * j()).min(major * 0.99);
        let angle = rng.gen_range(0.0..2.0 * PI);
        Self {
            half_major: major / 2.0,
            half_minor: minor / 2.0,
            curvature: style.curvature,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Offset (dx, dy) from the grain center.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let v = v - self.curvature * u * u / self.half_major;
        let a = u / self.half_major;
        let b = v / self.half_minor;
        a * a + b * b <= 1.0
    }

    fn reach(&self) -> i64 {
        (self.half_major * (1.0 + self.curvature.abs()) + 2.0).ceil() as i64
    }

    /// Covered pixels as (row, col) offsets from the integer anchor, with the
    /// true center at `anchor + (sub_y, sub_x)`.
    fn footprint(&self, sub_x: f64, sub_y: f64) -> Vec<(i64, i64)> {
        let r = self.reach();
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let px = dx as f64 + 0.5 - sub_x;
                let py = dy as f64 + 0.5 - sub_y;
                if self.contains(px, py) {
                    out.push((dy, dx));
                }
            }
        }
        out
    }
}

fn noisy(base: u8, amplitude: u8, rng: &mut impl Rng) -> u8 {
    if amplitude == 0 {
        return base;
    }
    let a = amplitude as i32;
    (base as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8
}

fn fill_background(img: &mut RgbImage, manifest: &StyleManifest, rng: &mut impl Rng) {
    for p in img.pixels_mut() {
        for c in 0..3 {
            p.0[c] = noisy(manifest.background[c], manifest.background_noise, rng);
        }
    }
}

fn grain_tint(style: &GrainStyle, manifest: &StyleManifest, rng: &mut impl Rng) -> [u8; 3] {
    style
        .base_color
        .map(|c| noisy(c, manifest.tint_jitter, rng))
}

fn paint_pixel(
    tint: [u8; 3],
    style: &GrainStyle,
    manifest: &StyleManifest,
    rng: &mut impl Rng,
) -> [u8; 3] {
    let speckled = rng.gen_bool(style.speckle_density);
    let mut px = tint.map(|c| noisy(c, manifest.grain_noise, rng));
    if speckled {
        px = px.map(|c| c.saturating_sub(manifest.speckle_darkening));
    }
    px
}

fn grain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A single-grain image with the renderer's coverage record.
#[derive(Debug, Clone)]
pub struct RenderedGrain {
    pub image: LabeledImage,
    pub coverage: BinaryMask,
}

/// Renders one grain of `style` on a noisy background. The frame is the
/// grain's bounding box plus `grain_margin` on every side, grown evenly to
/// at least the minimum corpus image side, so it matches a bulk crop.
pub fn render_grain(
    style: &GrainStyle,
    manifest: &StyleManifest,
    seed: u64,
) -> Result<RenderedGrain> {
    style.validate()?;
    let mut rng = grain_rng(seed, style.variety.index() as u64 + 1);
    let shape = GrainShape::draw(style, manifest.axis_jitter, &mut rng);
    let footprint = shape.footprint(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    if footprint.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} grain covers no pixels",
            style.variety
        )));
    }
    let (min_y, max_y, min_x, max_x) = bounds(&footprint);
    let margin = manifest.grain_margin as i64;
    let min_side = crate::corpus::MIN_IMAGE_SIDE as i64;
    let frame = |extent: i64| {
        let side = (extent + 2 * margin).max(min_side);
        (side, (side - extent) / 2)
    };
    let (width, left) = frame(max_x - min_x + 1);
    let (height, top) = frame(max_y - min_y + 1);

    let mut img = RgbImage::new(width as u32, height as u32);
    fill_background(&mut img, manifest, &mut rng);
    let tint = grain_tint(style, manifest, &mut rng);
    let mut coverage = BinaryMask::new(width as u32, height as u32);
    for &(dy, dx) in &footprint {
        let (y, x) = ((dy - min_y + top) as u32, (dx - min_x + left) as u32);
        img.put_pixel(
            x,
            y,
            image::Rgb(paint_pixel(tint, style, manifest, &mut rng)),
        );
        coverage.set(y, x, true);
    }
    Ok(RenderedGrain {
        image: LabeledImage {
            pixels: img,
            label: style.variety,
            source_id: format!("{}/seed_{seed}", style.variety),
        },
        coverage,
    })
}

/// (min_y, max_y, min_x, max_x) of a footprint.
fn bounds(footprint: &[(i64, i64)]) -> (i64, i64, i64, i64) {
    footprint.iter().fold(
        (i64::MAX, i64::MIN, i64::MAX, i64::MIN),
        |(a, b, c, d), &(y, x)| (a.min(y), b.max(y), c.min(x), d.max(x)),
    )
}

/// Renders one grain with the bundled style manifest's background settings.
pub fn gen_grain(style: &GrainStyle, seed: u64) -> Result<LabeledImage> {
    Ok(render_grain(style, &StyleManifest::default(), seed)?.image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width)
    pub canvas: (u32, u32),
    pub counts: Composition,
    pub allow_touching: bool,
    pub seed: u64,
    /// Minimum number of background pixels between two grains when
    /// `allow_touching` is false.
    #[serde(default = "default_min_gap")]
    pub min_gap: u32,
}

fn default_min_gap() -> u32 {
    3
}

impl SceneSpec {
    pub fn new(canvas: (u32, u32), counts: Composition, seed: u64) -> Self {
        Self {
            canvas,
            counts,
            allow_touching: false,
            seed,
            min_gap: default_min_gap(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::InvalidConfig(
                "scene needs at least one grain".into(),
            ));
        }
        let (h, w) = self.canvas;
        if h < MIN_SCENE_SIDE || w < MIN_SCENE_SIDE {
            return Err(Error::InvalidConfig(format!(
                "scene canvas {h}x{w} below {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}"
            )));
        }
        Ok(())
    }
}

/// Where one grain of a scene ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedGrain {
    pub variety: RiceVariety,
    /// (row, col) of the integer anchor.
    pub anchor: (u32, u32),
    pub pixel_count: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub sample: BulkSample,
    pub grains: Vec<PlacedGrain>,
}

/// Chebyshev dilation of a footprint, as a set of blocked canvas pixels.
fn block_around(blocked: &mut [bool], h: i64, w: i64, pixels: &[(i64, i64)], gap: i64) {
    for &(y, x) in pixels {
        for yy in (y - gap).max(0)..=(y + gap).min(h - 1) {
            for xx in (x - gap).max(0)..=(x + gap).min(w - 1) {
                blocked[(yy * w + xx) as usize] = true;
            }
        }
    }
}

/// Renders a bulk scene. The mask is the union of grain footprints and the
/// composition equals `spec.counts`.
pub fn gen_bulk_scene(spec: &SceneSpec, manifest: &StyleManifest) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let mut rng = grain_rng(spec.seed, 0);

    let mut order: Vec<RiceVariety> = spec
        .counts
        .iter()
        .flat_map(|(&v, &n)| std::iter::repeat_n(v, n))
        .collect();
    order.shuffle(&mut rng);

    let mut img = RgbImage::new(w, h);
    fill_background(&mut img, manifest, &mut rng);
    let mut mask = BinaryMask::new(w, h);
    let (hi, wi) = (h as i64, w as i64);
    let mut blocked = vec![false; (h * w) as usize];
    let gap = spec.min_gap.max(1) as i64;
    let mut grains = Vec::with_capacity(order.len());

    for (n, &variety) in order.iter().enumerate() {
        let style = manifest.style(variety);
        let shape = GrainShape::draw(style, manifest.axis_jitter, &mut rng);
        let footprint = shape.footprint(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (min_y, max_y, min_x, max_x) = bounds(&footprint);
        // anchors keeping the footprint one pixel inside the canvas
        let (lo_y, hi_y) = (1 - min_y, hi - 2 - max_y);
        let (lo_x, hi_x) = (1 - min_x, wi - 2 - max_x);
        if lo_y > hi_y || lo_x > hi_x {
            return Err(Error::Capacity {
                placed: n,
                requested: order.len(),
                attempts: 0,
            });
        }

        let mut anchor = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ay = rng.gen_range(lo_y..=hi_y);
            let ax = rng.gen_range(lo_x..=hi_x);
            let free = spec.allow_touching
                || footprint
                    .iter()
                    .all(|&(dy, dx)| !blocked[((ay + dy) * wi + ax + dx) as usize]);
            if free {
                anchor = Some((ay, ax));
                break;
            }
        }
        let Some((ay, ax)) = anchor else {
            return Err(Error::Capacity {
                placed: n,
                requested: order.len(),
                attempts: PLACEMENT_ATTEMPTS,
            });
        };

        let placed: Vec<(i64, i64)> = footprint
            .iter()
            .map(|&(dy, dx)| (ay + dy, ax + dx))
            .collect();
        if !spec.allow_touching {
            block_around(&mut blocked, hi, wi, &placed, gap);
        }
        let tint = grain_tint(style, manifest, &mut rng);
        for &(y, x) in &placed {
            let px = paint_pixel(tint, style, manifest, &mut rng);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
            mask.set(y as u32, x as u32, true);
        }
        grains.push(PlacedGrain {
            variety,
            anchor: (ay as u32, ax as u32),
            pixel_count: placed.len(),
        });
    }

    let composition = spec
        .counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&v, &n)| (v, n))
        .collect();
    let sample = BulkSample {
        pixels: img,
        mask,
        source_id: format!("scene_{}", spec.seed),
        composition: Some(composition),
    };
    Ok(Scene { sample, grains })
}

/// Ground-truth record of a generated single-grain corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainRecord {
    pub source_id: String,
    pub variety: RiceVariety,
    pub seed: u64,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | index);
    rng.gen()
}

/// `total` grains spread round-robin over the varieties.
pub fn gen_grain_corpus(
    manifest: &StyleManifest,
    total: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<GrainRecord>)> {
    let mut images = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let variety = RiceVariety::ALL[i % NUM_CLASSES];
        let grain_seed = derive_seed(seed, i as u64);
        let mut img = render_grain(manifest.style(variety), manifest, grain_seed)?.image;
        img.source_id = format!("{}/grain_{i:05}", variety.name());
        records.push(GrainRecord {
            source_id: img.source_id.clone(),
            variety,
            seed: grain_seed,
        });
        images.push(img);
    }
    Ok((images, records))
}

/// Options for [`gen_scene_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneCorpusOptions {
    pub canvas: (u32, u32),
    pub min_grains: usize,
    pub max_grains: usize,
    pub allow_touching: bool,
}

impl Default for SceneCorpusOptions {
    fn default() -> Self {
        Self {
            canvas: (128, 128),
            min_grains: 6,
            max_grains: 14,
            allow_touching: false,
        }
    }
}

/// Scene specs with random per-scene grain totals and varieties.
pub fn scene_specs(options: &SceneCorpusOptions, count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let scene_seed = derive_seed(seed, (1 << 20) + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let total =
                rng.gen_range(options.min_grains..=options.max_grains.max(options.min_grains));
            let mut counts = BTreeMap::new();
            for _ in 0..total {
                *counts
                    .entry(RiceVariety::ALL[rng.gen_range(0..NUM_CLASSES)])
                    .or_insert(0) += 1;
            }
            SceneSpec {
                canvas: options.canvas,
                counts,
                allow_touching: options.allow_touching,
                seed: scene_seed,
                min_gap: default_min_gap(),
            }
        })
        .collect()
}

pub fn gen_scene_corpus(
    manifest: &StyleManifest,
    options: &SceneCorpusOptions,
    count: usize,
    seed: u64,
) -> Result<Vec<BulkSample>> {
    scene_specs(options, count, seed)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut s = gen_bulk_scene(spec, manifest)?.sample;
            s.source_id = format!("scene_{i:04}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> StyleManifest {
        StyleManifest::default()
    }

    #[test]
    fn bundled_manifest_is_valid() {
        manifest().validate().unwrap();
    }

    #[test]
    fn grain_is_deterministic_per_seed() {
        let m = manifest();
        let s = m.style(RiceVariety::Hashemi);
        let a = render_grain(s, &m, 5).unwrap();
        let b = render_grain(s, &m, 5).unwrap();
        assert_eq!(a.image, b.image);
        let c = render_grain(s, &m, 6).unwrap();
        assert_ne!(a.image.pixels, c.image.pixels);
    }

    #[test]
    fn anbarboo_coverage_matches_ellipse_area() {
        let m = manifest();
        let s = m.style(RiceVariety::AnbarBoo);
        let g = render_grain(s, &m, 1).unwrap();
        let expected = PI * s.major_axis * s.minor_axis / 4.0;
        let got = g.coverage.count() as f64;
        assert!(
            (got - expected).abs() <= 0.15 * expected,
            "{got} vs {expected}"
        );
        assert_eq!(g.image.label, RiceVariety::AnbarBoo);
    }

    #[test]
    fn styles_are_separable() {
        let m = manifest();
        let stats: Vec<([f64; 3], f64)> = m
            .styles
            .iter()
            .map(|s| {
                let g = render_grain(s, &m, 0).unwrap();
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for (x, y, p) in g.image.pixels.enumerate_pixels() {
                    if g.coverage.get(y, x) {
                        for (s, &v) in sum.iter_mut().zip(&p.0) {
                            *s += v as f64;
                        }
                        n += 1.0;
                    }
                }
                (sum.map(|v| v / n), s.aspect_ratio())
            })
            .collect();
        for i in 0..stats.len() {
            for j in 0..i {
                let d = (0..3)
                    .map(|c| (stats[i].0[c] - stats[j].0[c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let da = (stats[i].1 - stats[j].1).abs();
                assert!(
                    d >= m.min_color_separation || da >= m.min_aspect_separation,
                    "styles {i} and {j}: color distance {d}, aspect gap {da}"
                );
            }
        }
    }

    #[test]
    fn style_validation() {
        let mut s = manifest().styles[0].clone();
        s.minor_axis = s.major_axis;
        assert!(s.validate().is_err());
        let mut m = manifest();
        m.styles[1] = GrainStyle {
            variety: RiceVariety::AnbarBoo,
            ..m.styles[0].clone()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn single_grain_scene() {
        let counts = BTreeMap::from([(RiceVariety::Hashemi, 1)]);
        let scene =
            gen_bulk_scene(&SceneSpec::new((128, 128), counts.clone(), 3), &manifest()).unwrap();
        assert_eq!(scene.grains.len(), 1);
        assert_eq!(scene.sample.mask.count(), scene.grains[0].pixel_count);
        assert_eq!(scene.sample.composition, Some(counts));
    }

    #[test]
    fn over_capacity_scene_fails() {
        let counts = BTreeMap::from([(RiceVariety::Hashemi, 400)]);
        let err = gen_bulk_scene(&SceneSpec::new((128, 128), counts, 1), &manifest()).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }), "{err}");
    }

    #[test]
    fn invalid_scene_specs() {
        let m = manifest();
        assert!(gen_bulk_scene(&SceneSpec::new((128, 128), BTreeMap::new(), 1), &m).is_err());
        let counts = BTreeMap::from([(RiceVariety::Khazar, 1)]);
        assert!(gen_bulk_scene(&SceneSpec::new((64, 128), counts, 1), &m).is_err());
    }

    #[test]
    fn scene_is_pure_function_of_spec() {
        let m = manifest();
        let spec = &scene_specs(&SceneCorpusOptions::default(), 1, 11)[0];
        let a = gen_bulk_scene(spec, &m).unwrap();
        let b = gen_bulk_scene(spec, &m).unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.grains, b.grains);
    }

    #[test]
    fn corpus_is_round_robin() {
        let (imgs, recs) = gen_grain_corpus(&manifest(), 14, 2).unwrap();
        assert_eq!(imgs.len(), 14);
        for (i, (img, rec)) in imgs.iter().zip(&recs).enumerate() {
            assert_eq!(img.label, RiceVariety::ALL[i % 7]);
            assert_eq!(rec.variety, img.label);
            assert!(img.pixels.width() >= 32);
        }
    }
}
