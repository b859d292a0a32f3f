//! Dataset types, the on-disk layouts and stratified splitting.
//!
//! Single-grain layout: `<root>/<VarietyName>/<file>.{png,jpg,jpeg}`, one
//! directory per variety and nothing else.
//!
//! Bulk layout: `<root>/images/<id>.png` paired with `<root>/masks/<id>.png`
//! (8-bit grayscale, value > 127 is grain) plus an optional
//! `<root>/composition.json` mapping `id → {variety name → count}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage};
use crate::variety::{RiceVariety, NUM_CLASSES};

pub const MIN_IMAGE_SIDE: u32 = 32;
pub const COMPOSITION_FILE: &str = "composition.json";

pub type Composition = BTreeMap<RiceVariety, usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: RgbImage,
    pub label: RiceVariety,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BulkSample {
    pub pixels: RgbImage,
    pub mask: BinaryMask,
    pub source_id: String,
    pub composition: Option<Composition>,
}

impl BulkSample {
    pub fn new(pixels: RgbImage, mask: BinaryMask, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let shape = imaging::shape_of(&pixels);
        if mask.shape() != shape {
            return Err(Error::shape(source_id, shape, mask.shape()));
        }
        Ok(Self {
            pixels,
            mask,
            source_id,
            composition: None,
        })
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect())
}

/// Loads the single-grain dataset in (variety, filename) order.
pub fn load_grain_dataset(root: &Path) -> Result<Vec<LabeledImage>> {
    let mut found = BTreeSet::new();
    for path in read_dir_sorted(root)? {
        if !path.is_dir() {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        match name.parse::<RiceVariety>() {
            Ok(v) => {
                found.insert(v);
            }
            Err(_) => return Err(Error::UnexpectedDirectory(path)),
        }
    }
    let missing: Vec<_> = RiceVariety::ALL
        .into_iter()
        .filter(|v| !found.contains(v))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }

    let mut out = Vec::new();
    for variety in RiceVariety::ALL {
        let dir = root.join(variety.name());
        for file in image_files(&dir)? {
            let pixels = imaging::load_rgb(&file)?;
            if pixels.width() < MIN_IMAGE_SIDE || pixels.height() < MIN_IMAGE_SIDE {
                return Err(Error::ImageTooSmall {
                    path: file,
                    height: pixels.height(),
                    width: pixels.width(),
                });
            }
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            out.push(LabeledImage {
                pixels,
                label: variety,
                source_id: format!("{}/{}", variety.name(), stem),
            });
        }
    }
    Ok(out)
}

/// Loads image/mask pairs in filename order, attaching composition when a
/// sidecar is present.
pub fn load_bulk_dataset(root: &Path) -> Result<Vec<BulkSample>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "missing directory {}",
                dir.display()
            )));
        }
    }
    let names = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(image_files(dir)?
            .into_iter()
            .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
            .collect())
    };
    let images = names(&images_dir)?;
    let masks = names(&masks_dir)?;
    if let Some(p) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Unpaired(images[p].clone()));
    }
    if let Some(p) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Unpaired(masks[p].clone()));
    }

    let composition_path = root.join(COMPOSITION_FILE);
    let mut compositions: BTreeMap<String, Composition> = if composition_path.is_file() {
        let text =
            fs::read_to_string(&composition_path).map_err(|e| Error::io(&composition_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&composition_path, e))?
    } else {
        BTreeMap::new()
    };

    let mut out = Vec::with_capacity(images.len());
    for (name, image_path) in &images {
        let pixels = imaging::load_rgb(image_path)?;
        let mask = BinaryMask::from_gray(&imaging::load_gray(&masks[name])?);
        let id = Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if mask.shape() != imaging::shape_of(&pixels) {
            return Err(Error::shape(
                format!("mask {}", masks[name].display()),
                imaging::shape_of(&pixels),
                mask.shape(),
            ));
        }
        let composition = compositions.remove(&id);
        out.push(BulkSample {
            pixels,
            mask,
            source_id: id,
            composition,
        });
    }
    Ok(out)
}

/// Writes single-grain images as `<root>/<Variety>/<stem>.png`, where the
/// stem is the part of `source_id` after the last `/`.
pub fn write_grain_dataset(root: &Path, samples: &[LabeledImage]) -> Result<()> {
    for v in RiceVariety::ALL {
        let dir = root.join(v.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let stem = s.source_id.rsplit('/').next().unwrap_or(&s.source_id);
        let path = root.join(s.label.name()).join(format!("{stem}.png"));
        imaging::save_png(&s.pixels, &path)?;
    }
    Ok(())
}

/// Writes bulk samples as `images/<id>.png`, `masks/<id>.png` and a
/// `composition.json` covering samples that carry one.
pub fn write_bulk_dataset(root: &Path, samples: &[BulkSample]) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut compositions = BTreeMap::new();
    for s in samples {
        imaging::save_png(&s.pixels, &images_dir.join(format!("{}.png", s.source_id)))?;
        imaging::save_png(
            &s.mask.to_gray(),
            &masks_dir.join(format!("{}.png", s.source_id)),
        )?;
        if let Some(c) = &s.composition {
            compositions.insert(s.source_id.clone(), c.clone());
        }
    }
    if !compositions.is_empty() {
        crate::atomic::write_json(&root.join(COMPOSITION_FILE), &compositions)?;
    }
    Ok(())
}

/// Seeded two-way split of `0..n` for unlabeled samples: returns
/// (kept, held out) with `round(n * fraction)` held out, both ascending.
pub fn holdout_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {fraction} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (n as f64 * fraction).round() as usize;
    let mut out = order.split_off(held);
    order.sort_unstable();
    out.sort_unstable();
    Ok((out, order))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([0.7, 0.15, 0.15])
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = self.0;
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be non-negative: {r:?}"
            )));
        }
        if r[0] <= 0.0 {
            return Err(Error::InvalidConfig("train ratio must be positive".into()));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must sum to 1: {r:?}"
            )));
        }
        Ok(())
    }

    /// Every non-empty part needs at least one sample of each class.
    pub fn min_per_class(&self) -> usize {
        self.0.iter().filter(|&&x| x > 0.0).count()
    }
}

/// Indices into the sample list the split was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn select<'a, T>(indices: &[usize], samples: &'a [T]) -> Vec<&'a T> {
        indices.iter().map(|&i| &samples[i]).collect()
    }
}

const FRACTION_EPS: f64 = 1e-9;

/// Per-part sample counts for one class by largest remainder. Ties go to the
/// part whose running total lags its ideal most, which keeps the aggregate
/// sizes as balanced as the per-class counts.
fn allocate(n: usize, ratios: &[f64; 3], deficit: &mut [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * n as f64);
    let mut counts = ideal.map(|x| (x + FRACTION_EPS).floor() as usize);
    let mut remaining = n - counts.iter().sum::<usize>();
    for p in 0..3 {
        deficit[p] += ideal[p] - counts[p] as f64;
    }
    let frac = |p: usize| ideal[p] - counts[p] as f64;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() > FRACTION_EPS {
            return fb.total_cmp(&fa);
        }
        if (deficit[a] - deficit[b]).abs() > FRACTION_EPS {
            return deficit[b].total_cmp(&deficit[a]);
        }
        a.cmp(&b)
    });
    for &p in order.iter().filter(|&&p| ratios[p] > 0.0) {
        if remaining == 0 {
            break;
        }
        counts[p] += 1;
        deficit[p] -= 1.0;
        remaining -= 1;
    }
    debug_assert_eq!(remaining, 0);
    counts
}

/// Stratified, seeded split. Each class is shuffled independently (keyed by
/// seed and class index) and cut into contiguous train/validation/test runs.
pub fn stratified_split(
    samples: &[LabeledImage],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    split_labels(&labels, ratios, seed)
}

/// [`stratified_split`] over bare labels.
pub fn split_labels(
    labels: &[RiceVariety],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let required = ratios.min_per_class();
    for v in RiceVariety::ALL {
        let found = by_class[v.index()].len();
        if found < required {
            return Err(Error::InsufficientSamples {
                class: v,
                found,
                required,
            });
        }
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    let mut deficit = [0.0; 3];
    for v in RiceVariety::ALL {
        let mut members = by_class[v.index()].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v.index() as u64 + 1);
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(members.len(), &ratios.0, &mut deficit);
        split.train.extend_from_slice(&members[..n_train]);
        split
            .validation
            .extend_from_slice(&members[n_train..n_train + n_val]);
        split.test.extend_from_slice(&members[n_train + n_val..]);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(per_class: usize) -> Vec<RiceVariety> {
        RiceVariety::ALL
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, per_class))
            .collect()
    }

    #[test]
    fn seventy_sample_split_counts() {
        let l = labels(10);
        let s = split_labels(&l, SplitRatios::default(), 42).unwrap();
        assert_eq!(s.train.len(), 49);
        assert_eq!(s.validation.len() + s.test.len(), 21);
        assert!(matches!(s.validation.len(), 10 | 11));
        for v in RiceVariety::ALL {
            let count = |part: &[usize]| part.iter().filter(|&&i| l[i] == v).count();
            assert_eq!(count(&s.train), 7);
            assert!(matches!(count(&s.validation), 1 | 2));
            assert!(matches!(count(&s.test), 1 | 2));
        }
        let mut all: Vec<_> = s.parts().concat();
        all.sort();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let l = labels(1);
        let s = split_labels(&l, SplitRatios([1.0, 0.0, 0.0]), 3).unwrap();
        assert_eq!(s.train.len(), 7);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let l = labels(6);
        let a = split_labels(&l, SplitRatios::default(), 9).unwrap();
        let b = split_labels(&l, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = split_labels(&l, SplitRatios::default(), 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn too_few_samples_names_the_class() {
        let mut l = labels(3);
        l.retain(|&v| v != RiceVariety::Khazar);
        l.push(RiceVariety::Khazar);
        l.push(RiceVariety::Khazar);
        match split_labels(&l, SplitRatios::default(), 0) {
            Err(Error::InsufficientSamples {
                class,
                found,
                required,
            }) => {
                assert_eq!(class, RiceVariety::Khazar);
                assert_eq!((found, required), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        let l = labels(5);
        assert!(split_labels(&l, SplitRatios([0.5, 0.2, 0.2]), 0).is_err());
        assert!(split_labels(&l, SplitRatios([1.2, -0.1, -0.1]), 0).is_err());
    }
}
