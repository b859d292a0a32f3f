//! Bulk prediction: segment a mixed-sample image, split it into grains,
//! classify every grain and report the variety composition.

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::corpus::{Composition, MIN_IMAGE_SIDE};
use crate::error::Result;
use crate::instances::{extract_grains, BoundingBox, ExtractParams, GrainInstance};
use crate::segmenter::{binarize, Segmenter};
use crate::variety::RiceVariety;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainPrediction {
    /// Half-open `(row0, col0, row1, col1)`.
    pub bbox: BoundingBox,
    pub variety: RiceVariety,
    /// Highest class probability for this grain.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub counts: BTreeMap<RiceVariety, usize>,
    pub fractions: BTreeMap<RiceVariety, f64>,
    pub total: usize,
    #[serde(rename = "grains")]
    pub per_grain: Vec<GrainPrediction>,
}

impl CompositionReport {
    /// Builds a report from raw counts. Missing varieties count as zero.
    pub fn from_counts(counts: &Composition) -> Self {
        let counts: BTreeMap<_, _> = RiceVariety::ALL
            .iter()
            .map(|&v| (v, counts.get(&v).copied().unwrap_or(0)))
            .collect();
        let total: usize = counts.values().sum();
        CompositionReport {
            fractions: fractions(&counts, total),
            counts,
            total,
            per_grain: Vec::new(),
        }
    }

    pub fn from_grains(per_grain: Vec<GrainPrediction>) -> Self {
        let mut counts = Composition::new();
        for g in &per_grain {
            *counts.entry(g.variety).or_insert(0) += 1;
        }
        CompositionReport {
            per_grain,
            ..Self::from_counts(&counts)
        }
    }
}

fn fractions(counts: &BTreeMap<RiceVariety, usize>, total: usize) -> BTreeMap<RiceVariety, f64> {
    counts
        .iter()
        .map(|(&v, &n)| {
            (
                v,
                if total == 0 {
                    0.0
                } else {
                    n as f64 / total as f64
                },
            )
        })
        .collect()
}

/// Runs segment, extract, classify and aggregate on one image. Crops are
/// grown to at least the minimum corpus image side so they are framed like
/// the single-grain images the classifier was trained on.
pub fn predict_bulk(
    image: &RgbImage,
    segmenter: &Segmenter,
    classifier: &Classifier,
    params: &ExtractParams,
    threshold: f64,
) -> Result<CompositionReport> {
    Ok(predict_bulk_with_crops(image, segmenter, classifier, params, threshold)?.0)
}

/// [`predict_bulk`], also returning the instances in report order.
pub fn predict_bulk_with_crops(
    image: &RgbImage,
    segmenter: &Segmenter,
    classifier: &Classifier,
    params: &ExtractParams,
    threshold: f64,
) -> Result<(CompositionReport, Vec<GrainInstance>)> {
    let mask = binarize(&segmenter.predict_mask(image), threshold);
    let params = ExtractParams {
        min_side: params.min_side.max(MIN_IMAGE_SIDE),
        ..*params
    };
    let grains = extract_grains(image, &mask, &params)?;
    let per_grain = grains
        .par_iter()
        .map(|g| {
            let probs = classifier.predict(&g.crop);
            GrainPrediction {
                bbox: g.bounding_box,
                variety: probs.label(),
                confidence: probs.max(),
            }
        })
        .collect();
    Ok((CompositionReport::from_grains(per_grain), grains))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionError {
    /// Predicted minus true count.
    pub count_delta: BTreeMap<RiceVariety, i64>,
    pub l1_fraction_error: f64,
}

/// Compares a report against true counts. A truth with no grains has all
/// fractions zero.
pub fn compare_composition(report: &CompositionReport, truth: &Composition) -> CompositionError {
    let truth = CompositionReport::from_counts(truth);
    let mut count_delta = BTreeMap::new();
    let mut l1 = 0.0;
    for v in RiceVariety::ALL {
        let pred = report.counts.get(&v).copied().unwrap_or(0);
        count_delta.insert(v, pred as i64 - truth.counts[&v] as i64);
        let pf = report.fractions.get(&v).copied().unwrap_or(0.0);
        l1 += (pf - truth.fractions[&v]).abs();
    }
    CompositionError {
        count_delta,
        l1_fraction_error: l1,
    }
}
