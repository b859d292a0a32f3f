//! Classification and segmentation metrics.
//!
//! Confusion matrices follow the rows = true class, columns = predicted
//! class convention, in canonical variety order. Degenerate 0/0 ratios
//! evaluate to 0, except IoU of two empty masks which is 1.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::variety::{RiceVariety, NUM_CLASSES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Support of class `c`: number of true samples.
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Expands the counts back into (true, predicted) pairs, row-major.
    pub fn to_pairs(&self) -> Vec<(RiceVariety, RiceVariety)> {
        let mut out = Vec::with_capacity(self.total() as usize);
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    out.push((RiceVariety::ALL[t], RiceVariety::ALL[p]));
                }
            }
        }
        out
    }

    /// CSV with a header row and column of variety names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in RiceVariety::names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(RiceVariety::ALL[t].name());
            for n in row {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Layout(format!("confusion CSV: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .split(',')
            .collect();
        if header.len() != NUM_CLASSES + 1 || header[1..] != RiceVariety::names() {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut counts = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (t, line) in lines.enumerate() {
            if t >= NUM_CLASSES {
                return Err(bad("too many rows".into()));
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != NUM_CLASSES + 1 || cells[0] != RiceVariety::ALL[t].name() {
                return Err(bad(format!("row {t}: {line}")));
            }
            for (p, cell) in cells[1..].iter().enumerate() {
                counts[t][p] = cell
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad count {cell:?}")))?;
            }
        }
        Ok(Self { counts })
    }
}

pub fn confusion_from_predictions(pairs: &[(RiceVariety, RiceVariety)]) -> Result<ConfusionMatrix> {
    if pairs.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let mut cm = ConfusionMatrix::default();
    for &(t, p) in pairs {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `num / den`, with 0/0 defined as 1 (empty-vs-empty overlap).
pub fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub variety: RiceVariety,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// One-vs-rest statistics for every class.
pub fn class_metrics(cm: &ConfusionMatrix) -> [ClassStats; NUM_CLASSES] {
    let total = cm.total();
    RiceVariety::ALL.map(|v| {
        let c = v.index();
        let tp = cm.counts[c][c];
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        let tn = total - tp - fp - fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassStats {
            variety: v,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    })
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

/// Macro (unweighted) and support-weighted averages.
pub fn summary(cm: &ConfusionMatrix) -> MetricsSummary {
    let stats = class_metrics(cm);
    let n = NUM_CLASSES as f64;
    let total = cm.total() as f64;
    let mean = |f: fn(&ClassStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let weighted = |f: fn(&ClassStats) -> f64| {
        if total == 0.0 {
            0.0
        } else {
            stats.iter().map(|s| f(s) * s.support as f64).sum::<f64>() / total
        }
    };
    MetricsSummary {
        accuracy: accuracy(cm),
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        weighted_precision: weighted(|s| s.precision),
        weighted_recall: weighted(|s| s.recall),
        weighted_f1: weighted(|s| s.f1),
    }
}

/// Full classification report as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub summary: MetricsSummary,
    pub per_class: Vec<ClassStats>,
    pub confusion: ConfusionMatrix,
}

impl ClassificationReport {
    pub fn new(cm: &ConfusionMatrix) -> Self {
        Self {
            summary: summary(cm),
            per_class: class_metrics(cm).to_vec(),
            confusion: *cm,
        }
    }
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("IoU operands", a.shape(), b.shape()));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .fold((0, 0), |(i, u), (&x, &y)| {
            (
                i + u64::from(x != 0 && y != 0),
                u + u64::from(x != 0 || y != 0),
            )
        }))
}

/// Intersection over union; two empty masks give 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (i, u) = overlap(a, b)?;
    Ok(ratio_or_one(i, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetIou {
    pub mean_per_image: f64,
    pub aggregate: f64,
}

/// Mean of per-image IoU and the pooled Σ|A∩B| / Σ|A∪B|.
pub fn dataset_iou(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<DatasetIou> {
    if pairs.is_empty() {
        return Err(Error::Empty("mask pairs"));
    }
    let mut sum = 0.0;
    let (mut inter, mut union) = (0, 0);
    for (a, b) in pairs {
        let (i, u) = overlap(a, b)?;
        sum += ratio_or_one(i, u);
        inter += i;
        union += u;
    }
    Ok(DatasetIou {
        mean_per_image: sum / pairs.len() as f64,
        aggregate: ratio_or_one(inter, union),
    })
}

/// Loads `(true, predicted)` pairs from a two-column CSV of variety names
/// (header `true,predicted`).
pub fn load_prediction_pairs(path: &Path) -> Result<Vec<(RiceVariety, RiceVariety)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("true")) {
            continue;
        }
        let (t, p) = line.split_once(',').ok_or_else(|| {
            Error::Layout(format!(
                "{}:{}: expected `true,predicted`",
                path.display(),
                n + 1
            ))
        })?;
        out.push((t.trim().parse()?, p.trim().parse()?));
    }
    Ok(out)
}

pub fn prediction_pairs_csv(pairs: &[(RiceVariety, RiceVariety)]) -> String {
    let mut out = String::from("true,predicted\n");
    for (t, p) in pairs {
        let _ = writeln!(out, "{t},{p}");
    }
    out
}
