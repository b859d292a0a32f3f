//! Run configuration: a JSON file, then command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use graindeck_core::augment::AugmentConfig;
use graindeck_core::classifier::ClassifierConfig;
use graindeck_core::corpus::SplitRatios;
use graindeck_core::instances::ExtractParams;
use graindeck_core::segmenter::SegmenterConfig;
use graindeck_core::synth::SceneCorpusOptions;
use graindeck_core::train::Hyper;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Grain dataset for classifier commands, bulk dataset for segmenter ones.
    pub data: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Ground-truth composition for `predict-bulk`.
    pub truth: Option<PathBuf>,
    /// Style manifest for `synth-gen` (bundled styles when absent).
    pub styles: Option<PathBuf>,
}

impl Inputs {
    pub fn all(&self) -> impl Iterator<Item = &PathBuf> {
        [
            &self.data,
            &self.predictions,
            &self.checkpoint,
            &self.image,
            &self.segmenter,
            &self.classifier,
            &self.truth,
            &self.styles,
        ]
        .into_iter()
        .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub grains: usize,
    pub scenes: usize,
    pub scene: SceneCorpusOptions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grains: 70,
            scenes: 10,
            scene: SceneCorpusOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not recorded in manifests, so runs into different directories
    /// produce identical trees.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub inputs: Inputs,
    pub synth: SynthConfig,
    pub classifier: ClassifierConfig,
    pub classifier_training: Hyper,
    pub split: SplitRatios,
    pub augment: AugmentConfig,
    pub segmenter: SegmenterConfig,
    pub segmenter_training: Hyper,
    /// Fraction of bulk samples held out to pick the best segmenter epoch.
    pub validation_fraction: f64,
    pub extract: ExtractParams,
    /// Mask threshold; the segmenter checkpoint's own value when absent.
    pub threshold: Option<f64>,
    pub dump_crops: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            inputs: Inputs::default(),
            synth: SynthConfig::default(),
            classifier: ClassifierConfig::default(),
            classifier_training: Hyper::default(),
            split: SplitRatios::default(),
            augment: AugmentConfig::default(),
            segmenter: SegmenterConfig::default(),
            segmenter_training: Hyper::segmenter(),
            validation_fraction: 0.2,
            extract: ExtractParams::default(),
            threshold: None,
            dump_crops: false,
        }
    }
}

/// What every run records next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a config file. A previous `run-manifest.json` is accepted too,
    /// in which case its resolved config is reused.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Propagates the global seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.classifier_training.seed = seed;
        self.segmenter_training.seed = seed;
        self.augment.seed = seed;
    }
}
