//! Rice grain analysis toolkit.
//!
//! Two networks drive the pipeline: a residual classifier that assigns one of
//! seven varieties to a single-grain image, and an encoder-decoder segmenter
//! that produces a grain mask for a bulk image. Bulk prediction chains them:
//!
//! 1. **Segment** – [`segmenter::Segmenter::predict_mask`] and [`segmenter::binarize`].
//! 2. **Extract** – [`instances::extract_grains`] turns mask components into crops.
//! 3. **Classify** – [`classifier::Classifier::predict_label`] per crop.
//! 4. **Aggregate** – [`bulkpredict::predict_bulk`] builds a [`bulkpredict::CompositionReport`].
//!
//! [`synth`] generates procedural corpora with exact masks and known
//! composition, [`corpus`] reads and writes the on-disk dataset layouts and
//! [`metrics`] holds the confusion-matrix and IoU evaluation suite.

pub mod atomic;
pub mod augment;
pub mod bulkpredict;
pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod imaging;
pub mod instances;
pub mod metrics;
pub mod nn;
pub mod segmenter;
pub mod synth;
pub mod train;
pub mod variety;

pub use error::{Error, Result};
pub use variety::RiceVariety;
