//! Model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The weight file layout (version 1, all integers little-endian):
//!
//! ```text
//! magic    b"GDWT"
//! version  u32 = 1
//! count    u32                  number of tensors
//! count × {
//!   name_len u32, name          UTF-8 bytes
//!   ndim     u32, dims          u64 × ndim
//!   data     f64 × Π dims       IEEE-754 little-endian, row-major
//! }
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic::{write_atomic, write_json};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::segmenter::{Segmenter, SegmenterConfig};
use crate::variety::RiceVariety;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"GDWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub class_order: Vec<String>,
    /// Seed used for weight initialization.
    pub init_seed: u64,
    pub training_seed: Option<u64>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub weights_file: String,
}

pub fn encode_weights(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.scalar_count() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end
            .ok_or_else(|| Error::Checkpoint(format!("truncated weights at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported weights version {version}"
        )));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(name, shape, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

fn save(dir: &Path, manifest: &Manifest, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(WEIGHTS_FILE), &encode_weights(params))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.format_version != WEIGHTS_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {}",
            m.format_version
        )));
    }
    if m.class_order != RiceVariety::names() {
        return Err(Error::Checkpoint(format!(
            "unexpected class order {:?}",
            m.class_order
        )));
    }
    Ok(m)
}

fn read_params(dir: &Path, m: &Manifest) -> Result<ParamSet> {
    let path = dir.join(&m.weights_file);
    decode_weights(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
}

fn manifest(
    kind: ModelKind,
    init_seed: u64,
    training_seed: Option<u64>,
    config: serde_json::Value,
    metrics: serde_json::Value,
) -> Manifest {
    Manifest {
        format_version: WEIGHTS_VERSION,
        model_kind: kind,
        class_order: RiceVariety::names().iter().map(|s| s.to_string()).collect(),
        init_seed,
        training_seed,
        config,
        metrics,
        weights_file: WEIGHTS_FILE.to_string(),
    }
}

fn config_json<T: Serialize>(config: &T) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

pub fn save_classifier(
    dir: &Path,
    model: &Classifier,
    training_seed: Option<u64>,
    metrics: serde_json::Value,
) -> Result<()> {
    let m = manifest(
        ModelKind::Classifier,
        model.seed,
        training_seed,
        config_json(&model.config),
        metrics,
    );
    save(dir, &m, model.params())
}

pub fn save_segmenter(
    dir: &Path,
    model: &Segmenter,
    training_seed: Option<u64>,
    metrics: serde_json::Value,
) -> Result<()> {
    let m = manifest(
        ModelKind::Segmenter,
        model.seed,
        training_seed,
        config_json(&model.config),
        metrics,
    );
    save(dir, &m, model.params())
}

fn expect_kind(m: &Manifest, kind: ModelKind) -> Result<()> {
    if m.model_kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            m.model_kind
        )));
    }
    Ok(())
}

pub fn load_classifier(dir: &Path) -> Result<Classifier> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ModelKind::Classifier)?;
    let config: ClassifierConfig = serde_json::from_value(m.config.clone())
        .map_err(|e| Error::json(dir.join(MANIFEST_FILE), e))?;
    let mut model = Classifier::new(config, m.init_seed)?;
    model.load_params(&read_params(dir, &m)?)?;
    Ok(model)
}

pub fn load_segmenter(dir: &Path) -> Result<Segmenter> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ModelKind::Segmenter)?;
    let config: SegmenterConfig = serde_json::from_value(m.config.clone())
        .map_err(|e| Error::json(dir.join(MANIFEST_FILE), e))?;
    let mut model = Segmenter::new(config, m.init_seed)?;
    model.load_params(&read_params(dir, &m)?)?;
    Ok(model)
}
