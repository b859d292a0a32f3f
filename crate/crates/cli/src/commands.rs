//! Subcommand bodies. Each resolves its config, writes `run-manifest.json`
//! first, then its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use graindeck_core::atomic::{write_atomic, write_json};
use graindeck_core::bulkpredict::{compare_composition, predict_bulk_with_crops};
use graindeck_core::checkpoint::{
    load_classifier, load_segmenter, save_classifier, save_segmenter,
};
use graindeck_core::classifier::{train_classifier, Classifier, ClassifierConfig};
use graindeck_core::corpus::{
    holdout_indices, load_bulk_dataset, load_grain_dataset, stratified_split, write_bulk_dataset,
    write_grain_dataset, BulkSample, Composition, SplitRatios,
};
use graindeck_core::imaging::{self, BinaryMask};
use graindeck_core::metrics::{
    self, confusion_from_predictions, ClassificationReport, ConfusionMatrix,
};
use graindeck_core::segmenter::{binarize, train_segmenter, Segmenter, SegmenterConfig};
use graindeck_core::synth::{gen_grain_corpus, gen_scene_corpus, scene_specs, StyleManifest};
use graindeck_core::train::{sig6, Hyper, TrainHistory};
use graindeck_core::RiceVariety;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, RunManifest};
use crate::{usage, Command, HyperArgs, Preset};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const METRICS: &str = "metrics.json";
pub const CONFUSION: &str = "confusion.csv";
pub const HISTORY: &str = "history.csv";
pub const COMPOSITION: &str = "composition.json";

pub fn dispatch(command: &Command, mut cfg: RunConfig) -> Result<()> {
    resolve(command, &mut cfg);
    let out = cfg.output_dir.clone().expect("output dir resolved");
    check_disjoint(&out, &cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
    };
    write_rounded(&out.join(RUN_MANIFEST), &manifest)?;
    match command {
        Command::SynthGen(_) => synth_gen(&cfg, &out),
        Command::TrainClassifier(_) => train_classifier_cmd(&cfg, &out),
        Command::TrainSegmenter(_) => train_segmenter_cmd(&cfg, &out),
        Command::EvalClassifier(_) => eval_classifier(&cfg, &out),
        Command::EvalSegmenter(_) => eval_segmenter(&cfg, &out),
        Command::PredictGrain(_) => predict_grain(&cfg, &out),
        Command::PredictBulk(_) => predict_bulk_cmd(&cfg, &out),
    }
}

fn set<T>(slot: &mut T, flag: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn apply_hyper(h: &mut Hyper, args: &HyperArgs) {
    set(&mut h.epochs, &args.epochs);
    set(&mut h.learning_rate, &args.learning_rate);
    set(&mut h.batch_size, &args.batch_size);
}

/// Flags win over config-file values.
fn resolve(command: &Command, cfg: &mut RunConfig) {
    let inputs = &mut cfg.inputs;
    match command {
        Command::SynthGen(a) => {
            set(&mut cfg.synth.grains, &a.grains);
            set(&mut cfg.synth.scenes, &a.scenes);
            set_path(&mut inputs.styles, &a.styles);
            if let Some(side) = a.canvas {
                cfg.synth.scene.canvas = (side, side);
            }
            set(&mut cfg.synth.scene.min_grains, &a.min_grains);
            set(&mut cfg.synth.scene.max_grains, &a.max_grains);
            cfg.synth.scene.allow_touching |= a.touching;
        }
        Command::TrainClassifier(a) => {
            set_path(&mut inputs.data, &a.data);
            apply_hyper(&mut cfg.classifier_training, &a.hyper);
            match a.preset {
                Some(Preset::Desk) => cfg.classifier = ClassifierConfig::desk(),
                Some(Preset::FullScale) => cfg.classifier = ClassifierConfig::full_scale(),
                None => {}
            }
            if let Some(r) = a.split {
                cfg.split = SplitRatios(r);
            }
        }
        Command::TrainSegmenter(a) => {
            set_path(&mut inputs.data, &a.data);
            apply_hyper(&mut cfg.segmenter_training, &a.hyper);
            if a.desk {
                cfg.segmenter = SegmenterConfig::desk();
            }
            set(&mut cfg.validation_fraction, &a.validation_fraction);
        }
        Command::EvalClassifier(a) => {
            set_path(&mut inputs.predictions, &a.predictions);
            set_path(&mut inputs.checkpoint, &a.checkpoint);
            set_path(&mut inputs.data, &a.data);
        }
        Command::EvalSegmenter(a) => {
            set_path(&mut inputs.checkpoint, &a.checkpoint);
            set_path(&mut inputs.data, &a.data);
            if a.threshold.is_some() {
                cfg.threshold = a.threshold;
            }
        }
        Command::PredictGrain(a) => {
            set_path(&mut inputs.checkpoint, &a.checkpoint);
            set_path(&mut inputs.image, &a.image);
        }
        Command::PredictBulk(a) => {
            set_path(&mut inputs.image, &a.image);
            set_path(&mut inputs.segmenter, &a.segmenter);
            set_path(&mut inputs.classifier, &a.classifier);
            set_path(&mut inputs.truth, &a.truth);
            if a.threshold.is_some() {
                cfg.threshold = a.threshold;
            }
            set(&mut cfg.extract.min_area, &a.min_area);
            set(&mut cfg.extract.pad, &a.pad);
            set(&mut cfg.extract.connectivity, &a.connectivity);
            cfg.dump_crops |= a.dump_crops;
        }
    }
}

/// Refuses output directories that are, or sit inside, an input path, so
/// no command writes into its inputs.
fn check_disjoint(out: &Path, cfg: &RunConfig) -> Result<()> {
    let out_abs = absolute(out);
    for input in cfg.inputs.all() {
        let input_abs = absolute(input);
        if out_abs.starts_with(&input_abs) {
            return Err(usage(format!(
                "output directory {} lies inside input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    if let Ok(c) = p.canonicalize() {
        return c;
    }
    // not created yet: canonicalize the nearest existing ancestor
    match (p.parent(), p.file_name()) {
        (Some(parent), Some(name)) if !parent.as_os_str().is_empty() => absolute(parent).join(name),
        _ => std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf()),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| usage(format!("--{flag} is required")))
}

/// Rounds every non-integer number to the report precision.
pub fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn rounded<T: Serialize>(value: &T) -> Result<Value> {
    let mut v = serde_json::to_value(value).context("serializing report")?;
    round_floats(&mut v);
    Ok(v)
}

fn write_rounded<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, &rounded(value)?)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let styles = match &cfg.inputs.styles {
        Some(p) => StyleManifest::load(p)?,
        None => StyleManifest::default(),
    };
    styles.validate()?;
    let (grains, records) = gen_grain_corpus(&styles, cfg.synth.grains, cfg.seed)?;
    if cfg.synth.grains > 0 {
        write_grain_dataset(&out.join("grains"), &grains)?;
    }
    let specs = scene_specs(&cfg.synth.scene, cfg.synth.scenes, cfg.seed);
    if cfg.synth.scenes > 0 {
        let scenes = gen_scene_corpus(&styles, &cfg.synth.scene, cfg.synth.scenes, cfg.seed)?;
        write_bulk_dataset(&out.join("bulk"), &scenes)?;
    }
    let ids: Vec<String> = (0..specs.len()).map(|i| format!("scene_{i:04}")).collect();
    write_rounded(
        &out.join("synth.json"),
        &json!({
            "styles": styles,
            "grains": records,
            "scenes": ids.iter().zip(&specs).map(|(id, s)| json!({"source_id": id, "spec": s})).collect::<Vec<_>>(),
        }),
    )
}

fn classification_json(cm: &ConfusionMatrix, extra: Value) -> Result<Value> {
    let report = ClassificationReport::new(cm);
    let mut v = json!({
        "samples": cm.total(),
        "summary": report.summary,
        "per_class": report.per_class,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    // headline numbers at the top level
    if let Value::Object(map) = &mut v {
        map.insert("accuracy".into(), json!(report.summary.accuracy));
        map.insert(
            "macro_precision".into(),
            json!(report.summary.macro_precision),
        );
        map.insert("macro_f1".into(), json!(report.summary.macro_f1));
    }
    round_floats(&mut v);
    Ok(v)
}

fn write_classification(
    out: &Path,
    pairs: &[(RiceVariety, RiceVariety)],
    extra: Value,
) -> Result<Value> {
    let cm = confusion_from_predictions(pairs)?;
    let v = classification_json(&cm, extra)?;
    write_json(&out.join(METRICS), &v)?;
    write_text(&out.join(CONFUSION), &cm.to_csv())?;
    Ok(v)
}

fn write_history(out: &Path, history: &TrainHistory) -> Result<()> {
    write_text(&out.join(HISTORY), &history.to_csv())
}

fn train_classifier_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require(&cfg.inputs.data, "data")?;
    let samples = load_grain_dataset(data)?;
    let split = stratified_split(&samples, cfg.split, cfg.seed)?;
    let mut model = Classifier::new(cfg.classifier.clone(), cfg.seed)?;
    let history = train_classifier(
        &mut model,
        &samples,
        &split,
        &cfg.classifier_training,
        &cfg.augment,
    )?;
    write_history(out, &history)?;

    let (held_name, held) = if split.test.is_empty() {
        ("validation", &split.validation)
    } else {
        ("test", &split.test)
    };
    let pairs: Vec<_> = held
        .iter()
        .map(|&i| (samples[i].label, model.predict_label(&samples[i].pixels)))
        .collect();
    let metrics = write_classification(
        out,
        &pairs,
        json!({
            "evaluated_on": held_name,
            "best_epoch": history.best_epoch,
            "best_validation_accuracy": history.best().val_score,
        }),
    )?;
    let ids = |part: &[usize]| {
        part.iter()
            .map(|&i| samples[i].source_id.clone())
            .collect::<Vec<_>>()
    };
    write_json(
        &out.join("split.json"),
        &json!({"train": ids(&split.train), "validation": ids(&split.validation), "test": ids(&split.test)}),
    )?;
    save_classifier(&out.join("classifier"), &model, Some(cfg.seed), metrics)?;
    Ok(())
}

fn segmentation_json(model: &Segmenter, samples: &[&BulkSample], threshold: f64) -> Result<Value> {
    let predicted: Vec<BinaryMask> = samples
        .iter()
        .map(|s| binarize(&model.predict_mask(&s.pixels), threshold))
        .collect();
    let pairs: Vec<_> = predicted
        .iter()
        .zip(samples)
        .map(|(p, s)| (p, &s.mask))
        .collect();
    let summary = metrics::dataset_iou(&pairs)?;
    let per_image = pairs
        .iter()
        .zip(samples)
        .map(|((p, t), s)| Ok(json!({"source_id": s.source_id, "iou": metrics::iou(p, t)?})))
        .collect::<Result<Vec<_>>>()?;
    rounded(&json!({
        "samples": samples.len(),
        "threshold": threshold,
        "iou": summary.aggregate,
        "iou_mean_per_image": summary.mean_per_image,
        "per_image": per_image,
    }))
}

fn train_segmenter_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require(&cfg.inputs.data, "data")?;
    let samples = load_bulk_dataset(data)?;
    let (train_idx, val_idx) = holdout_indices(samples.len(), cfg.validation_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&train_idx), pick(&val_idx));
    let mut model = Segmenter::new(cfg.segmenter.clone(), cfg.seed)?;
    let history = train_segmenter(&mut model, &train, &val, &cfg.segmenter_training)?;
    write_history(out, &history)?;

    let (held_name, held) = if val.is_empty() {
        ("train", &train)
    } else {
        ("validation", &val)
    };
    let mut metrics = segmentation_json(
        &model,
        &held.iter().collect::<Vec<_>>(),
        model.config.threshold,
    )?;
    if let Value::Object(map) = &mut metrics {
        map.insert("evaluated_on".into(), json!(held_name));
        map.insert("best_epoch".into(), json!(history.best_epoch));
    }
    write_json(&out.join(METRICS), &metrics)?;
    save_segmenter(&out.join("segmenter"), &model, Some(cfg.seed), metrics)?;
    Ok(())
}

fn eval_classifier(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pairs = if let Some(p) = &cfg.inputs.predictions {
        metrics::load_prediction_pairs(p)?
    } else {
        let model = load_classifier(require(&cfg.inputs.checkpoint, "checkpoint")?)?;
        let samples = load_grain_dataset(require(&cfg.inputs.data, "data")?)?;
        let pairs: Vec<_> = samples
            .iter()
            .map(|s| (s.label, model.predict_label(&s.pixels)))
            .collect();
        write_text(
            &out.join("predictions.csv"),
            &metrics::prediction_pairs_csv(&pairs),
        )?;
        pairs
    };
    write_classification(out, &pairs, json!({}))?;
    Ok(())
}

fn eval_segmenter(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_segmenter(require(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let samples = load_bulk_dataset(require(&cfg.inputs.data, "data")?)?;
    let threshold = cfg.threshold.unwrap_or(model.config.threshold);
    let metrics = segmentation_json(&model, &samples.iter().collect::<Vec<_>>(), threshold)?;
    write_json(&out.join(METRICS), &metrics)?;
    Ok(())
}

fn predict_grain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_classifier(require(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let image = imaging::load_rgb(require(&cfg.inputs.image, "image")?)?;
    let probs = model.predict(&image);
    let by_name: serde_json::Map<String, Value> = RiceVariety::ALL
        .iter()
        .map(|v| (v.name().to_string(), json!(probs.0[v.index()])))
        .collect();
    write_rounded(
        &out.join("prediction.json"),
        &json!({"variety": probs.label(), "confidence": probs.max(), "probabilities": by_name}),
    )
}

fn predict_bulk_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let image = imaging::load_rgb(require(&cfg.inputs.image, "image")?)?;
    let seg = load_segmenter(require(&cfg.inputs.segmenter, "segmenter")?)?;
    let cls = load_classifier(require(&cfg.inputs.classifier, "classifier")?)?;
    let threshold = cfg.threshold.unwrap_or(seg.config.threshold);
    let truth: Option<Composition> = match &cfg.inputs.truth {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing composition {}", p.display()))?,
            )
        }
        None => None,
    };
    let (report, grains) = predict_bulk_with_crops(&image, &seg, &cls, &cfg.extract, threshold)?;
    write_rounded(&out.join(COMPOSITION), &report)?;
    if let Some(truth) = truth {
        write_rounded(
            &out.join("composition-error.json"),
            &compare_composition(&report, &truth),
        )?;
    }
    if cfg.dump_crops {
        let dir = out.join("crops");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, g) in grains.iter().enumerate() {
            imaging::save_png(&g.crop, &dir.join(format!("grain_{i:03}.png")))?;
        }
    }
    Ok(())
}
