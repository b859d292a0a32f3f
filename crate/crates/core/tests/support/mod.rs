//! Checks shared by the integration tests and the acceptance harness. Each
//! returns `Ok(detail)` or `Err(reason)` so callers can assert or report.
#![allow(dead_code)]

use graindeck_core::augment::{flip, random_augment, rotate, scale, AugmentConfig, Axis};
use graindeck_core::bulkpredict::{compare_composition, CompositionReport};
use graindeck_core::classifier::{Classifier, ClassifierConfig, ResBlock};
use graindeck_core::corpus::{
    holdout_indices, split_labels, Composition, LabeledImage, SplitRatios,
};
use graindeck_core::imaging::{BinaryMask, RgbImage};
use graindeck_core::metrics::{self, ConfusionMatrix};
use graindeck_core::nn::loss::{sigmoid, softmax};
use graindeck_core::nn::{ParamSet, Tensor};
use graindeck_core::segmenter::{binarize, ProbMask, Segmenter, SegmenterConfig};
use graindeck_core::RiceVariety::{self, *};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

/// Published confusion matrix, rows = true class, canonical order.
pub const REFERENCE_CONFUSION: [[u64; 7]; 7] = [
    [36, 3, 5, 4, 11, 0, 0],
    [5, 56, 0, 5, 0, 0, 2],
    [6, 0, 34, 2, 12, 1, 6],
    [7, 6, 6, 37, 5, 0, 8],
    [10, 0, 2, 5, 44, 1, 4],
    [9, 4, 9, 1, 27, 5, 4],
    [10, 2, 3, 5, 11, 0, 33],
];

/// Published (precision, recall, f1) per class at 2 decimals.
pub const REFERENCE_SCORES: [[f64; 3]; 7] = [
    [0.43, 0.61, 0.51],
    [0.79, 0.82, 0.81],
    [0.58, 0.56, 0.57],
    [0.63, 0.54, 0.58],
    [0.40, 0.67, 0.50],
    [0.71, 0.08, 0.15],
    [0.58, 0.52, 0.55],
];

pub fn reference_matrix() -> ConfusionMatrix {
    ConfusionMatrix::new(REFERENCE_CONFUSION)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn scores_from_confusion() -> Check {
    let stats = metrics::class_metrics(&reference_matrix());
    let mut bad = Vec::new();
    for (s, want) in stats.iter().zip(REFERENCE_SCORES) {
        let got = [s.precision, s.recall, s.f1].map(round2);
        for (k, name) in ["precision", "recall", "f1"].iter().enumerate() {
            if (got[k] - want[k]).abs() > 1e-9 {
                bad.push(format!(
                    "{} {name} {:.4} != {:.2}",
                    s.variety,
                    [s.precision, s.recall, s.f1][k],
                    want[k]
                ));
            }
        }
    }
    let acc = metrics::accuracy(&reference_matrix());
    if (acc - 245.0 / 446.0).abs() > 1e-12
        || format!("{acc:.4}") != "0.5493"
        || format!("{:.0}", acc * 100.0) != "55"
    {
        bad.push(format!("accuracy {acc}"));
    }
    if bad.is_empty() {
        Ok(format!("21/21 cells match, accuracy {acc:.4}"))
    } else {
        Err(bad.join("; "))
    }
}

pub fn macro_averages() -> Check {
    let s = metrics::summary(&reference_matrix());
    let p_ok = (s.macro_precision - 0.589).abs() <= 0.001;
    let f_ok = (s.macro_f1 - 0.524).abs() <= 0.001;
    let detail = format!(
        "macro precision {:.6} (target 0.589), macro f1 {:.6} (target 0.524), f1 < precision: {}",
        s.macro_precision,
        s.macro_f1,
        s.macro_f1 < s.macro_precision
    );
    if p_ok && f_ok && s.macro_f1 < s.macro_precision {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn scene_fixture() -> Check {
    let pred: Composition = [
        (Hashemi, 7),
        (AnbarBoo, 8),
        (Khazar, 3),
        (SadreeDomSiahe, 3),
    ]
    .into_iter()
    .collect();
    let truth: Composition = [
        (Hashemi, 5),
        (AnbarBoo, 5),
        (Khazar, 4),
        (SadreeDomSiahe, 7),
    ]
    .into_iter()
    .collect();
    let e = compare_composition(&CompositionReport::from_counts(&pred), &truth);
    let deltas: Vec<i64> = [Hashemi, AnbarBoo, Khazar, SadreeDomSiahe]
        .iter()
        .map(|v| e.count_delta[v])
        .collect();
    let detail = format!("deltas {deltas:?}, l1 {:.6}", e.l1_fraction_error);
    if deltas == [2, 3, -1, -4]
        && (e.l1_fraction_error - 10.0 / 21.0).abs() < 1e-12
        && format!("{:.4}", e.l1_fraction_error) == "0.4762"
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- numerics ----

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| randn(rng)).collect())
}

/// Adds noise to every parameter so that no gradient is vanishingly small.
fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v += 0.2 * randn(rng);
        }
    }
}

/// Compares analytic gradients with central differences at `samples`
/// randomly chosen scalar parameters.
fn gradcheck<F, G>(params: &mut ParamSet, samples: usize, seed: u64, loss: F, grad: G) -> Check
where
    F: Fn(&ParamSet) -> f64,
    G: Fn(&ParamSet) -> Vec<Vec<f64>>,
{
    const H: f64 = 1e-6;
    let analytic = grad(params);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    if total < samples {
        return Err(format!("model has only {total} parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, total, samples).into_vec();
    picks.sort_unstable();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let orig = params.tensors()[t].data[i];
        params.tensors_mut()[t].data[i] = orig + H;
        let up = loss(params);
        params.tensors_mut()[t].data[i] = orig - H;
        let down = loss(params);
        params.tensors_mut()[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[t][i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-7 {
            0.0
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(rel);
        if rel >= 1e-3 {
            failures.push(format!(
                "{}[{i}] analytic {a:e} numeric {numeric:e}",
                params.tensors()[t].name
            ));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "{samples} of {total} params, max rel err {worst:.2e}"
        ))
    } else {
        Err(failures.join("; "))
    }
}

pub fn micro_classifier_config() -> ClassifierConfig {
    ClassifierConfig {
        input_size: 16,
        stage_widths: vec![4, 6],
        blocks_per_stage: vec![1, 1],
        num_classes: 7,
        head_only_epochs: 0,
    }
}

pub fn gradcheck_classifier(samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Classifier::new(micro_classifier_config(), 5).map_err(|e| e.to_string())?;
    jitter(model.params_mut(), &mut rng);
    let input = random_tensor(3, 16, 16, &mut rng);
    let mut params = model.params().clone();
    let with = |p: &ParamSet| {
        let mut m = model.clone();
        m.load_params(p).expect("same architecture");
        m
    };
    gradcheck(
        &mut params,
        samples,
        12,
        |p| with(p).loss_grad(&input, Khazar, false).0,
        |p| with(p).loss_grad(&input, Khazar, false).1 .0,
    )
}

pub fn micro_segmenter_config() -> SegmenterConfig {
    SegmenterConfig {
        input_size: 8,
        depth: 2,
        base_channels: 2,
        threshold: 0.5,
    }
}

pub fn gradcheck_segmenter(samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = Segmenter::new(micro_segmenter_config(), 6).map_err(|e| e.to_string())?;
    jitter(model.params_mut(), &mut rng);
    let input = random_tensor(3, 8, 8, &mut rng);
    let target: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2)).collect();
    let mut params = model.params().clone();
    let with = |p: &ParamSet| {
        let mut m = model.clone();
        m.load_params(p).expect("same architecture");
        m
    };
    gradcheck(
        &mut params,
        samples,
        22,
        |p| with(p).loss_grad(&input, &target).0,
        |p| with(p).loss_grad(&input, &target).1 .0,
    )
}

/// Residual blocks with a zeroed second convolution reduce to their
/// shortcut, across widths, strides and spatial sizes.
pub fn residual_identity_matrix() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut n = 0;
    for (cin, cout, stride) in [
        (3, 3, 1),
        (4, 4, 1),
        (4, 8, 2),
        (5, 7, 1),
        (6, 6, 2),
        (8, 16, 2),
    ] {
        for size in [4, 7, 12] {
            let mut ps = ParamSet::new();
            let block = ResBlock::new(&mut ps, "b", cin, cout, stride, 1.0, &mut rng);
            let x = random_tensor(cin, size, size, &mut rng);
            let expected = match &block.projection {
                Some(p) => p.forward(&ps, &x).0,
                None => x.clone(),
            };
            ps.get_mut(block.conv2.weight).fill(0.0);
            ps.get_mut(block.conv2.bias).fill(0.0);
            let (y, _) = block.forward(&ps, &x);
            if y != expected {
                return Err(format!(
                    "block {cin}->{cout} stride {stride} size {size} is not its shortcut"
                ));
            }
            n += 1;
        }
    }
    for config in [micro_classifier_config(), ClassifierConfig::desk()] {
        let model = Classifier::new(config.clone(), 1).map_err(|e| e.to_string())?;
        let s = config.input_size as usize;
        let logits = model.logits(&random_tensor(3, s, s, &mut rng));
        if logits.len() != 7 || !logits.iter().all(|v| v.is_finite()) {
            return Err(format!(
                "classifier {config:?} gave {} logits",
                logits.len()
            ));
        }
        n += 1;
    }
    Ok(format!("{n} configurations"))
}

pub fn unet_shape_matrix() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut n = 0;
    for depth in 1..=4usize {
        for mult in [1usize, 2, 3] {
            let size = (1 << depth) * mult * 2;
            let cfg = SegmenterConfig {
                input_size: size as u32,
                depth,
                base_channels: 2,
                threshold: 0.5,
            };
            let model = Segmenter::new(cfg, 1).map_err(|e| e.to_string())?;
            let mut trace = Vec::new();
            let (y, _) = model.forward_traced(&random_tensor(3, size, size, &mut rng), &mut trace);
            if y.shape() != (1, size, size) {
                return Err(format!("depth {depth} size {size}: output {:?}", y.shape()));
            }
            if trace.len() != depth || trace.iter().any(|t| t.skip != t.upsampled) {
                return Err(format!(
                    "depth {depth} size {size}: skip mismatch {trace:?}"
                ));
            }
            n += 1;
        }
        let bad = SegmenterConfig {
            input_size: (1 << depth) as u32 * 3 + 1,
            depth,
            base_channels: 2,
            threshold: 0.5,
        };
        if Segmenter::new(bad, 1).is_ok() {
            return Err(format!("depth {depth} accepted an indivisible input"));
        }
    }
    Ok(format!("{n} configurations"))
}

pub fn activation_invariants(count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for i in 0..count {
        let spread = [1.0, 30.0, 1000.0][i % 3];
        let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-spread..spread)).collect();
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-12 {
            return Err(format!("softmax off the simplex for {logits:?}: {p:?}"));
        }
        let z = rng.gen_range(-spread..spread);
        let s = sigmoid(z);
        if !(0.0..=1.0).contains(&s) || (s + sigmoid(-z) - 1.0).abs() > 1e-12 {
            return Err(format!("sigmoid({z}) = {s}"));
        }
        if sigmoid(z + 1e-3 * spread) < s {
            return Err(format!("sigmoid not monotone at {z}"));
        }
    }
    Ok(format!("{count} softmax and {count} sigmoid inputs"))
}

// ---- property suites ----

pub const PROPERTY_CASES: u32 = 256;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    runner(PROPERTY_CASES)
        .run(&strategy, test)
        .map(|()| format!("{PROPERTY_CASES} cases"))
        .map_err(|e| e.to_string())
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        let n = (w * h) as usize;
        (
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::from_values(w, h, a),
                    BinaryMask::from_values(w, h, b),
                )
            })
    })
}

pub fn prop_iou() -> Check {
    run(mask_pair(), |(a, b)| {
        let ab = metrics::iou(&a, &b).unwrap();
        prop_assert_eq!(ab, metrics::iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.count() > 0 {
            prop_assert_eq!(metrics::iou(&a, &a).unwrap(), 1.0);
        }
        let empty = BinaryMask::new(a.width(), a.height());
        prop_assert_eq!(metrics::iou(&empty, &empty).unwrap(), 1.0);
        Ok(())
    })
}

fn prob_mask() -> impl Strategy<Value = ProbMask> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0.0f64..=1.0, (w * h) as usize).prop_map(move |values| ProbMask {
            width: w,
            height: h,
            values,
        })
    })
}

pub fn prop_binarize() -> Check {
    run((prob_mask(), 0.0f64..1.0, 0.0f64..1.0), |(p, t1, t2)| {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let loose = binarize(&p, lo);
        let strict = binarize(&p, hi);
        for (s, l) in strict.values().iter().zip(loose.values()) {
            prop_assert!(s <= l, "raising the threshold added a pixel");
        }
        // a binary mask survives re-binarization and a PNG-style round trip
        let as_prob = ProbMask {
            width: p.width,
            height: p.height,
            values: strict.values().iter().map(|&v| f64::from(v)).collect(),
        };
        prop_assert_eq!(&binarize(&as_prob, lo), &strict);
        prop_assert_eq!(&BinaryMask::from_gray(&strict.to_gray()), &strict);
        Ok(())
    })
}

fn small_image() -> impl Strategy<Value = RgbImage> {
    (1u32..10, 1u32..10).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
            .prop_map(move |raw| RgbImage::from_raw(w, h, raw).expect("buffer size"))
    })
}

pub fn prop_augment() -> Check {
    run((small_image(), any::<u64>()), |(img, seed)| {
        for axis in [Axis::Horizontal, Axis::Vertical] {
            prop_assert_eq!(&flip(&flip(&img, axis), axis), &img);
        }
        let quarter = (0..4).fold(img.clone(), |acc, _| rotate(&acc, 90.0));
        prop_assert_eq!(&quarter, &img);
        prop_assert_eq!(&rotate(&rotate(&img, 180.0), 180.0), &img);
        prop_assert_eq!(&rotate(&img, 0.0), &img);
        prop_assert_eq!(&scale(&img, 1.0), &img);
        let sample = LabeledImage {
            pixels: img.clone(),
            label: Shirodi,
            source_id: "p".into(),
        };
        let out = random_augment(
            &sample,
            &AugmentConfig::identity(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        prop_assert_eq!(&out.pixels, &img);
        prop_assert_eq!(out.label, Shirodi);
        let drawn = random_augment(
            &sample,
            &AugmentConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        prop_assert_eq!(drawn.pixels.dimensions(), img.dimensions());
        Ok(())
    })
}

fn ratios() -> impl Strategy<Value = SplitRatios> {
    (1u32..10, 0u32..10, 0u32..10).prop_map(|(a, b, c)| {
        let t = f64::from(a + b + c);
        SplitRatios([f64::from(a) / t, f64::from(b) / t, f64::from(c) / t])
    })
}

pub fn prop_split() -> Check {
    let labels = proptest::collection::vec(3usize..25, 7).prop_map(|counts| {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(RiceVariety::ALL[c], n))
            .collect::<Vec<_>>()
    });
    run(
        (labels, ratios(), any::<u64>(), 0.0f64..0.9),
        |(labels, ratios, seed, frac)| {
            let split = split_labels(&labels, ratios, seed).unwrap();
            let mut all: Vec<usize> = split
                .parts()
                .iter()
                .flat_map(|p| p.iter().copied())
                .collect();
            all.sort_unstable();
            prop_assert_eq!(
                all,
                (0..labels.len()).collect::<Vec<_>>(),
                "parts must partition the samples"
            );
            prop_assert_eq!(&split, &split_labels(&labels, ratios, seed).unwrap());

            let (kept, held) = holdout_indices(labels.len(), frac, seed).unwrap();
            let mut both: Vec<usize> = kept.iter().chain(&held).copied().collect();
            both.sort_unstable();
            prop_assert_eq!(both, (0..labels.len()).collect::<Vec<_>>());
            Ok(())
        },
    )
}
