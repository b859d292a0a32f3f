//! Encoder-decoder grain segmenter.
//!
//! `depth` encoder levels of conv-ReLU-conv-ReLU followed by 2×2 max pooling
//! (channels doubling per level), a bottleneck at the lowest resolution, and
//! mirrored decoder levels: 2×2 transposed-convolution upsampling, channel
//! concatenation with the same-resolution encoder output, conv-ReLU-conv-ReLU.
//! A 1×1 convolution yields one logit per pixel; the probability is its sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::BulkSample;
use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage};
use crate::metrics;
use crate::nn::layers::{self, ConvCache};
use crate::nn::loss::{bce_dice, sigmoid};
use crate::nn::{Conv2d, ConvTranspose2x2, Grads, ParamSet, Tensor};
use crate::train::{fit, FitSpec, Hyper, TrainHistory, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub input_size: u32,
    pub depth: usize,
    pub base_channels: usize,
    pub threshold: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            depth: 4,
            base_channels: 16,
            threshold: 0.5,
        }
    }
}

impl SegmenterConfig {
    /// CPU-sized preset matched to 128×128 synthetic scenes.
    pub fn desk() -> Self {
        Self {
            input_size: 128,
            depth: 3,
            base_channels: 8,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 1u32.checked_shl(self.depth as u32).unwrap_or(0);
        if self.depth == 0
            || unit == 0
            || self.input_size == 0
            || !self.input_size.is_multiple_of(unit)
        {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 2^depth = 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "base_channels must be positive".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Per-pixel grain probability, row-major H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// `value > threshold` → 1.
pub fn binarize(prob: &ProbMask, threshold: f64) -> BinaryMask {
    BinaryMask::from_values(
        prob.width,
        prob.height,
        prob.values
            .iter()
            .map(|&v| u8::from(v > threshold))
            .collect(),
    )
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

struct DoubleConvCache {
    a: ConvCache,
    a_out: Tensor,
    b: ConvCache,
    b_out: Tensor,
}

impl DoubleConv {
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            a: Conv2d::new(
                params,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                1,
                1,
                1.0,
                rng,
            ),
            b: Conv2d::new(
                params,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                1,
                1,
                1.0,
                rng,
            ),
        }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, DoubleConvCache) {
        let (a_out, a) = self.a.forward(params, x);
        let (b_out, b) = self.b.forward(params, &a_out.relu());
        (b_out.relu(), DoubleConvCache { a, a_out, b, b_out })
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &DoubleConvCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let d = Tensor::relu_backward(&cache.b_out, dy);
        let d = self.b.backward(params, &cache.b, &d, grads);
        let d = Tensor::relu_backward(&cache.a_out, &d);
        self.a.backward(params, &cache.a, &d, grads)
    }
}

/// Encoder level cache, pre-pool shape and pool argmax.
type EncoderCache = (DoubleConvCache, (usize, usize, usize), Vec<usize>);

pub struct ForwardCache {
    encoders: Vec<EncoderCache>,
    bottleneck: DoubleConvCache,
    decoders: Vec<(Tensor, usize, DoubleConvCache)>,
    head_cache: ConvCache,
}

/// Spatial shapes met at one decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipTrace {
    pub level: usize,
    /// (channels, height, width) of the encoder output.
    pub skip: (usize, usize, usize),
    /// (channels, height, width) of the upsampled decoder feature.
    pub upsampled: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub seed: u64,
    params: ParamSet,
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<ConvTranspose2x2>,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let width = |level: usize| config.base_channels << level;
        let mut encoders = Vec::with_capacity(config.depth);
        let mut cin = 3;
        for l in 0..config.depth {
            encoders.push(DoubleConv::new(
                &mut params,
                &format!("enc{l}"),
                cin,
                width(l),
                &mut rng,
            ));
            cin = width(l);
        }
        let bottleneck = DoubleConv::new(
            &mut params,
            "bottleneck",
            cin,
            width(config.depth),
            &mut rng,
        );
        let mut ups = Vec::with_capacity(config.depth);
        let mut decoders = Vec::with_capacity(config.depth);
        for l in (0..config.depth).rev() {
            ups.push(ConvTranspose2x2::new(
                &mut params,
                &format!("up{l}"),
                width(l + 1),
                width(l),
                &mut rng,
            ));
            decoders.push(DoubleConv::new(
                &mut params,
                &format!("dec{l}"),
                2 * width(l),
                width(l),
                &mut rng,
            ));
        }
        let head = Conv2d::new(&mut params, "head", width(0), 1, 1, 1, 0, 0.5, &mut rng);
        Ok(Self {
            config,
            seed,
            params,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.copy_from(params).map_err(Error::Checkpoint)
    }

    /// Per-pixel logits (1×H×W) for a normalized input whose sides are
    /// multiples of 2^depth.
    pub fn forward(&self, input: &Tensor) -> (Tensor, ForwardCache) {
        self.forward_traced(input, &mut Vec::new())
    }

    pub fn forward_traced(
        &self,
        input: &Tensor,
        trace: &mut Vec<SkipTrace>,
    ) -> (Tensor, ForwardCache) {
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut encoders = Vec::with_capacity(self.config.depth);
        let mut x = input.clone();
        for enc in &self.encoders {
            let (y, c) = enc.forward(p, &x);
            let (pooled, argmax) = layers::max_pool2(&y);
            encoders.push((c, y.shape(), argmax));
            skips.push(y);
            x = pooled;
        }
        let (mut x, bottleneck) = self.bottleneck.forward(p, &x);
        let mut decoders = Vec::with_capacity(self.config.depth);
        for (k, (up, dec)) in self.ups.iter().zip(&self.decoders).enumerate() {
            let level = self.config.depth - 1 - k;
            let (u, up_input) = up.forward(p, &x);
            let skip = &skips[level];
            trace.push(SkipTrace {
                level,
                skip: skip.shape(),
                upsampled: u.shape(),
            });
            let cat = Tensor::concat(skip, &u);
            let (y, c) = dec.forward(p, &cat);
            decoders.push((up_input, skip.channels, c));
            x = y;
        }
        let (logits, head_cache) = self.head.forward(p, &x);
        (
            logits,
            ForwardCache {
                encoders,
                bottleneck,
                decoders,
                head_cache,
            },
        )
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Grads {
        let p = &self.params;
        let mut grads = p.zero_grads();
        let mut dx = self
            .head
            .backward(p, &cache.head_cache, dlogits, &mut grads);
        let mut dskips: Vec<Option<Tensor>> = vec![None; self.config.depth];
        for (k, (up, dec)) in self.ups.iter().zip(&self.decoders).enumerate().rev() {
            let level = self.config.depth - 1 - k;
            let (up_input, skip_channels, dc) = &cache.decoders[k];
            let dcat = dec.backward(p, dc, &dx, &mut grads);
            let (dskip, du) = dcat.split_channels(*skip_channels);
            dskips[level] = Some(dskip);
            dx = up.backward(p, up_input, &du, &mut grads);
        }
        dx = self
            .bottleneck
            .backward(p, &cache.bottleneck, &dx, &mut grads);
        for (level, enc) in self.encoders.iter().enumerate().rev() {
            let (c, shape, argmax) = &cache.encoders[level];
            let mut dy = layers::max_pool2_backward(*shape, argmax, &dx);
            dy.add_assign(dskips[level].as_ref().expect("decoder visited every level"));
            dx = enc.backward(p, c, &dy, &mut grads);
        }
        grads
    }

    /// BCE + Dice complement against a binary target of the logits' shape.
    pub fn loss_grad(&self, input: &Tensor, target: &[u8]) -> (f64, Grads) {
        let (logits, cache) = self.forward(input);
        let (loss, dl) = bce_dice(&logits.data, target);
        let dlogits = Tensor::from_vec(1, logits.height, logits.width, dl);
        (loss, self.backward(&cache, &dlogits))
    }

    /// Image → network input, plus the geometry needed to map back.
    pub fn prepare_image(&self, img: &RgbImage) -> Tensor {
        let side = self.config.input_size;
        if img.dimensions() == (side, side) {
            return crate::classifier::normalize_rgb(img);
        }
        crate::classifier::normalize_rgb(&imaging::pad_and_resize(img, side))
    }

    /// Ground-truth mask mapped with the same geometry as [`Self::prepare_image`].
    pub fn prepare_mask(&self, mask: &BinaryMask) -> Vec<u8> {
        let side = self.config.input_size;
        if mask.shape() == (side, side) {
            return mask.values().to_vec();
        }
        let (h, w) = (mask.height(), mask.width());
        let sq = h.max(w);
        let (top, left) = imaging::square_offsets(h, w);
        let mut plane = vec![0.0; (sq * sq) as usize];
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) {
                    plane[((r + top) * sq + c + left) as usize] = 1.0;
                }
            }
        }
        imaging::resize_plane(
            &plane,
            sq as usize,
            sq as usize,
            1,
            side as usize,
            side as usize,
        )
        .into_iter()
        .map(|v| u8::from(v > 0.5))
        .collect()
    }

    /// Probability map at the image's own resolution.
    pub fn predict_mask(&self, img: &RgbImage) -> ProbMask {
        let (w, h) = img.dimensions();
        let (logits, _) = self.forward(&self.prepare_image(img));
        let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
        let side = self.config.input_size;
        if (w, h) == (side, side) {
            return ProbMask {
                width: w,
                height: h,
                values: probs,
            };
        }
        let sq = w.max(h);
        let (top, left) = imaging::square_offsets(h, w);
        let full = imaging::resize_plane(
            &probs,
            side as usize,
            side as usize,
            1,
            sq as usize,
            sq as usize,
        );
        let mut values = Vec::with_capacity((w * h) as usize);
        for r in 0..h {
            let start = ((r + top) * sq + left) as usize;
            values.extend(
                full[start..start + w as usize]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0)),
            );
        }
        ProbMask {
            width: w,
            height: h,
            values,
        }
    }

    pub fn predict_binary(&self, img: &RgbImage) -> BinaryMask {
        binarize(&self.predict_mask(img), self.config.threshold)
    }
}

impl Trainable for Segmenter {
    type Input = (Tensor, Vec<u8>);

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, (input, target): &Self::Input, _trainable: &[bool]) -> (f64, Grads) {
        self.loss_grad(input, target)
    }
}

/// (mean loss, aggregate IoU) on prepared validation pairs.
fn evaluate(model: &Segmenter, val: &[(Tensor, Vec<u8>)]) -> (f64, f64) {
    let per: Vec<(f64, u64, u64)> = val
        .par_iter()
        .map(|(x, t)| {
            let (logits, _) = model.forward(x);
            let (loss, _) = bce_dice(&logits.data, t);
            let thr = model.config.threshold;
            let (mut inter, mut union) = (0, 0);
            for (&z, &tv) in logits.data.iter().zip(t) {
                let p = sigmoid(z) > thr;
                let tv = tv != 0;
                inter += u64::from(p && tv);
                union += u64::from(p || tv);
            }
            (loss, inter, union)
        })
        .collect();
    let n = per.len().max(1) as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let inter: u64 = per.iter().map(|p| p.1).sum();
    let union: u64 = per.iter().map(|p| p.2).sum();
    (loss, metrics::ratio_or_one(inter, union))
}

/// Trains on `train` pairs and keeps the epoch with the best aggregate IoU
/// on `validation` (or on `train` when no validation pairs are given).
pub fn train_segmenter(
    model: &mut Segmenter,
    train: &[BulkSample],
    validation: &[BulkSample],
    hyper: &Hyper,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::Empty("segmentation training pairs"));
    }
    let prepare_all = |set: &[BulkSample]| -> Vec<(Tensor, Vec<u8>)> {
        set.par_iter()
            .map(|s| (model.prepare_image(&s.pixels), model.prepare_mask(&s.mask)))
            .collect()
    };
    let train_inputs = prepare_all(train);
    let val_inputs = if validation.is_empty() {
        train_inputs.clone()
    } else {
        prepare_all(validation)
    };
    let all = vec![true; model.params().len()];
    fit(
        model,
        FitSpec {
            hyper,
            n_train: train.len(),
            score_name: "iou",
        },
        |i, _rng| train_inputs[i].clone(),
        |_| all.clone(),
        |m| evaluate(m, &val_inputs),
    )
}
