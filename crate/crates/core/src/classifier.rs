//! Residual-network variety classifier.
//!
//! Layout: 3×3 stride-2 stem convolution, ReLU, 2×2 max pool, then stages of
//! pre-activation residual blocks (`y = shortcut(x) + conv2(relu(conv1(relu(x))))`,
//! with a 1×1 projection shortcut whenever stride or width changes), a final
//! ReLU, global average pooling and a linear head producing 7 logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{random_augment, AugmentConfig};
use crate::corpus::{DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::imaging::{pad_and_resize, RgbImage};
use crate::nn::layers::{self, ConvCache};
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::{Conv2d, Grads, Linear, ParamSet, Tensor};
use crate::train::{fit, FitSpec, Hyper, TrainHistory, Trainable};
use crate::variety::{RiceVariety, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub input_size: u32,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub head_only_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ClassifierConfig {
    /// CPU-sized default: 3 stages × 2 blocks, widths 16/32/64, 96×96 input.
    pub fn desk() -> Self {
        Self {
            input_size: 96,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            num_classes: NUM_CLASSES,
            head_only_epochs: 1,
        }
    }

    /// ResNet-50 stage layout (3, 4, 6, 3) at 224×224 with basic blocks.
    pub fn full_scale() -> Self {
        Self {
            input_size: 224,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            num_classes: NUM_CLASSES,
            head_only_epochs: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "stage_widths ({}) and blocks_per_stage ({}) must be non-empty and equally long",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}"));
        }
        // stem /2, pool /2, each later stage /2
        let min_input = 4u32 << (self.stage_widths.len() - 1);
        if self.input_size < min_input {
            return bad(format!("input_size {} below {min_input}", self.input_size));
        }
        Ok(())
    }
}

/// Pre-activation residual block.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
}

pub struct BlockCache {
    input: Tensor,
    conv1: ConvCache,
    hidden: Tensor,
    conv2: ConvCache,
    projection: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        branch_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new(
            params,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            1.0,
            rng,
        );
        let conv2 = Conv2d::new(
            params,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            1,
            1,
            branch_gain,
            rng,
        );
        let projection = (stride != 1 || cin != cout).then(|| {
            Conv2d::new(
                params,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                stride,
                0,
                1.0,
                rng,
            )
        });
        Self {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, BlockCache) {
        let (hidden, c1) = self.conv1.forward(params, &x.relu());
        let (residual, c2) = self.conv2.forward(params, &hidden.relu());
        let (mut y, cp) = match &self.projection {
            Some(p) => {
                let (s, cp) = p.forward(params, x);
                (s, Some(cp))
            }
            None => (x.clone(), None),
        };
        y.add_assign(&residual);
        (
            y,
            BlockCache {
                input: x.clone(),
                conv1: c1,
                hidden,
                conv2: c2,
                projection: cp,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &BlockCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let dh = self.conv2.backward(params, &cache.conv2, dy, grads);
        let dh = Tensor::relu_backward(&cache.hidden, &dh);
        let da = self.conv1.backward(params, &cache.conv1, &dh, grads);
        let mut dx = Tensor::relu_backward(&cache.input, &da);
        match (&self.projection, &cache.projection) {
            (Some(p), Some(cp)) => dx.add_assign(&p.backward(params, cp, dy, grads)),
            _ => dx.add_assign(dy),
        }
        dx
    }
}

/// Softmax output in canonical variety order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub [f64; NUM_CLASSES]);

impl ClassProbabilities {
    pub fn from_logits(logits: &[f64]) -> Self {
        let p = softmax(logits);
        Self(p.try_into().expect("7 logits"))
    }

    /// Arg-max; ties resolve to the lowest canonical index.
    pub fn label(&self) -> RiceVariety {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        RiceVariety::ALL[best]
    }

    pub fn max(&self) -> f64 {
        self.0[self.label().index()]
    }
}

/// Maps 8-bit RGB to the network's input scale, `(v/255 − 0.5)/0.25`.
pub fn normalize_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data[c * h * w + i] = (px.0[c] as f64 / 255.0 - 0.5) / 0.25;
        }
    }
    t
}

pub struct ForwardCache {
    stem: ConvCache,
    stem_out: Tensor,
    pool_argmax: Vec<usize>,
    blocks: Vec<BlockCache>,
    features: Tensor,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub seed: u64,
    params: ParamSet,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
    head_params: usize,
}

impl Classifier {
    /// Deterministic He initialization; the second convolution of every
    /// residual branch is scaled by 1/√(block count).
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w0 = config.stage_widths[0];
        let stem = Conv2d::new(&mut params, "stem", 3, w0, 3, 2, 1, 1.0, &mut rng);
        let total_blocks: usize = config.blocks_per_stage.iter().sum();
        let branch_gain = 1.0 / (total_blocks as f64).sqrt();
        let mut blocks = Vec::with_capacity(total_blocks);
        let mut cin = w0;
        for (s, (&width, &count)) in config
            .stage_widths
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut params,
                    &format!("stage{s}.block{b}"),
                    cin,
                    width,
                    stride,
                    branch_gain,
                    &mut rng,
                ));
                cin = width;
            }
        }
        let head_params = params.len();
        let head = Linear::new(&mut params, "head", cin, config.num_classes, 0.01, &mut rng);
        Ok(Self {
            config,
            seed,
            params,
            stem,
            blocks,
            head,
            head_params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[ResBlock] {
        &self.blocks
    }

    /// Replaces weights after checking names and shapes.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.copy_from(params).map_err(Error::Checkpoint)
    }

    /// Trainable-tensor mask: head only, or everything.
    pub fn trainable_mask(&self, head_only: bool) -> Vec<bool> {
        (0..self.params.len())
            .map(|i| !head_only || i >= self.head_params)
            .collect()
    }

    pub fn preprocess(&self, img: &RgbImage) -> Tensor {
        normalize_rgb(&pad_and_resize(img, self.config.input_size))
    }

    pub fn forward(&self, input: &Tensor) -> (Vec<f64>, ForwardCache) {
        let (stem_out, stem) = self.stem.forward(&self.params, input);
        let (mut x, pool_argmax) = layers::max_pool2(&stem_out.relu());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&self.params, &x);
            blocks.push(c);
            x = y;
        }
        let pooled = layers::global_avg_pool(&x.relu());
        let logits = self.head.forward(&self.params, &pooled);
        (
            logits,
            ForwardCache {
                stem,
                stem_out,
                pool_argmax,
                blocks,
                features: x,
                pooled,
            },
        )
    }

    pub fn logits(&self, input: &Tensor) -> Vec<f64> {
        self.forward(input).0
    }

    /// Backpropagates `dlogits`; with `head_only` the backbone is skipped.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], head_only: bool) -> Grads {
        let mut grads = self.params.zero_grads();
        let dpooled = self
            .head
            .backward(&self.params, &cache.pooled, dlogits, &mut grads);
        if head_only {
            return grads;
        }
        let dfeat = layers::global_avg_pool_backward(cache.features.shape(), &dpooled);
        let mut dx = Tensor::relu_backward(&cache.features, &dfeat);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(&self.params, c, &dx, &mut grads);
        }
        let dstem = layers::max_pool2_backward(cache.stem_out.shape(), &cache.pool_argmax, &dx);
        let dstem = Tensor::relu_backward(&cache.stem_out, &dstem);
        self.stem
            .backward(&self.params, &cache.stem, &dstem, &mut grads);
        grads
    }

    /// Cross-entropy of one sample and its gradient.
    pub fn loss_grad(&self, input: &Tensor, label: RiceVariety, head_only: bool) -> (f64, Grads) {
        let (logits, cache) = self.forward(input);
        let (loss, dlogits) = softmax_cross_entropy(&logits, label.index());
        (loss, self.backward(&cache, &dlogits, head_only))
    }

    pub fn predict(&self, img: &RgbImage) -> ClassProbabilities {
        ClassProbabilities::from_logits(&self.logits(&self.preprocess(img)))
    }

    pub fn predict_label(&self, img: &RgbImage) -> RiceVariety {
        self.predict(img).label()
    }
}

impl Trainable for Classifier {
    type Input = (Tensor, RiceVariety);

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, (input, label): &Self::Input, trainable: &[bool]) -> (f64, Grads) {
        let head_only = !trainable[0];
        self.loss_grad(input, *label, head_only)
    }
}

/// (mean cross-entropy, accuracy) over prepared inputs.
pub fn evaluate(model: &Classifier, inputs: &[(Tensor, RiceVariety)]) -> (f64, f64) {
    use rayon::prelude::*;
    let per: Vec<(f64, bool)> = inputs
        .par_iter()
        .map(|(x, label)| {
            let logits = model.logits(x);
            let (loss, _) = softmax_cross_entropy(&logits, label.index());
            (
                loss,
                ClassProbabilities::from_logits(&logits).label() == *label,
            )
        })
        .collect();
    let n = per.len().max(1) as f64;
    (
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().filter(|p| p.1).count() as f64 / n,
    )
}

/// Trains on `split.train` (augmented) and selects the epoch with the best
/// `split.validation` accuracy. The first `head_only_epochs` epochs update
/// only the linear head.
pub fn train_classifier(
    model: &mut Classifier,
    samples: &[LabeledImage],
    split: &DatasetSplit,
    hyper: &Hyper,
    augment: &AugmentConfig,
) -> Result<TrainHistory> {
    if split.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if split.validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    augment.validate()?;
    let val: Vec<(Tensor, RiceVariety)> = {
        use rayon::prelude::*;
        split
            .validation
            .par_iter()
            .map(|&i| (model.preprocess(&samples[i].pixels), samples[i].label))
            .collect()
    };
    let head_only_epochs = model.config.head_only_epochs;
    let masks = [model.trainable_mask(true), model.trainable_mask(false)];
    let input_size = model.config.input_size;
    let prepare = |i: usize, rng: &mut ChaCha8Rng| {
        let sample = &samples[split.train[i]];
        let augmented = random_augment(sample, augment, rng);
        (
            normalize_rgb(&pad_and_resize(&augmented.pixels, input_size)),
            augmented.label,
        )
    };
    fit(
        model,
        FitSpec {
            hyper,
            n_train: split.train.len(),
            score_name: "accuracy",
        },
        prepare,
        |epoch| masks[usize::from(epoch >= head_only_epochs)].clone(),
        |m| evaluate(m, &val),
    )
}
