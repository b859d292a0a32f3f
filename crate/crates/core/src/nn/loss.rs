//! Classification and segmentation objectives with their gradients.

/// Additive smoothing in the soft Dice ratio; keeps empty-vs-empty at 1.
pub const DICE_SMOOTH: f64 = 1.0;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against class `target` and d(loss)/d(logits).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Soft Dice complement `1 − (2Σpt + s)/(Σp + Σt + s)`. Zero exactly when
/// `p` equals the binary target, and never above 1.
pub fn dice_complement(probs: &[f64], target: &[u8]) -> f64 {
    let (inter, sp, st) = dice_sums(probs, target);
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH)
}

fn dice_sums(probs: &[f64], target: &[u8]) -> (f64, f64, f64) {
    probs
        .iter()
        .zip(target)
        .fold((0.0, 0.0, 0.0), |(i, p, t), (&pv, &tv)| {
            let tv = tv as f64;
            (i + pv * tv, p + pv, t + tv)
        })
}

/// Mean binary cross-entropy plus Dice complement, equally weighted, over
/// per-pixel logits. Returns the loss and d(loss)/d(logits).
pub fn bce_dice(logits: &[f64], target: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len());
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let bce = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| softplus(z) - t as f64 * z)
        .sum::<f64>()
        / n;
    let (inter, sp, st) = dice_sums(&probs, target);
    let denom = sp + st + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let loss = bce + 1.0 - numer / denom;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let t = t as f64;
            let d_dice_dp = (2.0 * t * denom - numer) / (denom * denom);
            (p - t) / n - d_dice_dp * p * (1.0 - p)
        })
        .collect();
    (loss, grad)
}
