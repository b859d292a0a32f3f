//! Layers with explicit forward caches and backward passes.

use rand::Rng;

use super::gemm::gemm;
use super::params::{Grads, ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let weight = params.add_normal(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            std,
            rng,
        );
        let bias = params.add_zeros(format!("{name}.bias"), vec![out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        for ci in 0..self.in_channels {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < x.width {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        cols: &[f64],
        (c, h, w): (usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Tensor {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        let mut dx = Tensor::zeros(c, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx.data[base + ix as usize] += cols[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let bias = params.get(self.bias);
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            self.out_channels,
            kk,
            n,
            1.0,
            params.get(self.weight),
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        (
            out,
            ConvCache {
                cols,
                in_shape: x.shape(),
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ConvCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (oh, ow) = (dy.height, dy.width);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(
            self.out_channels,
            n,
            kk,
            1.0,
            &dy.data,
            false,
            &cache.cols,
            true,
            1.0,
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for (co, chunk) in dy.data.chunks(n).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_channels,
            n,
            1.0,
            params.get(self.weight),
            true,
            &dy.data,
            false,
            0.0,
            &mut dcols,
        );
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            let (c, h, w) = cache.in_shape;
            Tensor::from_vec(c, h, w, dcols)
        } else {
            self.col2im(&dcols, cache.in_shape, oh, ow)
        }
    }
}

/// 2×2 stride-2 transposed convolution (exact 2× upsampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2x2 {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel receives exactly one tap per input channel
        let std = (2.0 / in_channels as f64).sqrt();
        let weight = params.add_normal(
            format!("{name}.weight"),
            vec![in_channels, out_channels, 2, 2],
            std,
            rng,
        );
        let bias = params.add_zeros(format!("{name}.bias"), vec![out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> (Tensor, Tensor) {
        assert_eq!(
            x.channels, self.in_channels,
            "transposed conv input channels"
        );
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let taps = self.out_channels * 4;
        let mut y4 = vec![0.0; taps * n];
        gemm(
            taps,
            self.in_channels,
            n,
            1.0,
            params.get(self.weight),
            true,
            &x.data,
            false,
            0.0,
            &mut y4,
        );
        let bias = params.get(self.bias);
        let mut out = Tensor::zeros(self.out_channels, 2 * h, 2 * w);
        for co in 0..self.out_channels {
            for t in 0..4 {
                let (dy, dx) = (t / 2, t % 2);
                let src = &y4[(co * 4 + t) * n..(co * 4 + t + 1) * n];
                for i in 0..h {
                    for j in 0..w {
                        out[(co, 2 * i + dy, 2 * j + dx)] = src[i * w + j] + bias[co];
                    }
                }
            }
        }
        (out, x.clone())
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let taps = self.out_channels * 4;
        let mut dy4 = vec![0.0; taps * n];
        let db = grads.get_mut(self.bias);
        for co in 0..self.out_channels {
            db[co] += dy.channel(co).iter().sum::<f64>();
            for t in 0..4 {
                let (oy, ox) = (t / 2, t % 2);
                let dst = &mut dy4[(co * 4 + t) * n..(co * 4 + t + 1) * n];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = dy[(co, 2 * i + oy, 2 * j + ox)];
                    }
                }
            }
        }
        gemm(
            self.in_channels,
            n,
            taps,
            1.0,
            &input.data,
            false,
            &dy4,
            true,
            1.0,
            grads.get_mut(self.weight),
        );
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        gemm(
            self.in_channels,
            taps,
            n,
            1.0,
            params.get(self.weight),
            false,
            &dy4,
            false,
            0.0,
            &mut dx.data,
        );
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add_normal(
            format!("{name}.weight"),
            vec![out_features, in_features],
            std,
            rng,
        );
        let bias = params.add_zeros(format!("{name}.bias"), vec![out_features]);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_features);
        let mut y = params.get(self.bias).to_vec();
        gemm(
            self.out_features,
            self.in_features,
            1,
            1.0,
            params.get(self.weight),
            false,
            x,
            false,
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        dy: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        gemm(
            self.out_features,
            1,
            self.in_features,
            1.0,
            dy,
            false,
            x,
            false,
            1.0,
            grads.get_mut(self.weight),
        );
        for (b, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *b += d;
        }
        let mut dx = vec![0.0; self.in_features];
        gemm(
            self.in_features,
            self.out_features,
            1,
            1.0,
            params.get(self.weight),
            true,
            dy,
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    let mut argmax = Vec::with_capacity(out.data.len());
    for c in 0..x.channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (c * x.height + 2 * i + dy) * x.width + 2 * j + dx;
                    if x.data[idx] > best_v || best == usize::MAX {
                        best_v = x.data[idx];
                        best = idx;
                    }
                }
                out[(c, i, j)] = best_v;
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward(
    in_shape: (usize, usize, usize),
    argmax: &[usize],
    dy: &Tensor,
) -> Tensor {
    let (c, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (&idx, &g) in argmax.iter().zip(&dy.data) {
        dx.data[idx] += g;
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.plane() as f64;
    (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(in_shape: (usize, usize, usize), dy: &[f64]) -> Tensor {
    let (c, h, w) = in_shape;
    let n = (h * w) as f64;
    let mut dx = Tensor::zeros(c, h, w);
    for (ch, chunk) in dx.data.chunks_mut(h * w).enumerate() {
        chunk.fill(dy[ch] / n);
    }
    dx
}
