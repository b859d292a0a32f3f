/// Dense C×H×W activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
            ..*self
        }
    }

    /// Gradient through a ReLU whose *input* was `pre`.
    pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
        Tensor {
            data: pre
                .data
                .iter()
                .zip(&grad.data)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            ..*grad
        }
    }

    /// Channel concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(
            (a.height, a.width),
            (b.height, b.width),
            "concat spatial shape"
        );
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`Tensor::concat`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let cut = first * self.plane();
        (
            Tensor::from_vec(first, self.height, self.width, self.data[..cut].to_vec()),
            Tensor::from_vec(
                self.channels - first,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor {
    type Output = f64;

    fn index(&self, (c, y, x): (usize, usize, usize)) -> &f64 {
        &self.data[(c * self.height + y) * self.width + x]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor {
    fn index_mut(&mut self, (c, y, x): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}
