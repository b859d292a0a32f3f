use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable tensors of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter size"
        );
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    /// Normal(0, std²) initialization.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        )
    }

    /// Replaces all values from another set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if self.tensors.len() != other.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                ));
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= factor;
        }
    }

    /// Euclidean norm over every buffer.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
