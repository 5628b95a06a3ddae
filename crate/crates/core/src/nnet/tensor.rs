use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::NnetError;

/// Dense `(channels, x, y, z)` activation with x fastest inside each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, NnetError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(NnetError::Shape(format!(
                "tensor {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor, NnetError> {
        let sp = parts[0].spatial();
        if parts.iter().any(|t| t.spatial() != sp) {
            return Err(NnetError::Shape("concat: spatial sizes differ".into()));
        }
        let c = parts.iter().map(|t| t.channels()).sum();
        let mut data = Vec::with_capacity(c * parts[0].spatial_len());
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [c, sp[0], sp[1], sp[2]],
            data,
        })
    }

    /// Splits along channels at `c0` (inverse of a two-part concat).
    pub fn split_channels(&self, c0: usize) -> (Tensor, Tensor) {
        let n = self.spatial_len();
        let sp = self.spatial();
        (
            Tensor {
                shape: [c0, sp[0], sp[1], sp[2]],
                data: self.data[..c0 * n].to_vec(),
            },
            Tensor {
                shape: [self.shape[0] - c0, sp[0], sp[1], sp[2]],
                data: self.data[c0 * n..].to_vec(),
            },
        )
    }
}

/// Trainable array with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    /// He-uniform for layers followed by a leaky ReLU of slope `slope`:
    /// bound `sqrt(6 / ((1 + slope²) fan_in))`.
    pub fn he_uniform(shape: &[usize], fan_in: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        for v in &mut p.data {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Momentum SGD: `v <- momentum * v + grad`, `w <- w - lr * v`.
pub fn sgd_step(params: &mut [&mut Param], lr: f64, momentum: f64) {
    for p in params.iter_mut() {
        let Param {
            data,
            grad,
            velocity,
            ..
        } = &mut **p;
        for ((w, g), v) in data.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}
