use rand_chacha::ChaCha8Rng;

use super::tensor::Param;
use super::NnetError;

pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = W x + b` with `W` stored `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            n_in,
            n_out,
            weight: Param::uniform(&[n_out, n_in], n_in, rng),
            bias: Param::uniform(&[n_out], n_in, rng),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnetError> {
        if x.len() != self.n_in {
            return Err(NnetError::Shape(format!(
                "linear expects {} inputs, got {}",
                self.n_in,
                x.len()
            )));
        }
        Ok(self
            .weight
            .data
            .chunks(self.n_in)
            .zip(&self.bias.data)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let row = o * self.n_in;
            for i in 0..self.n_in {
                self.weight.grad[row + i] += g * x[i];
                dx[i] += g * self.weight.data[row + i];
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward of [`leaky_relu`] given its output (the sign is preserved).
pub fn leaky_relu_backward(y: &[f64], dy: &mut [f64]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::new(5, 4, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |l: &Linear, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        let dx = l.backward(&x, &up);
        let h = 1e-6;
        for i in 0..5 {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (loss(&l, &p) - loss(&l, &m)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        for i in 0..20 {
            let mut p = l.clone();
            p.weight.data[i] += h;
            let mut m = l.clone();
            m.weight.data[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - l.weight.grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn activations() {
        let mut v = vec![-1.0, 0.0, 2.0];
        leaky_relu(&mut v);
        assert_eq!(v, vec![-0.2, 0.0, 2.0]);
        let mut g = vec![1.0; 3];
        leaky_relu_backward(&v, &mut g);
        assert_eq!(g, vec![0.2, 1.0, 1.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).is_finite());
        let p = softmax(&[1000.0, -3.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
    }
}
