//! Strided 3D convolution and its transpose, lowered to matrix products via
//! im2col.

use rand_chacha::ChaCha8Rng;

use super::layers::LEAKY_SLOPE;
use super::tensor::{Param, Tensor};
use super::NnetError;

/// "Same"-padded strided geometry between a large grid and a small one:
/// `small = ceil(large / stride)`, with the padding split low-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub large: [usize; 3],
    pub small: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: [usize; 3],
}

impl ConvGeom {
    pub fn same(large: [usize; 3], kernel: usize, stride: usize) -> Self {
        let small = large.map(|n| n.div_ceil(stride));
        let pad_lo = [0, 1, 2].map(|a| {
            let total = ((small[a] - 1) * stride + kernel).saturating_sub(large[a]);
            total / 2
        });
        Self {
            large,
            small,
            kernel,
            stride,
            pad_lo,
        }
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn large_len(&self) -> usize {
        self.large.iter().product()
    }

    fn k3(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Large-grid index touched by output `o` and kernel tap `t` on one axis.
    #[inline]
    fn tap(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad_lo[axis] as isize;
        (i >= 0 && (i as usize) < self.large[axis]).then_some(i as usize)
    }

    /// Columns `[c * k³ + tap, o]` gathered from a `(c, large)` field.
    fn im2col(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (k, n_out, n_in) = (self.kernel, self.small_len(), self.large_len());
        let [lx, ly, _] = self.large;
        let [sx, sy, sz] = self.small;
        let mut col = vec![0.0; channels * self.k3() * n_out];
        for c in 0..channels {
            let plane = &src[c * n_in..(c + 1) * n_in];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let row = ((c * k + tz) * k + ty) * k + tx;
                        let dst = &mut col[row * n_out..(row + 1) * n_out];
                        for oz in 0..sz {
                            let Some(iz) = self.tap(2, oz, tz) else { continue };
                            for oy in 0..sy {
                                let Some(iy) = self.tap(1, oy, ty) else { continue };
                                let base = lx * (iy + ly * iz);
                                let obase = sx * (oy + sy * oz);
                                for ox in 0..sx {
                                    if let Some(ix) = self.tap(0, ox, tx) {
                                        dst[obase + ox] = plane[base + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`im2col`]: scatter-adds columns back onto the large grid.
    fn col2im(&self, col: &[f64], channels: usize) -> Vec<f64> {
        let (k, n_out, n_in) = (self.kernel, self.small_len(), self.large_len());
        let [lx, ly, _] = self.large;
        let [sx, sy, sz] = self.small;
        let mut dst = vec![0.0; channels * n_in];
        for c in 0..channels {
            let plane = &mut dst[c * n_in..(c + 1) * n_in];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let row = ((c * k + tz) * k + ty) * k + tx;
                        let src = &col[row * n_out..(row + 1) * n_out];
                        for oz in 0..sz {
                            let Some(iz) = self.tap(2, oz, tz) else { continue };
                            for oy in 0..sy {
                                let Some(iy) = self.tap(1, oy, ty) else { continue };
                                let base = lx * (iy + ly * iz);
                                let obase = sx * (oy + sy * oz);
                                for ox in 0..sx {
                                    if let Some(ix) = self.tap(0, ox, tx) {
                                        plane[base + ix] += src[obase + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: index ranges implied by the strides lie within the slices
    // (checked by the callers' shape logic and the debug assertion above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation with weights `(c_out, c_in, k, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

/// What [`Conv3d::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    geom: ConvGeom,
    col: Vec<f64>,
}

impl Conv3d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * kernel.pow(3);
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            weight: Param::he_uniform(&[c_out, c_in, kernel, kernel, kernel], fan_in, LEAKY_SLOPE, rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    pub fn geom(&self, input: [usize; 3]) -> ConvGeom {
        ConvGeom::same(input, self.kernel, self.stride)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache), NnetError> {
        if x.channels() != self.c_in {
            return Err(NnetError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let geom = self.geom(x.spatial());
        let col = geom.im2col(x.data(), self.c_in);
        let n_out = geom.small_len();
        let kk = self.c_in * geom.k3();
        let mut y = vec![0.0; self.c_out * n_out];
        for (co, row) in y.chunks_mut(n_out).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.data[co]);
        }
        gemm(self.c_out, kk, n_out, &self.weight.data, kk, 1, &col, n_out, 1, 1.0, &mut y);
        let s = geom.small;
        Ok((Tensor::from_vec([self.c_out, s[0], s[1], s[2]], y)?, ConvCache { geom, col }))
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let geom = &cache.geom;
        let n_out = geom.small_len();
        let kk = self.c_in * geom.k3();
        let dyd = dy.data();
        // dW += dy · colᵀ
        gemm(self.c_out, n_out, kk, dyd, n_out, 1, &cache.col, 1, n_out, 1.0, &mut self.weight.grad);
        for (co, row) in dyd.chunks(n_out).enumerate() {
            self.bias.grad[co] += row.iter().sum::<f64>();
        }
        // dcol = Wᵀ · dy
        let mut dcol = vec![0.0; kk * n_out];
        gemm(kk, self.c_out, n_out, &self.weight.data, 1, kk, dyd, n_out, 1, 0.0, &mut dcol);
        let dx = geom.col2im(&dcol, self.c_in);
        let l = geom.large;
        Tensor::from_vec([self.c_in, l[0], l[1], l[2]], dx).expect("shape from geometry")
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Adjoint of a strided convolution (a learned upsampler) with weights
/// `(c_in, c_out, k, k, k)`. The output grid is given explicitly so it can
/// mirror an encoder level exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct ConvTransposeCache {
    geom: ConvGeom,
    input: Vec<f64>,
}

impl ConvTranspose3d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        // Each output voxel receives about c_in * (k / stride)³ contributions.
        let fan_in = (c_in * (kernel / stride).max(1).pow(3)).max(1);
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            weight: Param::he_uniform(&[c_in, c_out, kernel, kernel, kernel], fan_in, LEAKY_SLOPE, rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    pub fn forward(&self, x: &Tensor, out_spatial: [usize; 3]) -> Result<(Tensor, ConvTransposeCache), NnetError> {
        let geom = ConvGeom::same(out_spatial, self.kernel, self.stride);
        if x.channels() != self.c_in || x.spatial() != geom.small {
            return Err(NnetError::Shape(format!(
                "transposed conv expects ({}, {:?}), got ({}, {:?})",
                self.c_in,
                geom.small,
                x.channels(),
                x.spatial()
            )));
        }
        let n_small = geom.small_len();
        let kk = self.c_out * geom.k3();
        // col = Wᵀ · x, W viewed as (c_in x kk)
        let mut col = vec![0.0; kk * n_small];
        gemm(kk, self.c_in, n_small, &self.weight.data, 1, kk, x.data(), n_small, 1, 0.0, &mut col);
        let mut y = geom.col2im(&col, self.c_out);
        let n_large = geom.large_len();
        for (co, plane) in y.chunks_mut(n_large).enumerate() {
            plane.iter_mut().for_each(|v| *v += self.bias.data[co]);
        }
        let l = geom.large;
        Ok((
            Tensor::from_vec([self.c_out, l[0], l[1], l[2]], y)?,
            ConvTransposeCache {
                geom,
                input: x.data().to_vec(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache, dy: &Tensor) -> Tensor {
        let geom = &cache.geom;
        let n_small = geom.small_len();
        let n_large = geom.large_len();
        let kk = self.c_out * geom.k3();
        for (co, plane) in dy.data().chunks(n_large).enumerate() {
            self.bias.grad[co] += plane.iter().sum::<f64>();
        }
        let dcol = geom.im2col(dy.data(), self.c_out);
        // dW += x · dcolᵀ
        gemm(self.c_in, n_small, kk, &cache.input, n_small, 1, &dcol, 1, n_small, 1.0, &mut self.weight.grad);
        // dx = W · dcol
        let mut dx = vec![0.0; self.c_in * n_small];
        gemm(self.c_in, kk, n_small, &self.weight.data, kk, 1, &dcol, n_small, 1, 0.0, &mut dx);
        let s = geom.small;
        Tensor::from_vec([self.c_in, s[0], s[1], s[2]], dx).expect("shape from geometry")
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Direct-loop oracle for the forward pass.
    fn naive_conv(c: &Conv3d, x: &Tensor) -> Tensor {
        let g = c.geom(x.spatial());
        let [lx, ly, _] = g.large;
        let s = g.small;
        let k = c.kernel;
        let mut y = Tensor::zeros([c.c_out, s[0], s[1], s[2]]);
        let n_out = g.small_len();
        for co in 0..c.c_out {
            for oz in 0..s[2] {
                for oy in 0..s[1] {
                    for ox in 0..s[0] {
                        let mut acc = c.bias.data[co];
                        for ci in 0..c.c_in {
                            for tz in 0..k {
                                for ty in 0..k {
                                    for tx in 0..k {
                                        let (Some(iz), Some(iy), Some(ix)) = (g.tap(2, oz, tz), g.tap(1, oy, ty), g.tap(0, ox, tx)) else {
                                            continue;
                                        };
                                        let w = c.weight.data[(((co * c.c_in + ci) * k + tz) * k + ty) * k + tx];
                                        acc += w * x.channel(ci)[ix + lx * (iy + ly * iz)];
                                    }
                                }
                            }
                        }
                        y.data_mut()[co * n_out + ox + s[0] * (oy + s[1] * oz)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn same_padding_shapes() {
        assert_eq!(ConvGeom::same([32; 3], 4, 2).small, [16; 3]);
        assert_eq!(ConvGeom::same([16; 3], 4, 2).pad_lo, [1; 3]);
        assert_eq!(ConvGeom::same([1; 3], 4, 2).small, [1; 3]);
        assert_eq!(ConvGeom::same([5, 6, 7], 4, 2).small, [3, 3, 4]);
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([1, 5, 4, 3], &mut rng);
        let mut c = Conv3d::new(1, 1, 1, 1, &mut rng);
        c.weight.data = vec![1.0];
        c.bias.data = vec![0.0];
        assert_eq!(c.forward(&x).unwrap().0, x);
        c.weight.data = vec![0.0];
        assert!(c.forward(&x).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Conv3d::new(2, 3, 4, 2, &mut rng);
        let x = rand_tensor([2, 7, 6, 5], &mut rng);
        let y = c.forward(&x).unwrap().0;
        let z = naive_conv(&c, &x);
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Conv3d::new(2, 3, 4, 2, &mut rng);
        let x = rand_tensor([2, 6, 6, 6], &mut rng);
        let (y, cache) = c.forward(&x).unwrap();
        let up = rand_tensor(y.shape(), &mut rng);
        let loss = |c: &Conv3d, x: &Tensor| -> f64 {
            c.forward(x).unwrap().0.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let dx = c.backward(&cache, &up);
        let h = 1e-6;
        for idx in (0..x.data().len()).step_by(17) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * h);
            assert!(rel(fd, dx.data()[idx]) < 1e-6, "dx[{idx}]");
        }
        for idx in (0..c.weight.len()).step_by(13) {
            let mut cp = c.clone();
            cp.weight.data[idx] += h;
            let mut cm = c.clone();
            cm.weight.data[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!(rel(fd, c.weight.grad[idx]) < 1e-6, "dw[{idx}]");
        }
        for idx in 0..3 {
            let mut cp = c.clone();
            cp.bias.data[idx] += h;
            let mut cm = c.clone();
            cm.bias.data[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!(rel(fd, c.bias.grad[idx]) < 1e-6);
        }
    }

    #[test]
    fn transpose_is_the_adjoint_of_conv() {
        // <conv(x), y> = <x, convT(y)> with shared weights and zero biases.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = Conv3d::new(2, 3, 4, 2, &mut rng);
        c.bias.data.iter_mut().for_each(|b| *b = 0.0);
        let mut t = ConvTranspose3d::new(3, 2, 4, 2, &mut rng);
        t.weight.data = c.weight.data.clone();
        t.bias.data.iter_mut().for_each(|b| *b = 0.0);
        let x = rand_tensor([2, 7, 6, 5], &mut rng);
        let cx = c.forward(&x).unwrap().0;
        let y = rand_tensor(cx.shape(), &mut rng);
        let ty = t.forward(&y, [7, 6, 5]).unwrap().0;
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = ConvTranspose3d::new(3, 2, 4, 2, &mut rng);
        let x = rand_tensor([3, 3, 3, 3], &mut rng);
        let out = [6, 5, 6];
        let (y, cache) = t.forward(&x, out).unwrap();
        let up = rand_tensor(y.shape(), &mut rng);
        let loss = |t: &ConvTranspose3d, x: &Tensor| -> f64 {
            t.forward(x, out).unwrap().0.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let dx = t.backward(&cache, &up);
        let h = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&t, &xp) - loss(&t, &xm)) / (2.0 * h);
            assert!(rel(fd, dx.data()[idx]) < 1e-6);
        }
        for idx in (0..t.weight.len()).step_by(7) {
            let mut tp = t.clone();
            tp.weight.data[idx] += h;
            let mut tm = t.clone();
            tm.weight.data[idx] -= h;
            let fd = (loss(&tp, &x) - loss(&tm, &x)) / (2.0 * h);
            assert!(rel(fd, t.weight.grad[idx]) < 1e-6);
        }
        for idx in 0..2 {
            let mut tp = t.clone();
            tp.bias.data[idx] += h;
            let mut tm = t.clone();
            tm.bias.data[idx] -= h;
            let fd = (loss(&tp, &x) - loss(&tm, &x)) / (2.0 * h);
            assert!(rel(fd, t.bias.grad[idx]) < 1e-6);
        }
    }
}
