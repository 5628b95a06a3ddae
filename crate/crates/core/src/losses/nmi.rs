//! Normalized mutual information with Parzen-smoothed histograms.
//!
//! Each voxel spreads unit mass over the bins with a cubic B-spline kernel
//! (mass that would fall outside the bin range is folded onto the edge bins).
//! The joint histogram pairs the two per-voxel kernels with their comonotone
//! coupling: the `a`-th quantile interval of the first kernel overlaps the
//! `b`-th interval of the second by
//!
//! ```text
//! C(a, b) = max(0, min(F(a), G(b)) - max(F(a-1), G(b-1)))
//! ```
//!
//! where `F`, `G` are the kernels' cumulative sums. Marginals of `C` are the
//! kernels themselves, identical inputs produce a diagonal joint histogram so
//! `H(x, x) = H(x)` holds exactly, and `C` is symmetric under swapping inputs.
//! The coupling is piecewise linear in the kernel weights; its kinks sit where
//! an `F(a)` equals a `G(b)`.

use rayon::prelude::*;

use super::LossError;
use crate::transform::{cubic_bspline_basis, cubic_bspline_basis_deriv};
use crate::volume::Volume;

pub const DEFAULT_BINS: usize = 32;
/// Joint entropies below this are treated as degenerate.
pub const MIN_JOINT_ENTROPY: f64 = 1e-12;

/// Folded kernel of one intensity: weights on bins `lo..lo + len`.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    lo: usize,
    len: usize,
    w: [f64; 4],
    dw: [f64; 4],
}

impl Kernel {
    fn new(v: f64, bins: usize) -> Self {
        let scale = (bins - 1) as f64;
        let (v, inside) = if v.is_nan() {
            (0.0, false)
        } else {
            (v.clamp(0.0, 1.0), (0.0..=1.0).contains(&v))
        };
        let s = v * scale;
        let f = s.floor();
        let u = s - f;
        let base = f as isize - 1;
        let b = cubic_bspline_basis(u);
        let db = cubic_bspline_basis_deriv(u);
        let last = bins as isize - 1;
        let lo = base.clamp(0, last) as usize;
        let hi = (base + 3).clamp(0, last) as usize;
        let mut w = [0.0; 4];
        let mut dw = [0.0; 4];
        for t in 0..4 {
            let bin = (base + t as isize).clamp(0, last) as usize - lo;
            w[bin] += b[t];
            if inside {
                dw[bin] += db[t] * scale;
            }
        }
        Self {
            lo,
            len: hi - lo + 1,
            w,
            dw,
        }
    }

    /// Cumulative sums `F(lo - 1) = 0, F(lo), ..., F(hi) = 1` and their
    /// derivatives.
    fn cdf(&self) -> ([f64; 5], [f64; 5]) {
        let mut c = [0.0; 5];
        let mut dc = [0.0; 5];
        for t in 0..self.len {
            c[t + 1] = c[t] + self.w[t];
            dc[t + 1] = dc[t] + self.dw[t];
        }
        c[self.len] = 1.0;
        dc[self.len] = 0.0;
        (c, dc)
    }
}

/// Per-voxel coupling cells `(a, b, mass)`; at most 7 are nonzero.
fn coupling(kx: &Kernel, kg: &Kernel, mut emit: impl FnMut(usize, usize, usize, usize, f64)) {
    let (fx, _) = kx.cdf();
    let (fg, _) = kg.cdf();
    for ta in 0..kx.len {
        for tb in 0..kg.len {
            let c = fx[ta + 1].min(fg[tb + 1]) - fx[ta].max(fg[tb]);
            if c > 0.0 {
                emit(ta, tb, kx.lo + ta, kg.lo + tb, c);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmiResult {
    pub loss: f64,
    pub h_x: f64,
    pub h_g: f64,
    pub h_joint: f64,
    /// d loss / d g, one entry per voxel.
    pub grad: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

fn joint_histogram(x: &[f64], g: &[f64], bins: usize) -> Vec<f64> {
    const CHUNK: usize = 4096;
    let partials: Vec<Vec<f64>> = x
        .par_chunks(CHUNK)
        .zip(g.par_chunks(CHUNK))
        .map(|(xc, gc)| {
            let mut h = vec![0.0; bins * bins];
            for (&xv, &gv) in xc.iter().zip(gc) {
                let kx = Kernel::new(xv, bins);
                let kg = Kernel::new(gv, bins);
                coupling(&kx, &kg, |_, _, a, b, c| h[a * bins + b] += c);
            }
            h
        })
        .collect();
    let n = x.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    for part in &partials {
        for (acc, v) in joint.iter_mut().zip(part) {
            *acc += v;
        }
    }
    joint.iter_mut().for_each(|v| *v /= n);
    joint
}

fn marginals(joint: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut px = vec![0.0; bins];
    let mut pg = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            let v = joint[a * bins + b];
            px[a] += v;
            pg[b] += v;
        }
    }
    (px, pg)
}

/// `-(H(x) + H(g)) / H(x, g)` and its gradient with respect to `g`.
pub fn nmi(x: &Volume, g: &Volume, bins: usize) -> Result<NmiResult, LossError> {
    x.same_dims(g)?;
    if bins < 2 {
        return Err(LossError::TooFewBins(bins));
    }
    if is_constant(x.data()) || is_constant(g.data()) {
        return Err(LossError::DegenerateEntropy { h_joint: 0.0 });
    }
    let xs = x.data();
    let gs = g.data();
    let joint = joint_histogram(xs, gs, bins);
    let (px, pg) = marginals(&joint, bins);
    let h_x = entropy(&px);
    let h_g = entropy(&pg);
    let h_joint = entropy(&joint);
    if !(h_joint >= MIN_JOINT_ENTROPY) {
        return Err(LossError::DegenerateEntropy { h_joint });
    }
    let loss = -(h_x + h_g) / h_joint;

    // d loss / d P(a, b) for every occupied cell.
    let sum_m = h_x + h_g;
    let hj2 = h_joint * h_joint;
    let dlog = |p: f64| if p > 0.0 { -(p.ln() + 1.0) } else { 0.0 };
    let dx: Vec<f64> = px.iter().map(|&p| dlog(p)).collect();
    let dg: Vec<f64> = pg.iter().map(|&p| dlog(p)).collect();
    let mut dcell = vec![0.0; bins * bins];
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b];
            if p > 0.0 {
                let dm = dx[a] + dg[b];
                let dj = dlog(p);
                dcell[a * bins + b] = -(dm * h_joint - sum_m * dj) / hj2;
            }
        }
    }

    let inv_n = 1.0 / xs.len() as f64;
    let mut grad = vec![0.0; gs.len()];
    grad.par_iter_mut().enumerate().for_each(|(p, out)| {
        let kx = Kernel::new(xs[p], bins);
        let kg = Kernel::new(gs[p], bins);
        let (fx, _) = kx.cdf();
        let (fg, dfg) = kg.cdf();
        let mut acc = 0.0;
        coupling(&kx, &kg, |ta, tb, a, b, _| {
            let mut dc = 0.0;
            if fg[tb + 1] < fx[ta + 1] {
                dc += dfg[tb + 1];
            }
            if fg[tb] > fx[ta] {
                dc -= dfg[tb];
            }
            acc += dcell[a * bins + b] * dc;
        });
        *out = acc * inv_n;
    });

    Ok(NmiResult {
        loss,
        h_x,
        h_g,
        h_joint,
        grad,
    })
}

/// True when every order relation between the two kernels' cumulative sums
/// is the same at `g - h`, `g` and `g + h`, i.e. the loss is smooth in this
/// voxel over the whole finite-difference stencil.
pub fn kink_free(x: f64, g: f64, h: f64, bins: usize) -> bool {
    // Entries pinned at 0 or 1 on both sides tie structurally and are harmless.
    let sig = |gv: f64| -> Vec<(usize, usize, std::cmp::Ordering)> {
        let kx = Kernel::new(x, bins);
        let kg = Kernel::new(gv, bins);
        let (fx, _) = kx.cdf();
        let (fg, _) = kg.cdf();
        let mut out = Vec::with_capacity(25);
        for ta in 0..=kx.len {
            for tb in 0..=kg.len {
                let pinned = (ta == 0 && tb == 0) || (fx[ta] == 1.0 && fg[tb] == 1.0);
                if pinned {
                    continue;
                }
                out.push((
                    kx.lo + ta,
                    kg.lo + tb,
                    fx[ta].partial_cmp(&fg[tb]).unwrap_or(std::cmp::Ordering::Equal),
                ));
            }
        }
        out
    };
    let mid = sig(g);
    let no_ties = mid
        .iter()
        .all(|&(_, _, o)| o != std::cmp::Ordering::Equal);
    no_ties && sig(g - h) == mid && sig(g + h) == mid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |_, _, _| rng.random::<f64>()).unwrap()
    }

    // Hard-binned NMI; an oracle that shares no code with the Parzen path.
    fn hard_nmi(x: &[f64], g: &[f64], bins: usize) -> f64 {
        let bin = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
        let mut j = vec![0.0; bins * bins];
        let mut px = vec![0.0; bins];
        let mut pg = vec![0.0; bins];
        let n = x.len() as f64;
        for (&a, &b) in x.iter().zip(g) {
            j[bin(a) * bins + bin(b)] += 1.0 / n;
            px[bin(a)] += 1.0 / n;
            pg[bin(b)] += 1.0 / n;
        }
        -(entropy(&px) + entropy(&pg)) / entropy(&j)
    }

    #[test]
    fn kernel_is_a_partition_of_unity() {
        for bins in [2, 3, 5, 32] {
            for i in 0..=200 {
                let v = i as f64 / 200.0;
                let k = Kernel::new(v, bins);
                let s: f64 = k.w[..k.len].iter().sum();
                let ds: f64 = k.dw[..k.len].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(ds.abs() < 1e-9);
                assert!(k.lo + k.len <= bins);
            }
        }
    }

    #[test]
    fn self_nmi_is_minus_two() {
        let x = noise([8, 8, 8], 1);
        for bins in [2, 3, 8, 32, 64] {
            let r = nmi(&x, &x, bins).unwrap();
            assert!((r.loss + 2.0).abs() < 1e-6, "bins {bins}: {}", r.loss);
        }
    }

    #[test]
    fn independent_noise_is_near_minus_one() {
        let x = noise([32, 32, 32], 2);
        let g = noise([32, 32, 32], 3);
        let oracle = hard_nmi(x.data(), g.data(), 32);
        assert!((oracle + 1.0).abs() < 0.05, "oracle {oracle}");
        let r = nmi(&x, &g, 32).unwrap();
        assert!((r.loss + 1.0).abs() < 0.05, "parzen {}", r.loss);
    }

    #[test]
    fn constant_inputs_are_degenerate() {
        let c = Volume::zeros([4, 4, 4], [1.0; 3], VolumeKind::Intensity);
        assert!(matches!(nmi(&c, &c, 32), Err(LossError::DegenerateEntropy { .. })));
        let x = noise([4, 4, 4], 4);
        assert!(matches!(nmi(&c, &x, 32), Err(LossError::DegenerateEntropy { .. })));
        assert!(matches!(nmi(&x, &x, 1), Err(LossError::TooFewBins(1))));
    }

    #[test]
    fn symmetric_in_arguments() {
        let x = noise([8, 8, 8], 5);
        let g = noise([8, 8, 8], 6);
        let a = nmi(&x, &g, 32).unwrap().loss;
        let b = nmi(&g, &x, 32).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences_away_from_kinks() {
        let x = noise([8, 8, 8], 7).gaussian_smooth(0.8).normalize();
        let g = noise([8, 8, 8], 8).gaussian_smooth(0.8).normalize();
        let r = nmi(&x, &g, 32).unwrap();
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        for _ in 0..200 {
            let p = rng.random_range(0..x.len());
            let gv = g.data()[p];
            if !(h..=1.0 - h).contains(&gv) || !kink_free(x.data()[p], gv, h, 32) {
                continue;
            }
            let mut plus = g.data().to_vec();
            plus[p] += h;
            let mut minus = g.data().to_vec();
            minus[p] -= h;
            let lp = nmi(&x, &g.with_data(plus).unwrap(), 32).unwrap().loss;
            let lm = nmi(&x, &g.with_data(minus).unwrap(), 32).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = r.grad[p];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(rel < 1e-3, "voxel {p}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert!(checked > 100, "only {checked} kink-free voxels");
    }
}
