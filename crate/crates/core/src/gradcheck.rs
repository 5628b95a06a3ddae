//! Finite-difference gradient checks for the deformation layer, the losses
//! and every network layer.
//!
//! Each group compares analytic gradients against central differences on
//! seeded random inputs and keeps the worst relative error
//! `|fd - an| / max(|fd|, |an|, 1e-5)`. Network entries whose
//! difference quotients at steps `h` and `h/2` disagree straddle a leaky-ReLU
//! kink; they are counted as skipped rather than compared.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atlas::Atlas;
use crate::losses::{kink_free, l1_label, nmi, DEFAULT_BINS};
use crate::nnet::layers::leaky_relu_backward;
use crate::nnet::{
    leaky_relu, sigmoid, softmax, Conv3d, ConvTranspose3d, DecoderGenerator, Discriminator, Generator, Linear,
    Network, Param, Tensor,
};
use crate::transform::{warp, warp_vjp, ParamVector, AFFINE_LEN, DEFAULT_GRID};
use crate::volume::{Volume, VolumeKind};

pub const TRANSFORM_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const NNET_TOL: f64 = 1e-3;
/// Sampled control-point coordinates checked in the FFD group.
pub const FFD_SAMPLES: usize = 120;
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Transform,
    Losses,
    Nnet,
    All,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transform" => Ok(Scope::Transform),
            "losses" => Ok(Scope::Losses),
            "nnet" => Ok(Scope::Nnet),
            "all" => Ok(Scope::All),
            other => Err(format!("unknown scope {other:?} (transform, losses, nnet, all)")),
        }
    }
}

/// Deliberate corruption of an analytic gradient, for exercising the
/// failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the control-point gradient by 1.01, as a wrong FFD Jacobian would.
    FfdJacobian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: &'static str,
    pub checked: usize,
    /// Entries dropped because the finite difference straddles a kink.
    pub skipped: usize,
    pub worst_rel: f64,
    /// Finite-difference and analytic values at the worst entry.
    pub worst_pair: (f64, f64),
    pub tolerance: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_rel < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.name).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck seed={}", self.seed)?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<22} {} checked={:<4} skipped={:<2} worst_rel={:.3e} tol={:.0e} (fd {:.6e}, analytic {:.6e})",
                g.name,
                if g.passed() { "PASS" } else { "FAIL" },
                g.checked,
                g.skipped,
                g.worst_rel,
                g.tolerance,
                g.worst_pair.0,
                g.worst_pair.1
            )?;
        }
        write!(f, "overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR)
}

struct Acc {
    name: &'static str,
    tol: f64,
    checked: usize,
    skipped: usize,
    worst: f64,
    pair: (f64, f64),
}

impl Acc {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            checked: 0,
            skipped: 0,
            worst: 0.0,
            pair: (0.0, 0.0),
        }
    }

    fn push(&mut self, fd: f64, an: f64) {
        let r = rel_err(fd, an);
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r >= self.worst {
            self.worst = r;
            self.pair = (fd, an);
        }
        self.checked += 1;
    }

    /// Compares against a difference quotient that is stable under halving
    /// the step; unstable ones are skipped.
    fn push_stable(&mut self, an: f64, mut f: impl FnMut(f64) -> f64) {
        let a = central(H, &mut f);
        let b = central(H / 2.0, &mut f);
        if rel_err(a, b) > self.tol / 2.0 {
            self.skipped += 1;
        } else {
            self.push(b, an);
        }
    }

    fn done(self) -> GroupResult {
        GroupResult {
            name: self.name,
            checked: self.checked,
            skipped: self.skipped,
            worst_rel: self.worst,
            worst_pair: self.pair,
            tolerance: self.tol,
        }
    }
}

fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn run(scope: Scope, seed: u64) -> GradcheckReport {
    run_with_fault(scope, seed, None)
}

pub fn run_with_fault(scope: Scope, seed: u64, fault: Option<Fault>) -> GradcheckReport {
    let mut groups = Vec::new();
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    if matches!(scope, Scope::Transform | Scope::All) {
        groups.extend(check_transform(&mut stream(1), fault));
    }
    if matches!(scope, Scope::Losses | Scope::All) {
        groups.extend(check_losses(&mut stream(2)));
    }
    if matches!(scope, Scope::Nnet | Scope::All) {
        groups.extend(check_nnet(&mut stream(3)));
    }
    GradcheckReport { seed, groups }
}

/// Multilinear field: trilinear interpolation reproduces it exactly, so the
/// warp is smooth in the parameters.
fn multilinear(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = dims[0] as f64;
    Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |i, j, k| {
        let (x, y, z) = (i as f64 / s, j as f64 / s, k as f64 / s);
        c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z + c[6] * x * z + c[7] * x * y * z
    })
    .expect("finite field")
}

fn check_transform(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<GroupResult> {
    let n = 12;
    let dims = [n; 3];
    let atlas = multilinear(dims, rng);
    let mut params = ParamVector::identity(DEFAULT_GRID, dims).expect("valid grid");
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        *v += if i < 9 { rng.random_range(-0.02..0.02) } else { rng.random_range(-0.3..0.3) };
    }
    // Upstream weights only on voxels that stay clear of the border clamp.
    let up: Vec<f64> = (0..atlas.len())
        .map(|idx| {
            let c = atlas.coords(idx);
            if c.iter().all(|&x| (2..n - 2).contains(&x)) {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mut grad = warp_vjp(&params, &atlas, &atlas.with_data(up.clone()).expect("same length"));
    if fault == Some(Fault::FfdJacobian) {
        grad[AFFINE_LEN..].iter_mut().for_each(|g| *g *= 1.01);
    }
    let f = |pv: &ParamVector| -> f64 { warp(pv, &atlas, dims).data().iter().zip(&up).map(|(a, b)| a * b).sum() };
    let fd_at = |idx: usize| {
        central(1e-4, |h| {
            let mut p = params.clone();
            p.values_mut()[idx] += h;
            f(&p)
        })
    };
    let mut affine = Acc::new("transform/affine", TRANSFORM_TOL);
    for idx in 0..AFFINE_LEN {
        affine.push(fd_at(idx), grad[idx]);
    }
    let mut ffd = Acc::new("transform/ffd", TRANSFORM_TOL);
    for _ in 0..FFD_SAMPLES {
        let idx = rng.random_range(AFFINE_LEN..params.len());
        ffd.push(fd_at(idx), grad[idx]);
    }
    vec![affine.done(), ffd.done()]
}

fn random_volume(dims: [usize; 3], kind: VolumeKind, rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(0.0..1.0)).collect(), kind).expect("values in [0,1]")
}

fn check_losses(rng: &mut ChaCha8Rng) -> Vec<GroupResult> {
    let dims = [10; 3];
    let y = random_volume(dims, VolumeKind::Label, rng).threshold(0.5);
    let g = random_volume(dims, VolumeKind::Label, rng);
    let (_, grad) = l1_label(&y, &g).expect("same dims");
    let h = 1e-6;
    let mut l1 = Acc::new("losses/l1", LOSS_TOL);
    for _ in 0..50 {
        let p = rng.random_range(0..g.len());
        if (g.data()[p] - y.data()[p]).abs() <= 2.0 * h || g.data()[p] < h || g.data()[p] > 1.0 - h {
            continue;
        }
        let fd = central(h, |d| {
            let mut v = g.data().to_vec();
            v[p] += d;
            l1_label(&y, &g.with_data(v).expect("in range")).expect("same dims").0
        });
        l1.push(fd, grad[p]);
    }

    let x = random_volume(dims, VolumeKind::Intensity, rng);
    let gi = random_volume(dims, VolumeKind::Intensity, rng);
    let r = nmi(&x, &gi, DEFAULT_BINS).expect("non-degenerate");
    let mut acc = Acc::new("losses/nmi", LOSS_TOL);
    let h = 1e-6;
    let mut tried = 0;
    while acc.checked < 100 && tried < 2000 {
        tried += 1;
        let p = rng.random_range(0..gi.len());
        let (xv, gv) = (x.data()[p], gi.data()[p]);
        if gv < 2.0 * h || gv > 1.0 - 2.0 * h || !kink_free(xv, gv, h, DEFAULT_BINS) {
            continue;
        }
        let fd = central(h, |d| {
            let mut v = gi.data().to_vec();
            v[p] += d;
            nmi(&x, &gi.with_data(v).expect("finite"), DEFAULT_BINS).expect("non-degenerate").loss
        });
        acc.push(fd, r.grad[p]);
    }
    vec![l1.done(), acc.done()]
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const H: f64 = 1e-5;

/// Checks `samples` random entries of every parameter of `net` against the
/// gradients already accumulated in it.
fn check_params<N: Network + Clone>(acc: &mut Acc, net: &N, samples: usize, rng: &mut ChaCha8Rng, loss: impl Fn(&N) -> f64) {
    let count = net.params().len();
    for pi in 0..count {
        let len = net.params()[pi].1.len();
        for _ in 0..samples.min(len) {
            let idx = rng.random_range(0..len);
            let an = net.params()[pi].1.grad[idx];
            acc.push_stable(an, |d| {
                let mut m = net.clone();
                m.params_mut()[pi].data[idx] += d;
                loss(&m)
            });
        }
    }
}

/// Same as [`check_params`] for a single layer with a weight and a bias.
fn check_layer<L: Clone>(acc: &mut Acc, layer: &L, rng: &mut ChaCha8Rng, params: fn(&mut L) -> [&mut Param; 2], loss: impl Fn(&L) -> f64) {
    let mut probe = layer.clone();
    for pi in 0..2 {
        let len = params(&mut probe)[pi].len();
        for _ in 0..10 {
            let idx = rng.random_range(0..len);
            let an = params(&mut probe)[pi].grad[idx];
            acc.push_stable(an, |d| {
                let mut m = layer.clone();
                params(&mut m)[pi].data[idx] += d;
                loss(&m)
            });
        }
    }
}

fn check_nnet(rng: &mut ChaCha8Rng) -> Vec<GroupResult> {
    let mut out = Vec::new();

    // Conv3d: weights, bias and input.
    {
        let mut conv = Conv3d::new(2, 3, 4, 2, rng);
        let x = random_tensor([2, 8, 8, 8], rng);
        let (y, cache) = conv.forward(&x).expect("shape");
        let u = random_tensor(y.shape(), rng);
        let dx = conv.backward(&cache, &u);
        let loss = |c: &Conv3d, x: &Tensor| dot(c.forward(x).expect("shape").0.data(), u.data());
        let mut acc = Acc::new("nnet/conv3d", NNET_TOL);
        check_layer(&mut acc, &conv, rng, |c| c.params_mut(), |c| loss(c, &x));
        for _ in 0..10 {
            let idx = rng.random_range(0..x.data().len());
            acc.push_stable(dx.data()[idx], |d| {
                let mut xp = x.clone();
                xp.data_mut()[idx] += d;
                loss(&conv, &xp)
            });
        }
        out.push(acc.done());
    }

    // Transposed convolution.
    {
        let mut tc = ConvTranspose3d::new(3, 2, 4, 2, rng);
        let x = random_tensor([3, 4, 4, 4], rng);
        let (y, cache) = tc.forward(&x, [8, 8, 8]).expect("shape");
        let u = random_tensor(y.shape(), rng);
        let dx = tc.backward(&cache, &u);
        let loss = |c: &ConvTranspose3d, x: &Tensor| dot(c.forward(x, [8, 8, 8]).expect("shape").0.data(), u.data());
        let mut acc = Acc::new("nnet/conv_transpose3d", NNET_TOL);
        check_layer(&mut acc, &tc, rng, |c| c.params_mut(), |c| loss(c, &x));
        for _ in 0..10 {
            let idx = rng.random_range(0..x.data().len());
            acc.push_stable(dx.data()[idx], |d| {
                let mut xp = x.clone();
                xp.data_mut()[idx] += d;
                loss(&tc, &xp)
            });
        }
        out.push(acc.done());
    }

    // Linear.
    {
        let mut lin = Linear::new(20, 7, rng);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = lin.backward(&x, &u);
        let loss = |l: &Linear, x: &[f64]| dot(&l.forward(x).expect("sized"), &u);
        let mut acc = Acc::new("nnet/linear", NNET_TOL);
        check_layer(&mut acc, &lin, rng, |l| l.params_mut(), |l| loss(l, &x));
        for i in 0..x.len() {
            acc.push_stable(dx[i], |d| {
                let mut xp = x.clone();
                xp[i] += d;
                loss(&lin, &xp)
            });
        }
        out.push(acc.done());
    }

    // Activations.
    {
        let mut acc = Acc::new("nnet/activations", NNET_TOL);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).filter(|v: &f64| v.abs() > 1e-3).collect();
        let u: Vec<f64> = x.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let lrelu = |x: &[f64]| {
            let mut y = x.to_vec();
            leaky_relu(&mut y);
            dot(&y, &u)
        };
        let mut y = x.clone();
        leaky_relu(&mut y);
        let mut dy = u.clone();
        leaky_relu_backward(&y, &mut dy);
        for i in 0..x.len() {
            acc.push_stable(dy[i], |d| {
                let mut xp = x.clone();
                xp[i] += d;
                lrelu(&xp)
            });
            let s = sigmoid(x[i]);
            acc.push(central(H, |d| sigmoid(x[i] + d)), s * (1.0 - s));
        }
        let z = [x[0], x[1]];
        let p = softmax(&z);
        // d p0 / d z0 = p0 (1 - p0)
        acc.push(central(H, |d| softmax(&[z[0] + d, z[1]])[0]), p[0] * (1.0 - p[0]));
        acc.push(central(H, |d| softmax(&[z[0], z[1] + d])[0]), -p[0] * p[1]);
        out.push(acc.done());
    }

    // Whole networks on a 16³ input.
    let dims = [16; 3];
    let x = random_volume(dims, VolumeKind::Intensity, rng).gaussian_smooth(1.0).normalize();
    let atlas_img = random_volume(dims, VolumeKind::Intensity, rng).gaussian_smooth(1.5).normalize();
    let atlas_lbl = atlas_img.gaussian_smooth(1.0).normalize().as_kind(VolumeKind::Label).expect("in range");
    let atlas = Atlas::new(atlas_img, atlas_lbl, vec!["gradcheck".into()]).expect("consistent atlas");
    let u_lab: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u_int: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    {
        let mut g = Generator::new(dims, rng).expect("valid dims");
        let t = g.forward(&x, &atlas).expect("shape");
        g.zero_grad();
        g.backward(&t, &atlas, &u_lab, &u_int);
        let loss = |g: &Generator| {
            let t = g.forward(&x, &atlas).expect("shape");
            dot(t.g_label.data(), &u_lab) + dot(t.g_intensity.data(), &u_int)
        };
        let mut acc = Acc::new("nnet/generator", NNET_TOL);
        check_params(&mut acc, &g, 4, rng, loss);
        out.push(acc.done());
    }
    {
        let mut g = DecoderGenerator::new(dims, rng);
        let t = g.forward(&x).expect("shape");
        g.zero_grad();
        g.backward(&t, &u_lab);
        let loss = |g: &DecoderGenerator| dot(g.forward(&x).expect("shape").g_label.data(), &u_lab);
        let mut acc = Acc::new("nnet/decoder", NNET_TOL);
        check_params(&mut acc, &g, 4, rng, loss);
        out.push(acc.done());
    }
    {
        let mut d = Discriminator::new(dims, rng);
        let label = &atlas.label;
        let t = d.forward(&x, label).expect("shape");
        d.zero_grad();
        let dlab = d.backward(&t, [t.probs[0] - 1.0, t.probs[1]]);
        let loss = |d: &Discriminator, l: &Volume| -d.forward(&x, l).expect("shape").p_real().ln();
        let mut acc = Acc::new("nnet/discriminator", NNET_TOL);
        check_params(&mut acc, &d, 4, rng, |d| loss(d, label));
        for _ in 0..10 {
            let p = rng.random_range(0..label.len());
            let v = label.data()[p];
            if !(2.0 * H..1.0 - 2.0 * H).contains(&v) {
                continue;
            }
            acc.push_stable(dlab[p], |dd| {
                let mut lp = label.data().to_vec();
                lp[p] += dd;
                loss(&d, &label.with_data(lp).expect("in range"))
            });
        }
        out.push(acc.done());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_groups_pass() {
        let r = run(Scope::All, 7);
        println!("{r}");
        assert!(r.passed(), "{r}");
        assert!(r.groups.iter().find(|g| g.name == "transform/ffd").unwrap().checked >= 100);
        assert_eq!(r.groups.iter().find(|g| g.name == "transform/affine").unwrap().checked, 12);
        assert!(r.groups.iter().find(|g| g.name == "losses/nmi").unwrap().checked >= 100);
    }

    #[test]
    fn corrupted_ffd_jacobian_fails_that_group() {
        let r = run_with_fault(Scope::Transform, 7, Some(Fault::FfdJacobian));
        assert_eq!(r.failures(), vec!["transform/ffd"]);
    }

    #[test]
    fn report_is_reproducible() {
        assert_eq!(run(Scope::Losses, 3).to_string(), run(Scope::Losses, 3).to_string());
        assert!("bogus".parse::<Scope>().is_err());
        assert_eq!("nnet".parse::<Scope>(), Ok(Scope::Nnet));
    }
}
