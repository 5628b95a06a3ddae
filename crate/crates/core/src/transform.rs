//! The atlas deformation layer.
//!
//! A [`ParamVector`] holds 12 affine parameters followed by three displacement
//! components for every control point of a cubic B-spline lattice. A target
//! voxel `p` is mapped into atlas space by
//!
//! ```text
//! q = M p + t
//! r = q + sum_c B_c(q) phi_c
//! ```
//!
//! and the atlas is sampled at `r` (backward warping). Everything is in voxel
//! units; physical spacing only enters the metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{Volume, VolumeKind};

pub const AFFINE_LEN: usize = 12;
pub const DEFAULT_GRID: [usize; 3] = [10, 10, 10];
/// `12 + 3 * 10^3` for the default lattice.
pub const DEFAULT_PARAM_LEN: usize = AFFINE_LEN + 3 * 1000;

pub const VPAR_MAGIC: &[u8; 4] = b"VPAR";
pub const VPAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("bad magic: expected \"VPAR\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("control grid {0:?} needs at least 4 points per axis")]
    GridTooSmall([usize; 3]),
    #[error("truncated {field}: expected {expected} bytes, found {found}")]
    Truncated {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("parameter length {found} does not match grid (expected {expected})")]
    LengthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `theta[0..9]` is the row-major 3x3 matrix, `theta[9..12]` the translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams(pub [f64; AFFINE_LEN]);

impl AffineParams {
    pub fn identity() -> Self {
        let mut t = [0.0; AFFINE_LEN];
        t[0] = 1.0;
        t[4] = 1.0;
        t[8] = 1.0;
        Self(t)
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut t = [0.0; AFFINE_LEN];
        t.copy_from_slice(&s[..AFFINE_LEN]);
        Self(t)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        a.0[9..12].copy_from_slice(&t);
        a
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        affine_apply(&self.0, p)
    }
}

#[inline]
pub fn affine_apply(theta: &[f64], p: [f64; 3]) -> [f64; 3] {
    [
        theta[0] * p[0] + theta[1] * p[1] + theta[2] * p[2] + theta[9],
        theta[3] * p[0] + theta[4] * p[1] + theta[5] * p[2] + theta[10],
        theta[6] * p[0] + theta[7] * p[1] + theta[8] * p[2] + theta[11],
    ]
}

/// Uniform cubic B-spline blending weights `B0..B3` at `u`.
#[inline]
pub fn cubic_bspline_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Derivatives of [`cubic_bspline_basis`] with respect to `u`.
#[inline]
pub fn cubic_bspline_basis_deriv(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let v = 1.0 - u;
    [
        -0.5 * v * v,
        1.5 * u2 - 2.0 * u,
        -1.5 * u2 + u + 0.5,
        0.5 * u2,
    ]
}

/// Lattice geometry: control point `c` along an axis sits at voxel
/// coordinate `(c - 1) * spacing`, so the first and last interior points land
/// on the volume borders and every in-volume voxel has full 4x4x4 support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub grid_dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridGeometry {
    pub fn new(grid_dims: [usize; 3], target_dims: [usize; 3]) -> Result<Self, TransformError> {
        if grid_dims.iter().any(|&g| g < 4) {
            return Err(TransformError::GridTooSmall(grid_dims));
        }
        let mut spacing = [1.0; 3];
        for a in 0..3 {
            if target_dims[a] > 1 {
                spacing[a] = (target_dims[a] - 1) as f64 / (grid_dims[a] - 3) as f64;
            }
        }
        Ok(Self { grid_dims, spacing })
    }

    pub fn num_points(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn param_len(&self) -> usize {
        AFFINE_LEN + 3 * self.num_points()
    }

    /// Control point index of lattice coordinate `(ci, cj, ck)`.
    #[inline]
    pub fn point_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.grid_dims[0] * (c[1] + self.grid_dims[1] * c[2])
    }

    /// Voxel-space position of a control point.
    pub fn point_position(&self, c: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (c[a] as f64 - 1.0) * self.spacing[a])
    }

    /// First control index of the 4-point support and the local coordinate
    /// along one axis. The cell is clamped so points outside the lattice
    /// extrapolate the boundary polynomial.
    #[inline]
    fn locate(&self, axis: usize, x: f64) -> (usize, f64) {
        let t = x / self.spacing[axis];
        let max_cell = (self.grid_dims[axis] - 4) as f64;
        let cell = if t.is_nan() { 0.0 } else { t.floor().clamp(0.0, max_cell) };
        (cell as usize, t - cell)
    }
}

/// Support of one point: base control indices and per-axis basis weights.
#[derive(Debug, Clone, Copy)]
struct Support {
    base: [usize; 3],
    w: [[f64; 4]; 3],
}

impl Support {
    #[inline]
    fn at(geom: &GridGeometry, q: [f64; 3]) -> Self {
        let mut base = [0; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let (c, u) = geom.locate(a, q[a]);
            base[a] = c;
            w[a] = cubic_bspline_basis(u);
        }
        Self { base, w }
    }
}

/// Control lattice with its displacements (3 per point, point-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub geometry: GridGeometry,
    pub phi: Vec<f64>,
}

impl ControlGrid {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            phi: vec![0.0; 3 * geometry.num_points()],
            geometry,
        }
    }

    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        ffd_displacement(&self.geometry, &self.phi, p)
    }
}

/// Tensor-product cubic B-spline displacement at `p`.
#[inline]
pub fn ffd_displacement(geom: &GridGeometry, phi: &[f64], p: [f64; 3]) -> [f64; 3] {
    let s = Support::at(geom, p);
    let mut d = [0.0; 3];
    let [gx, gy, _] = geom.grid_dims;
    for n in 0..4 {
        let wz = s.w[2][n];
        for m in 0..4 {
            let wyz = s.w[1][m] * wz;
            let row = s.base[0] + gx * (s.base[1] + m + gy * (s.base[2] + n));
            for l in 0..4 {
                let w = s.w[0][l] * wyz;
                let c = 3 * (row + l);
                d[0] += w * phi[c];
                d[1] += w * phi[c + 1];
                d[2] += w * phi[c + 2];
            }
        }
    }
    d
}

/// Displacement and its Jacobian `J[a][b] = d disp_a / d q_b`.
fn ffd_displacement_jacobian(geom: &GridGeometry, phi: &[f64], q: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut base = [0; 3];
    let mut w = [[0.0; 4]; 3];
    let mut dw = [[0.0; 4]; 3];
    for a in 0..3 {
        let (c, u) = geom.locate(a, q[a]);
        base[a] = c;
        w[a] = cubic_bspline_basis(u);
        let d = cubic_bspline_basis_deriv(u);
        let inv = 1.0 / geom.spacing[a];
        dw[a] = d.map(|x| x * inv);
    }
    let [gx, gy, _] = geom.grid_dims;
    let mut disp = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for n in 0..4 {
        for m in 0..4 {
            let row = base[0] + gx * (base[1] + m + gy * (base[2] + n));
            for l in 0..4 {
                let c = 3 * (row + l);
                let v = [phi[c], phi[c + 1], phi[c + 2]];
                let b = w[0][l] * w[1][m] * w[2][n];
                let db = [
                    dw[0][l] * w[1][m] * w[2][n],
                    w[0][l] * dw[1][m] * w[2][n],
                    w[0][l] * w[1][m] * dw[2][n],
                ];
                for a in 0..3 {
                    disp[a] += b * v[a];
                    for (bb, dbb) in db.iter().enumerate() {
                        jac[a][bb] += dbb * v[a];
                    }
                }
            }
        }
    }
    (disp, jac)
}

/// `[theta (12) | phi (3 * points)]` plus the lattice geometry it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl ParamVector {
    /// Identity affine and zero displacements on `grid_dims` spanning `target_dims`.
    pub fn identity(grid_dims: [usize; 3], target_dims: [usize; 3]) -> Result<Self, TransformError> {
        let geometry = GridGeometry::new(grid_dims, target_dims)?;
        let mut values = vec![0.0; geometry.param_len()];
        values[..AFFINE_LEN].copy_from_slice(&AffineParams::identity().0);
        Ok(Self { geometry, values })
    }

    pub fn default_for(target_dims: [usize; 3]) -> Self {
        Self::identity(DEFAULT_GRID, target_dims).expect("default grid is valid")
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<f64>) -> Result<Self, TransformError> {
        if values.len() != geometry.param_len() {
            return Err(TransformError::LengthMismatch {
                expected: geometry.param_len(),
                found: values.len(),
            });
        }
        Ok(Self { geometry, values })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn theta(&self) -> &[f64] {
        &self.values[..AFFINE_LEN]
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[AFFINE_LEN..]
    }

    pub fn affine(&self) -> AffineParams {
        AffineParams::from_slice(self.theta())
    }

    pub fn control_grid(&self) -> ControlGrid {
        ControlGrid {
            geometry: self.geometry,
            phi: self.phi().to_vec(),
        }
    }

    pub fn set_affine(&mut self, a: AffineParams) {
        self.values[..AFFINE_LEN].copy_from_slice(&a.0);
    }

    /// Maps a target-space point into atlas space.
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        compose_apply(self, p)
    }

    pub fn to_vpar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.values.len());
        out.extend_from_slice(VPAR_MAGIC);
        out.extend_from_slice(&VPAR_VERSION.to_le_bytes());
        for g in self.geometry.grid_dims {
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// The lattice spacing is not stored; it is rederived from `target_dims`.
    pub fn from_vpar_bytes(bytes: &[u8], target_dims: [usize; 3]) -> Result<Self, TransformError> {
        let take = |off: usize, len: usize, field: &'static str| {
            bytes.get(off..off + len).ok_or(TransformError::Truncated {
                field,
                expected: off + len,
                found: bytes.len(),
            })
        };
        let magic: [u8; 4] = take(0, 4, "magic")?.try_into().unwrap();
        if &magic != VPAR_MAGIC {
            return Err(TransformError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
        if version != VPAR_VERSION {
            return Err(TransformError::UnsupportedVersion(version));
        }
        let mut grid = [0usize; 3];
        for (a, g) in grid.iter_mut().enumerate() {
            *g = u32::from_le_bytes(take(8 + 4 * a, 4, "grid dims")?.try_into().unwrap()) as usize;
        }
        let geometry = GridGeometry::new(grid, target_dims)?;
        let n = geometry.param_len();
        let payload = take(20, 4 * n, "parameters")?;
        if bytes.len() != 20 + 4 * n {
            return Err(TransformError::LengthMismatch {
                expected: n,
                found: (bytes.len() - 20) / 4,
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { geometry, values })
    }

    pub fn write_vpar(&self, path: impl AsRef<Path>) -> Result<(), TransformError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_vpar_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_vpar(path: impl AsRef<Path>, target_dims: [usize; 3]) -> Result<Self, TransformError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_vpar_bytes(&bytes, target_dims)
    }
}

/// `q = affine(p)`, then `q + ffd(q)`.
#[inline]
pub fn compose_apply(params: &ParamVector, p: [f64; 3]) -> [f64; 3] {
    let q = affine_apply(params.theta(), p);
    let d = ffd_displacement(&params.geometry, params.phi(), q);
    [q[0] + d[0], q[1] + d[1], q[2] + d[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Trilinear,
    Nearest,
}

/// Resamples `atlas` on a `target_dims` grid, picking the sampler from the
/// volume kind (labels stay binary under nearest-neighbour sampling).
pub fn warp(params: &ParamVector, atlas: &Volume, target_dims: [usize; 3]) -> Volume {
    let sampling = match atlas.kind() {
        VolumeKind::Intensity => Sampling::Trilinear,
        VolumeKind::Label => Sampling::Nearest,
    };
    warp_with(params, atlas, target_dims, sampling)
}

pub fn warp_with(
    params: &ParamVector,
    atlas: &Volume,
    target_dims: [usize; 3],
    sampling: Sampling,
) -> Volume {
    let [nx, ny, nz] = target_dims;
    let mut data = vec![0.0; nx * ny * nz];
    let has_ffd = params.phi().iter().any(|&v| v != 0.0);
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = [i as f64, j as f64, k as f64];
                let r = if has_ffd {
                    compose_apply(params, p)
                } else {
                    affine_apply(params.theta(), p)
                };
                slab[i + nx * j] = match sampling {
                    Sampling::Trilinear => atlas.sample_trilinear(r),
                    Sampling::Nearest => atlas.sample_nearest(r),
                };
            }
        }
    });
    Volume::new(target_dims, atlas.spacing(), data, atlas.kind())
        .expect("warped values are convex combinations of atlas values")
}

/// Gradient of `sum_p upstream[p] * warp(params, atlas)[p]` with respect to
/// every parameter, through trilinear sampling, the FFD and the affine map.
/// `upstream` is laid out on the target grid.
pub fn warp_vjp(params: &ParamVector, atlas: &Volume, upstream: &Volume) -> Vec<f64> {
    warp_vjp_multi(params, &[(atlas, upstream.data())], upstream.dims())
}

/// Same as [`warp_vjp`] for several atlas volumes warped by one deformation;
/// the parameter gradients are summed.
pub fn warp_vjp_multi(
    params: &ParamVector,
    terms: &[(&Volume, &[f64])],
    target_dims: [usize; 3],
) -> Vec<f64> {
    vjp_impl(params, terms, target_dims, true)
}

/// [`warp_vjp`] restricted to the 12 affine entries; the control-point
/// entries of the result are left at zero.
pub fn warp_vjp_affine(params: &ParamVector, atlas: &Volume, upstream: &Volume) -> Vec<f64> {
    vjp_impl(params, &[(atlas, upstream.data())], upstream.dims(), false)
}

fn vjp_impl(params: &ParamVector, terms: &[(&Volume, &[f64])], target_dims: [usize; 3], with_phi: bool) -> Vec<f64> {
    let has_ffd = params.phi().iter().any(|&v| v != 0.0);
    let geom = params.geometry;
    let theta = params.theta();
    let phi = params.phi();
    let [nx, ny, nz] = target_dims;
    let [gx, gy, _] = geom.grid_dims;
    let plen = geom.param_len();

    // One partial per z-slab, merged in slab order so the result does not
    // depend on scheduling.
    let partials: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut g = vec![0.0; plen];
            let mut touched = false;
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    if terms.iter().all(|(_, u)| u[idx] == 0.0) {
                        continue;
                    }
                    touched = true;
                    let p = [i as f64, j as f64, k as f64];
                    let q = affine_apply(theta, p);
                    let (disp, jac) = if has_ffd {
                        ffd_displacement_jacobian(&geom, phi, q)
                    } else {
                        ([0.0; 3], [[0.0; 3]; 3])
                    };
                    let r = [q[0] + disp[0], q[1] + disp[1], q[2] + disp[2]];
                    let mut dr = [0.0; 3];
                    for (vol, up) in terms {
                        let u = up[idx];
                        if u != 0.0 {
                            let (_, gr) = vol.sample_trilinear_grad(r);
                            for a in 0..3 {
                                dr[a] += u * gr[a];
                            }
                        }
                    }
                    // phi: d r_a / d phi_{c,a} = B_c(q)
                    let s = Support::at(&geom, q);
                    for n in (0..4).filter(|_| with_phi) {
                        for m in 0..4 {
                            let wyz = s.w[1][m] * s.w[2][n];
                            let row = s.base[0] + gx * (s.base[1] + m + gy * (s.base[2] + n));
                            for l in 0..4 {
                                let w = s.w[0][l] * wyz;
                                let c = AFFINE_LEN + 3 * (row + l);
                                g[c] += w * dr[0];
                                g[c + 1] += w * dr[1];
                                g[c + 2] += w * dr[2];
                            }
                        }
                    }
                    // theta: dL/dq = (I + J)^T dL/dr
                    let mut dq = dr;
                    for b in 0..3 {
                        for a in 0..3 {
                            dq[b] += jac[a][b] * dr[a];
                        }
                    }
                    for a in 0..3 {
                        g[3 * a] += dq[a] * p[0];
                        g[3 * a + 1] += dq[a] * p[1];
                        g[3 * a + 2] += dq[a] * p[2];
                        g[9 + a] += dq[a];
                    }
                }
            }
            if touched {
                g
            } else {
                Vec::new()
            }
        })
        .collect();

    let mut grad = vec![0.0; plen];
    for part in partials.iter().filter(|p| !p.is_empty()) {
        for (acc, v) in grad.iter_mut().zip(part) {
            *acc += v;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let id = AffineParams::identity();
        assert_eq!(id.apply([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);
        assert_eq!(AffineParams::translation([1.0, 2.0, 3.0]).apply([0.0; 3]), [1.0, 2.0, 3.0]);
        let mut two = AffineParams::identity();
        two.0[0] = 2.0;
        two.0[4] = 2.0;
        two.0[8] = 2.0;
        assert_eq!(two.apply([1.0, 1.0, 1.0]), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn basis_values() {
        let b = cubic_bspline_basis(0.0);
        let want = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0];
        for i in 0..4 {
            assert!((b[i] - want[i]).abs() < 1e-15);
        }
        // Closed-form polynomials at 0.5: (1/48, 23/48, 23/48, 1/48).
        let b = cubic_bspline_basis(0.5);
        let want = [1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0];
        for i in 0..4 {
            assert!((b[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_derivative_matches_differences() {
        for &u in &[0.0, 0.13, 0.5, 0.77, 0.999] {
            let d = cubic_bspline_basis_deriv(u);
            let h = 1e-6;
            let bp = cubic_bspline_basis(u + h);
            let bm = cubic_bspline_basis(u - h);
            for i in 0..4 {
                let fd = (bp[i] - bm[i]) / (2.0 * h);
                assert!((fd - d[i]).abs() < 1e-8, "u={u} i={i}");
            }
        }
    }

    #[test]
    fn grid_spans_volume_with_margin() {
        let g = GridGeometry::new(DEFAULT_GRID, [32, 32, 32]).unwrap();
        assert_eq!(g.param_len(), 3012);
        assert!((g.point_position([1, 1, 1])[0]).abs() < 1e-12);
        assert!((g.point_position([8, 8, 8])[2] - 31.0).abs() < 1e-12);
        assert!(GridGeometry::new([3, 10, 10], [32; 3]).is_err());
    }

    #[test]
    fn ffd_zero_and_uniform() {
        let geom = GridGeometry::new(DEFAULT_GRID, [20, 20, 20]).unwrap();
        let zero = vec![0.0; 3000];
        assert_eq!(ffd_displacement(&geom, &zero, [3.3, 7.1, 19.0]), [0.0; 3]);
        let d = [0.7, -1.2, 2.5];
        let uniform: Vec<f64> = (0..3000).map(|i| d[i % 3]).collect();
        for p in [[0.0, 0.0, 0.0], [5.5, 12.25, 18.9], [19.0, 19.0, 19.0], [-2.0, 25.0, 3.0]] {
            let got = ffd_displacement(&geom, &uniform, p);
            for a in 0..3 {
                assert!((got[a] - d[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffd_single_control_point_at_cell_centre() {
        // Brute-force oracle: sum all 1000 control points with explicit basis
        // evaluation per axis, independent of the 4x4x4 support bookkeeping.
        let geom = GridGeometry::new(DEFAULT_GRID, [29, 29, 29]).unwrap();
        let h = geom.spacing[0];
        let target = [4usize, 5, 3];
        let mut phi = vec![0.0; 3000];
        let c = geom.point_index(target);
        phi[3 * c] = 1.0;
        phi[3 * c + 1] = -2.0;
        // centre of the cell whose support is points 3..=6 along x, etc.
        let p = [3.5 * h, 3.5 * h, 2.5 * h];
        let brute = |axis: usize, ci: usize| -> f64 {
            let t = p[axis] / h;
            let cell = t.floor() as isize;
            let u = t - cell as f64;
            let off = ci as isize - cell;
            if (0..4).contains(&off) {
                cubic_bspline_basis(u)[off as usize]
            } else {
                0.0
            }
        };
        let w = brute(0, target[0]) * brute(1, target[1]) * brute(2, target[2]);
        assert!(w > 0.0);
        // offsets 1, 2, 1 inside the support: 23/48 on every axis
        let expected_w = (23.0f64 / 48.0).powi(3);
        assert!((w - expected_w).abs() < 1e-14);
        let d = ffd_displacement(&geom, &phi, p);
        assert!((d[0] - w).abs() < 1e-14);
        assert!((d[1] + 2.0 * w).abs() < 1e-14);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn compose_examples() {
        let mut params = ParamVector::default_for([16, 16, 16]);
        assert_eq!(params.apply([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);
        params.set_affine(AffineParams::translation([1.0, -2.0, 0.5]));
        assert_eq!(params.apply([3.0, 4.0, 5.0]), [4.0, 2.0, 5.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in params.values_mut().iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let p = [7.2, 1.5, 9.9];
        let q = params.affine().apply(p);
        let d = params.control_grid().displacement(q);
        let got = params.apply(p);
        for a in 0..3 {
            assert!((got[a] - (q[a] + d[a])).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_warp_is_exact_resampling() {
        let vol = Volume::from_fn([9, 7, 5], [1.0; 3], VolumeKind::Intensity, |i, j, k| {
            ((i * 31 + j * 17 + k * 7) % 13) as f64 / 13.0
        })
        .unwrap();
        let params = ParamVector::default_for(vol.dims());
        assert_eq!(warp(&params, &vol, vol.dims()), vol);
        let lbl = vol.threshold(0.5);
        assert_eq!(warp(&params, &lbl, lbl.dims()), lbl);
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let vol = Volume::from_fn([8, 6, 6], [1.0; 3], VolumeKind::Intensity, |i, j, k| {
            (i * i + 3 * j + k) as f64
        })
        .unwrap();
        let mut params = ParamVector::default_for(vol.dims());
        params.set_affine(AffineParams::translation([1.0, 0.0, 0.0]));
        let out = warp(&params, &vol, vol.dims());
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..7 {
                    assert_eq!(out.get(i, j, k), vol.get(i + 1, j, k));
                }
            }
        }
    }

    #[test]
    fn vjp_of_zero_upstream_is_zero() {
        let vol = Volume::from_fn([8, 8, 8], [1.0; 3], VolumeKind::Intensity, |i, _, _| i as f64).unwrap();
        let params = ParamVector::default_for(vol.dims());
        let up = Volume::zeros(vol.dims(), [1.0; 3], VolumeKind::Intensity);
        assert!(warp_vjp(&params, &vol, &up).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn translation_gradient_on_linear_ramp() {
        // A(r) = 0.25 r_x, so d/dt_x of sum_p A(p + t) is 0.25 per voxel that
        // stays strictly inside the clamp range.
        let dims = [10, 6, 6];
        let slope = 0.25;
        let vol = Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |i, _, _| slope * i as f64).unwrap();
        let mut params = ParamVector::default_for(dims);
        params.set_affine(AffineParams::translation([0.3, 0.0, 0.0]));
        let up = Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |_, _, _| 1.0).unwrap();
        let g = warp_vjp(&params, &vol, &up);
        // x in 0..=8 map to 0.3..=8.3 (interior); x = 9 maps to 9.3 (clamped).
        let interior = 9 * 6 * 6;
        assert!((g[9] - slope * interior as f64).abs() < 1e-9);
    }

    fn multilinear(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |i, j, k| {
            let (x, y, z) = (i as f64 / 8.0, j as f64 / 8.0, k as f64 / 8.0);
            c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z + c[6] * x * z + c[7] * x * y * z
        })
        .unwrap()
    }

    #[test]
    fn vjp_matches_central_differences() {
        let dims = [12, 12, 12];
        let atlas = multilinear(dims, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamVector::default_for(dims);
        for (i, v) in params.values_mut().iter_mut().enumerate() {
            *v += if i < 9 { rng.random_range(-0.02..0.02) } else { rng.random_range(-0.3..0.3) };
        }
        let up: Vec<f64> = (0..atlas.len())
            .map(|idx| {
                let c = atlas.coords(idx);
                if c.iter().all(|&x| (2..10).contains(&x)) { rng.random_range(-1.0..1.0) } else { 0.0 }
            })
            .collect();
        let upv = atlas.with_data(up.clone()).unwrap();
        let grad = warp_vjp(&params, &atlas, &upv);
        let f = |pv: &ParamVector| -> f64 {
            warp(pv, &atlas, dims).data().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-3;
        let mut idxs: Vec<usize> = (0..12).collect();
        idxs.extend((0..30).map(|_| rng.random_range(12..3012)));
        for idx in idxs {
            let mut plus = params.clone();
            plus.values_mut()[idx] += h;
            let mut minus = params.clone();
            minus.values_mut()[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!((fd - grad[idx]).abs() / denom < 1e-4, "param {idx}: fd {fd} analytic {}", grad[idx]);
        }
    }

    #[test]
    fn affine_vjp_agrees_with_full_vjp() {
        let dims = [10, 10, 10];
        let atlas = multilinear(dims, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let up = atlas.with_data((0..atlas.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for with_ffd in [false, true] {
            let mut params = ParamVector::default_for(dims);
            params.values_mut()[9] = 0.4;
            if with_ffd {
                params.values_mut()[500] = 0.2;
            }
            let full = warp_vjp(&params, &atlas, &up);
            let aff = warp_vjp_affine(&params, &atlas, &up);
            assert_eq!(&full[..AFFINE_LEN], &aff[..AFFINE_LEN]);
            assert!(aff[AFFINE_LEN..].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn vpar_round_trip_and_errors() {
        let mut p = ParamVector::default_for([32; 3]);
        p.values_mut()[100] = 0.25;
        let bytes = p.to_vpar_bytes();
        assert_eq!(bytes.len(), 20 + 4 * 3012);
        let back = ParamVector::from_vpar_bytes(&bytes, [32; 3]).unwrap();
        assert_eq!(back, p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamVector::from_vpar_bytes(&bad, [32; 3]), Err(TransformError::BadMagic(_))));
        assert!(matches!(
            ParamVector::from_vpar_bytes(&bytes[..100], [32; 3]),
            Err(TransformError::Truncated { field: "parameters", .. })
        ));
    }

    proptest! {
        #[test]
        fn partition_of_unity(u in 0.0f64..1.0) {
            let s: f64 = cubic_bspline_basis(u).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn compose_is_continuous_in_params(idx in 0usize..3012, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ParamVector::default_for([16; 3]);
            let p = [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)];
            let base = params.apply(p);
            for eps in [1e-3, 1e-5] {
                let mut moved = params.clone();
                moved.values_mut()[idx] += eps;
                let r = moved.apply(p);
                let dist = (0..3).map(|a| (r[a] - base[a]).abs()).fold(0.0, f64::max);
                // |d r / d theta| <= max coordinate (15) + 1
                prop_assert!(dist <= 16.0 * eps + 1e-12);
            }
        }

        #[test]
        fn label_warp_stays_binary(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lbl = Volume::from_fn([8, 8, 8], [1.0; 3], VolumeKind::Label, |_, _, _| {
                if rng.random_bool(0.4) { 1.0 } else { 0.0 }
            }).unwrap();
            let mut params = ParamVector::default_for([8; 3]);
            for v in params.values_mut().iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            prop_assert!(warp(&params, &lbl, [8; 3]).is_binary());
        }
    }
}
