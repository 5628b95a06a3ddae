//! Dense 3D scalar volumes, sampling, normalization and the VVOL file format.
//!
//! Storage order is x-fastest: voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`.
//! Values are held as `f64` in memory and written as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
const VVOL_HEADER_LEN: usize = 36;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected \"VVOL\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown kind byte {0}")]
    BadKind(u8),
    #[error("dims {dims:?} overflow or are zero")]
    DimOverflow { dims: [u64; 3] },
    #[error("non-positive or non-finite spacing {0:?}")]
    BadSpacing([f64; 3]),
    #[error("truncated {field}: expected {expected} bytes, found {found}")]
    Truncated {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("data length {found} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], found: usize },
    #[error("label value {value} at index {index} outside [0, 1]")]
    LabelRange { index: usize, value: f64 },
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimMismatch { a: [usize; 3], b: [usize; 3] },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Intensity,
    /// Values in `[0, 1]`. Ground-truth and emitted segmentations are binary;
    /// atlas and training-time warped labels may be soft.
    Label,
}

impl VolumeKind {
    fn to_byte(self) -> u8 {
        match self {
            VolumeKind::Intensity => 0,
            VolumeKind::Label => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, VolumeError> {
        match b {
            0 => Ok(VolumeKind::Intensity),
            1 => Ok(VolumeKind::Label),
            other => Err(VolumeError::BadKind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
        kind: VolumeKind,
    ) -> Result<Self, VolumeError> {
        let n = checked_len(dims)?;
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                dims,
                found: data.len(),
            });
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if kind == VolumeKind::Label {
            if let Some((index, &value)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(VolumeError::LabelRange { index, value });
            }
        }
        // Spacing is stored at file precision so write/read round-trips compare equal.
        let spacing = spacing.map(|s| s as f32 as f64);
        Ok(Self {
            dims,
            spacing,
            data,
            kind,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![0.0; n], kind).expect("valid zero volume")
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data, kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// Inverse of [`Volume::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn same_dims(&self, other: &Volume) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch {
                a: self.dims,
                b: other.dims,
            });
        }
        Ok(())
    }

    /// Replaces the payload keeping dims, spacing and kind.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Volume, VolumeError> {
        Volume::new(self.dims, self.spacing, data, self.kind)
    }

    /// Binary label from `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> Volume {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
            kind: VolumeKind::Label,
        }
    }

    pub fn as_kind(&self, kind: VolumeKind) -> Result<Volume, VolumeError> {
        Volume::new(self.dims, self.spacing, self.data.clone(), kind)
    }

    /// Trilinear interpolant at a continuous voxel coordinate; each axis is
    /// clamped to `[0, dim - 1]` first.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let (base, frac, _) = self.cell(p);
        let [i0, j0, k0] = base;
        let [i1, j1, k1] = self.upper(base);
        let [fx, fy, fz] = frac;
        let c000 = self.get(i0, j0, k0);
        let c100 = self.get(i1, j0, k0);
        let c010 = self.get(i0, j1, k0);
        let c110 = self.get(i1, j1, k0);
        let c001 = self.get(i0, j0, k1);
        let c101 = self.get(i1, j0, k1);
        let c011 = self.get(i0, j1, k1);
        let c111 = self.get(i1, j1, k1);
        let c00 = c000 + fx * (c100 - c000);
        let c10 = c010 + fx * (c110 - c010);
        let c01 = c001 + fx * (c101 - c001);
        let c11 = c011 + fx * (c111 - c011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        c0 + fz * (c1 - c0)
    }

    /// Trilinear value together with its spatial gradient. Axes where the
    /// coordinate was clamped have zero derivative.
    pub fn sample_trilinear_grad(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let (base, frac, inside) = self.cell(p);
        let [i0, j0, k0] = base;
        let [i1, j1, k1] = self.upper(base);
        let [fx, fy, fz] = frac;
        let c000 = self.get(i0, j0, k0);
        let c100 = self.get(i1, j0, k0);
        let c010 = self.get(i0, j1, k0);
        let c110 = self.get(i1, j1, k0);
        let c001 = self.get(i0, j0, k1);
        let c101 = self.get(i1, j0, k1);
        let c011 = self.get(i0, j1, k1);
        let c111 = self.get(i1, j1, k1);

        let c00 = c000 + fx * (c100 - c000);
        let c10 = c010 + fx * (c110 - c010);
        let c01 = c001 + fx * (c101 - c001);
        let c11 = c011 + fx * (c111 - c011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        let value = c0 + fz * (c1 - c0);

        let dz = c1 - c0;
        let dy = (1.0 - fz) * (c10 - c00) + fz * (c11 - c01);
        let dx0 = (1.0 - fy) * (c100 - c000) + fy * (c110 - c010);
        let dx1 = (1.0 - fy) * (c101 - c001) + fy * (c111 - c011);
        let dx = (1.0 - fz) * dx0 + fz * dx1;

        let mut grad = [dx, dy, dz];
        for a in 0..3 {
            if !inside[a] {
                grad[a] = 0.0;
            }
        }
        (value, grad)
    }

    /// Value at the nearest voxel (`round`, ties away from zero), clamped.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f64 {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let r = p[a].round();
            idx[a] = if r.is_nan() { 0.0 } else { r.clamp(0.0, max) } as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }

    // Lower corner, fractional offsets and whether each axis was strictly
    // inside the clamp range.
    #[inline]
    fn cell(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3], [bool; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let mut c = p[a];
            if c.is_nan() || c <= 0.0 {
                inside[a] = false;
                c = 0.0;
            } else if c >= max {
                inside[a] = false;
                c = max;
            }
            if self.dims[a] == 1 {
                inside[a] = false;
            }
            let f = c.floor();
            base[a] = f as usize;
            frac[a] = c - f;
        }
        (base, frac, inside)
    }

    #[inline]
    fn upper(&self, base: [usize; 3]) -> [usize; 3] {
        [
            (base[0] + 1).min(self.dims[0] - 1),
            (base[1] + 1).min(self.dims[1] - 1),
            (base[2] + 1).min(self.dims[2] - 1),
        ]
    }

    /// Affine rescale to `[0, 1]`; constant volumes become all zeros.
    pub fn normalize(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let data = if range > 0.0 && range.is_finite() {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
            kind: self.kind,
        }
    }

    /// Separable Gaussian smoothing with clamped borders; `sigma` in voxels.
    pub fn gaussian_smooth(&self, sigma: f64) -> Volume {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|w| w / norm).collect();

        let mut cur = self.data.clone();
        let mut next = vec![0.0; cur.len()];
        let [nx, ny, nz] = self.dims;
        let strides = [1usize, nx, nx * ny];
        for axis in 0..3 {
            let n = self.dims[axis] as isize;
            let stride = strides[axis];
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let pos = [i, j, k][axis] as isize;
                        let idx = i + nx * (j + ny * k);
                        let origin = idx - pos as usize * stride;
                        let mut acc = 0.0;
                        for (t, w) in kernel.iter().enumerate() {
                            let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                            acc += w * cur[origin + q * stride];
                        }
                        next[idx] = acc;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: cur,
            kind: self.kind,
        }
    }

    pub fn to_vvol_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VVOL_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VVOL_MAGIC);
        out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
        out.push(self.kind.to_byte());
        out.extend_from_slice(&[0u8; 3]);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_vvol_bytes(bytes: &[u8]) -> Result<Volume, VolumeError> {
        let take = |off: usize, len: usize, field: &'static str| -> Result<&[u8], VolumeError> {
            bytes.get(off..off + len).ok_or(VolumeError::Truncated {
                field,
                expected: off + len,
                found: bytes.len(),
            })
        };
        let magic: [u8; 4] = take(0, 4, "magic")?.try_into().unwrap();
        if &magic != VVOL_MAGIC {
            return Err(VolumeError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
        if version != VVOL_VERSION {
            return Err(VolumeError::UnsupportedVersion(version));
        }
        let kind = VolumeKind::from_byte(take(8, 1, "kind")?[0])?;
        take(9, 3, "pad")?;
        let mut dims64 = [0u64; 3];
        for (a, d) in dims64.iter_mut().enumerate() {
            *d = u32::from_le_bytes(take(12 + 4 * a, 4, "dims")?.try_into().unwrap()) as u64;
        }
        let mut spacing = [0.0; 3];
        for (a, s) in spacing.iter_mut().enumerate() {
            *s = f32::from_le_bytes(take(24 + 4 * a, 4, "spacing")?.try_into().unwrap()) as f64;
        }
        let n = dims64
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64 / 2))
            .ok_or(VolumeError::DimOverflow { dims: dims64 })? as usize;
        let payload = &bytes[VVOL_HEADER_LEN..];
        if payload.len() < 4 * n {
            return Err(VolumeError::Truncated {
                field: "payload",
                expected: 4 * n,
                found: payload.len(),
            });
        }
        if payload.len() > 4 * n {
            return Err(VolumeError::TrailingBytes(payload.len() - 4 * n));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let dims = [dims64[0] as usize, dims64[1] as usize, dims64[2] as usize];
        Volume::new(dims, spacing, data, kind)
    }

    pub fn write_vvol(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_vvol_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Volume::from_vvol_bytes(&bytes)
    }
}

fn checked_len(dims: [usize; 3]) -> Result<usize, VolumeError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or(VolumeError::DimOverflow {
            dims: dims.map(|d| d as u64),
        })
}
