//! Synthetic left-ventricle phantoms: a thick-walled ellipsoid with a dark
//! cavity, bright wall and mid-grey background under multiplicative speckle.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("endocardial axes {endo:?} must lie strictly inside epicardial axes {epi:?}")]
    AxesNotNested { endo: [f64; 3], epi: [f64; 3] },
    #[error("invalid phantom parameter `{0}`")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("manifest: {0}")]
    Manifest(#[from] csv::Error),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Acquisition regime; the two differ in speckle strength and background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    A,
    B,
}

impl Regime {
    pub fn noise_strength(self) -> f64 {
        match self {
            Regime::A => 0.25,
            Regime::B => 0.40,
        }
    }

    pub fn background(self) -> f64 {
        match self {
            Regime::A => 0.45,
            Regime::B => 0.35,
        }
    }

    fn salt(self) -> u64 {
        match self {
            Regime::A => 0x5eed_a000,
            Regime::B => 0x5eed_b000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axes in mm.
    pub epi_axes: [f64; 3],
    pub endo_axes: [f64; 3],
    /// Rotation angles (rad) about x, y, z, applied in that order.
    pub rotation: [f64; 3],
    /// Centre offset from the volume centre, mm.
    pub translation: [f64; 3],
    pub wall_mean: f64,
    pub blood_mean: f64,
    pub background_mean: f64,
    pub noise_strength: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl PhantomSpec {
    /// Axis-aligned, centred phantom with regime defaults.
    pub fn centred(dims: [usize; 3], spacing: [f64; 3], endo: [f64; 3], epi: [f64; 3], regime: Regime, seed: u64) -> Self {
        Self {
            dims,
            spacing,
            epi_axes: epi,
            endo_axes: endo,
            rotation: [0.0; 3],
            translation: [0.0; 3],
            wall_mean: 0.9,
            blood_mean: 0.1,
            background_mean: regime.background(),
            noise_strength: regime.noise_strength(),
            regime,
            seed,
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.contains(&0) {
            return Err(PhantomError::InvalidParameter("dims"));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(PhantomError::InvalidParameter("spacing"));
        }
        if !self.endo_axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(PhantomError::InvalidParameter("endo_axes"));
        }
        if !(0..3).all(|a| self.endo_axes[a] < self.epi_axes[a]) {
            return Err(PhantomError::AxesNotNested {
                endo: self.endo_axes,
                epi: self.epi_axes,
            });
        }
        if !(self.noise_strength.is_finite() && self.noise_strength >= 0.0) {
            return Err(PhantomError::InvalidParameter("noise_strength"));
        }
        Ok(())
    }

    /// Analytic cavity volume `4/3 pi abc` in mm³.
    pub fn cavity_volume_mm3(&self) -> f64 {
        4.0 / 3.0 * PI * self.endo_axes.iter().product::<f64>()
    }

    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation;
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub label: Volume,
    pub cavity_volume_mm3: f64,
}

/// Renders the phantom. Labels depend on geometry only; the noise field is
/// seeded from `seed` and the regime.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let r = spec.rotation_matrix();
    let c = [0, 1, 2].map(|a| (spec.dims[a] as f64 - 1.0) / 2.0 * spec.spacing[a] + spec.translation[a]);
    // Body frame coordinates: R^T (p - c).
    let body = |i: usize, j: usize, k: usize| {
        let p = [i as f64 * spec.spacing[0] - c[0], j as f64 * spec.spacing[1] - c[1], k as f64 * spec.spacing[2] - c[2]];
        [0, 1, 2].map(|a| r[0][a] * p[0] + r[1][a] * p[1] + r[2][a] * p[2])
    };
    let inside = |q: [f64; 3], axes: [f64; 3]| (0..3).map(|a| (q[a] / axes[a]).powi(2)).sum::<f64>() <= 1.0;

    let label = Volume::from_fn(spec.dims, spec.spacing, VolumeKind::Label, |i, j, k| {
        inside(body(i, j, k), spec.endo_axes) as u8 as f64
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ spec.regime.salt());
    let gamma = if spec.noise_strength > 0.0 {
        let shape = 1.0 / (spec.noise_strength * spec.noise_strength);
        Some(Gamma::new(shape, 1.0 / shape).map_err(|_| PhantomError::InvalidParameter("noise_strength"))?)
    } else {
        None
    };
    let raw = Volume::from_fn(spec.dims, spec.spacing, VolumeKind::Intensity, |i, j, k| {
        let q = body(i, j, k);
        let mean = if inside(q, spec.endo_axes) {
            spec.blood_mean
        } else if inside(q, spec.epi_axes) {
            spec.wall_mean
        } else {
            spec.background_mean
        };
        match &gamma {
            Some(g) => mean * g.sample(&mut rng),
            None => mean,
        }
    })?;
    Ok(Phantom {
        image: raw.gaussian_smooth(1.0).normalize(),
        label,
        cavity_volume_mm3: spec.cavity_volume_mm3(),
    })
}

/// One subject: end-diastole and end-systole frames plus the analytic EF.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: usize,
    pub regime: Regime,
    pub ed: Phantom,
    pub es: Phantom,
    pub true_ef: f64,
}

/// Sampling ranges for subject geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Nominal endocardial semi-axes at end-diastole, mm.
    pub endo_axes: [f64; 3],
    /// Relative jitter applied to each semi-axis.
    pub axis_jitter: f64,
    pub wall_mm: [f64; 2],
    pub max_rotation: f64,
    pub max_translation_mm: f64,
    pub ef_range: [f64; 2],
}

impl SubjectConfig {
    /// Geometry for a cubic grid of side `n` spanning about 64 mm.
    pub fn for_dims(n: usize) -> Self {
        let s = 64.0 / n as f64;
        Self {
            dims: [n; 3],
            spacing: [s; 3],
            endo_axes: [11.0, 11.0, 16.0],
            axis_jitter: 0.1,
            wall_mm: [5.0, 7.0],
            max_rotation: 0.15,
            max_translation_mm: 2.0,
            ef_range: [0.35, 0.70],
        }
    }
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self::for_dims(32)
    }
}

/// Draws a subject from `seed`. ES contracts the endocardial axes by
/// `s = (1 - EF)^(1/3)` and keeps the epicardium fixed.
pub fn generate_subject(id: usize, seed: u64, cfg: &SubjectConfig) -> Result<Subject, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regime = if rng.random::<bool>() { Regime::A } else { Regime::B };
    let endo = cfg.endo_axes.map(|a| a * (1.0 + rng.random_range(-cfg.axis_jitter..=cfg.axis_jitter)));
    let wall = rng.random_range(cfg.wall_mm[0]..=cfg.wall_mm[1]);
    let epi = endo.map(|a| a + wall);
    let rotation = [0; 3].map(|_| rng.random_range(-cfg.max_rotation..=cfg.max_rotation));
    let translation = [0; 3].map(|_| rng.random_range(-cfg.max_translation_mm..=cfg.max_translation_mm));
    let ef = rng.random_range(cfg.ef_range[0]..=cfg.ef_range[1]);
    let noise_seed = rng.random::<u64>();

    let mut ed_spec = PhantomSpec::centred(cfg.dims, cfg.spacing, endo, epi, regime, noise_seed);
    ed_spec.rotation = rotation;
    ed_spec.translation = translation;
    let mut es_spec = ed_spec.clone();
    es_spec.endo_axes = contract(endo, ef);
    es_spec.seed = noise_seed.wrapping_add(1);
    let ed = generate(&ed_spec)?;
    let es = generate(&es_spec)?;
    let true_ef = 1.0 - es.cavity_volume_mm3 / ed.cavity_volume_mm3;
    Ok(Subject {
        id,
        regime,
        ed,
        es,
        true_ef,
    })
}

/// Endocardial axes after a contraction giving ejection fraction `ef`.
pub fn contract(endo: [f64; 3], ef: f64) -> [f64; 3] {
    let s = (1.0 - ef).cbrt();
    endo.map(|a| a * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Ed,
    Es,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One manifest row; every subject contributes an ED and an ES row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject: usize,
    pub frame: Frame,
    pub true_ef: f64,
    pub regime: Regime,
    pub split: Split,
    pub image: String,
    pub label: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Image/label pair loaded from a dataset directory.
#[derive(Debug, Clone)]
pub struct Case {
    pub subject: usize,
    pub frame: Frame,
    pub regime: Regime,
    pub split: Split,
    pub true_ef: f64,
    pub image: Volume,
    pub label: Volume,
}

impl Case {
    pub fn id(&self) -> String {
        let f = match self.frame {
            Frame::Ed => "ed",
            Frame::Es => "es",
        };
        format!("s{:03}_{f}", self.subject)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    /// Generates `n` subjects with seeds derived from `seed`; the first
    /// `n_train` go to the training split.
    pub fn generate(n: usize, n_train: usize, seed: u64, cfg: &SubjectConfig) -> Result<Self, PhantomError> {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<u64> = (0..n).map(|_| root.random()).collect();
        let subjects: Vec<Subject> = {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .enumerate()
                .map(|(id, &s)| generate_subject(id, s, cfg))
                .collect::<Result<_, _>>()?
        };
        let mut cases = Vec::with_capacity(2 * n);
        for s in subjects {
            let split = if s.id < n_train { Split::Train } else { Split::Val };
            for (frame, p) in [(Frame::Ed, s.ed), (Frame::Es, s.es)] {
                cases.push(Case {
                    subject: s.id,
                    frame,
                    regime: s.regime,
                    split,
                    true_ef: s.true_ef,
                    image: p.image,
                    label: p.label,
                });
            }
        }
        Ok(Self { cases })
    }

    pub fn split(&self, split: Split) -> Vec<&Case> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    /// Writes VVOL pairs and `manifest.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, PhantomError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
        for c in &self.cases {
            let image = format!("{}_img.vvol", c.id());
            let label = format!("{}_lbl.vvol", c.id());
            c.image.write_vvol(dir.join(&image))?;
            c.label.write_vvol(dir.join(&label))?;
            written.push(dir.join(&image));
            written.push(dir.join(&label));
            w.serialize(ManifestRow {
                subject: c.subject,
                frame: c.frame,
                true_ef: c.true_ef,
                regime: c.regime,
                split: c.split,
                image,
                label,
            })?;
        }
        w.flush()?;
        written.push(dir.join(MANIFEST));
        Ok(written)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self, PhantomError> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(PhantomError::Dataset(format!("missing {}", path.display())));
        }
        let mut r = csv::Reader::from_path(&path)?;
        let mut cases = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            let image = Volume::read_vvol(dir.join(&row.image))?;
            let label = Volume::read_vvol(dir.join(&row.label))?;
            if image.dims() != label.dims() {
                return Err(PhantomError::Dataset(format!("{}: image/label dims differ", row.image)));
            }
            cases.push(Case {
                subject: row.subject,
                frame: row.frame,
                regime: row.regime,
                split: row.split,
                true_ef: row.true_ef,
                image,
                label,
            });
        }
        if cases.is_empty() {
            return Err(PhantomError::Dataset("manifest lists no cases".into()));
        }
        Ok(Self { cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ejection_fraction;

    #[test]
    fn voxel_volume_matches_analytic_ellipsoid() {
        let mut spec = PhantomSpec::centred([64; 3], [1.0; 3], [12.0, 14.0, 20.0], [18.0, 20.0, 26.0], Regime::A, 1);
        spec.noise_strength = 0.0;
        let p = generate(&spec).unwrap();
        let measured = p.label.foreground_count() as f64 * p.label.voxel_volume_mm3();
        let rel = (measured - p.cavity_volume_mm3).abs() / p.cavity_volume_mm3;
        assert!(rel < 0.02, "relative error {rel}");
        assert!(p.label.is_binary());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SubjectConfig::default();
        let a = generate_subject(0, 42, &cfg).unwrap();
        let b = generate_subject(0, 42, &cfg).unwrap();
        assert_eq!(a.ed.image, b.ed.image);
        assert_eq!(a.es.label, b.es.label);
        assert_eq!(a.true_ef, b.true_ef);
    }

    #[test]
    fn regime_changes_noise_not_labels() {
        let mk = |r| generate(&PhantomSpec::centred([24; 3], [2.0; 3], [8.0, 8.0, 12.0], [13.0, 13.0, 17.0], r, 7)).unwrap();
        let (a, b) = (mk(Regime::A), mk(Regime::B));
        assert_eq!(a.label, b.label);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn nesting_is_enforced() {
        let spec = PhantomSpec::centred([8; 3], [1.0; 3], [3.0, 3.0, 3.0], [3.0, 4.0, 4.0], Regime::A, 0);
        assert!(matches!(generate(&spec), Err(PhantomError::AxesNotNested { .. })));
    }

    #[test]
    fn contraction_sets_ef() {
        let endo = [10.0, 11.0, 15.0];
        for ef in [0.0, 0.35, 0.5, 0.7] {
            let es = contract(endo, ef);
            let ratio = es.iter().product::<f64>() / endo.iter().product::<f64>();
            assert!((1.0 - ratio - ef).abs() < 1e-12);
        }
        assert_eq!(contract(endo, 0.0), endo);
    }

    #[test]
    fn measured_ef_tracks_analytic_at_64() {
        let cfg = SubjectConfig::for_dims(64);
        for seed in 0..3 {
            let s = generate_subject(0, seed, &cfg).unwrap();
            assert!((0.35..=0.70).contains(&s.true_ef));
            let ef = ejection_fraction(&s.ed.label, &s.es.label).unwrap();
            assert!((ef - s.true_ef).abs() < 0.02, "seed {seed}: {ef} vs {}", s.true_ef);
        }
    }

    #[test]
    fn image_is_normalized_with_contrast() {
        let s = generate_subject(0, 5, &SubjectConfig::default()).unwrap();
        let img = &s.ed.image;
        let (lo, hi) = img.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
        let (mut cav, mut nc, mut rest, mut nr) = (0.0, 0, 0.0, 0);
        for (v, l) in img.data().iter().zip(s.ed.label.data()) {
            if *l == 1.0 {
                cav += v;
                nc += 1;
            } else {
                rest += v;
                nr += 1;
            }
        }
        assert!(cav / (nc as f64) < rest / (nr as f64));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SubjectConfig::for_dims(12);
        let ds = Dataset::generate(3, 2, 9, &cfg).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.cases.len(), 6);
        assert_eq!(back.split(Split::Train).len(), 4);
        for (a, b) in ds.cases.iter().zip(&back.cases) {
            assert_eq!(a.id(), b.id());
            assert_eq!(a.true_ef, b.true_ef);
            assert!(a.label == b.label);
        }
    }
}
