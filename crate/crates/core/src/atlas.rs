//! Mean-space atlas construction and direct NMI registration.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{nmi, LossError, DEFAULT_BINS};
use crate::transform::{warp_vjp, warp_vjp_affine, warp_with, ParamVector, Sampling, TransformError, AFFINE_LEN, DEFAULT_GRID};
use crate::volume::{Volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("atlas construction needs at least 2 cases, got {0}")]
    TooFewCases(usize),
    #[error("case {index} has dims {found:?}, expected {expected:?}")]
    InconsistentDims {
        index: usize,
        found: [usize; 3],
        expected: [usize; 3],
    },
    #[error("registration loss became non-finite at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("atlas manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean-space intensity template and soft label probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub intensity: Volume,
    pub label: Volume,
    pub provenance: Vec<String>,
}

impl Atlas {
    pub fn new(intensity: Volume, label: Volume, provenance: Vec<String>) -> Result<Self, AtlasError> {
        intensity.same_dims(&label)?;
        let intensity = intensity.as_kind(VolumeKind::Intensity)?;
        let label = label.as_kind(VolumeKind::Label)?;
        Ok(Self {
            intensity,
            label,
            provenance,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.intensity.dims()
    }
}

/// Gradient-descent settings for pairwise registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub affine_steps: usize,
    pub joint_steps: usize,
    /// Step sizes for the 3x3 matrix, the translation and the control points.
    pub lr_matrix: f64,
    pub lr_translation: f64,
    pub lr_phi: f64,
    pub momentum: f64,
    pub bins: usize,
    pub grid: [usize; 3],
    /// Gaussian pre-smoothing (voxels) of both images before registering.
    pub smooth_sigma: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            affine_steps: 100,
            joint_steps: 200,
            lr_matrix: 2e-4,
            lr_translation: 20.0,
            lr_phi: 20.0,
            momentum: 0.5,
            bins: DEFAULT_BINS,
            grid: DEFAULT_GRID,
            smooth_sigma: 1.0,
        }
    }
}

impl RegistrationConfig {
    /// Same schedule without the deformable stage.
    pub fn affine_only(&self) -> Self {
        Self {
            joint_steps: 0,
            ..self.clone()
        }
    }

    fn fingerprint(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub params: ParamVector,
    pub loss: f64,
    pub identity_loss: f64,
}

fn registration_loss(fixed: &Volume, moving: &Volume, params: &ParamVector, bins: usize) -> Result<(f64, Vec<f64>), AtlasError> {
    let warped = warp_with(params, moving, fixed.dims(), Sampling::Trilinear);
    let r = nmi(fixed, &warped, bins)?;
    Ok((r.loss, r.grad))
}

/// Registers `moving` onto `fixed` by descending the NMI loss of the warped
/// moving image: an affine stage, then a joint affine + FFD stage. The best
/// parameters seen are returned, so the result is never worse than identity.
pub fn register_pair(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<Registration, AtlasError> {
    fixed.same_dims(moving)?;
    let (f, m) = if cfg.smooth_sigma > 0.0 {
        (fixed.gaussian_smooth(cfg.smooth_sigma).normalize(), moving.gaussian_smooth(cfg.smooth_sigma).normalize())
    } else {
        (fixed.clone(), moving.clone())
    };
    let m = m.as_kind(VolumeKind::Intensity)?;
    let mut params = ParamVector::identity(cfg.grid, fixed.dims())?;
    let (identity_loss, _) = registration_loss(&f, &m, &params, cfg.bins)?;
    let mut best = (identity_loss, params.clone());
    let mut velocity = vec![0.0; params.len()];
    let n_params = params.len();

    let total = cfg.affine_steps + cfg.joint_steps;
    for step in 0..total {
        let joint = step >= cfg.affine_steps;
        let (loss, g_img) = registration_loss(&f, &m, &params, cfg.bins)?;
        if !loss.is_finite() {
            return Err(AtlasError::NonFinite(step));
        }
        if loss < best.0 {
            best = (loss, params.clone());
        }
        let upstream = f.with_data(g_img)?;
        let grad = if joint {
            warp_vjp(&params, &m, &upstream)
        } else {
            warp_vjp_affine(&params, &m, &upstream)
        };
        let active = if joint { n_params } else { AFFINE_LEN };
        let values = params.values_mut();
        for i in 0..active {
            let lr = match i {
                0..9 => cfg.lr_matrix,
                9..AFFINE_LEN => cfg.lr_translation,
                _ => cfg.lr_phi,
            };
            velocity[i] = cfg.momentum * velocity[i] + grad[i];
            values[i] -= lr * velocity[i];
        }
    }
    let (final_loss, _) = registration_loss(&f, &m, &params, cfg.bins)?;
    if final_loss < best.0 {
        best = (final_loss, params);
    }
    Ok(Registration {
        params: best.1,
        loss: best.0,
        identity_loss,
    })
}

/// Atlas construction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasConfig {
    pub rounds: usize,
    pub registration: RegistrationConfig,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            registration: RegistrationConfig::default(),
        }
    }
}

impl AtlasConfig {
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("rounds={};{}", self.rounds, self.registration.fingerprint()));
        hex::encode(digest)
    }
}

fn voxel_mean(vols: &[Volume], kind: VolumeKind) -> Result<Volume, VolumeError> {
    let n = vols.len() as f64;
    let mut acc = vec![0.0; vols[0].len()];
    for v in vols {
        for (a, b) in acc.iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    if kind == VolumeKind::Label {
        acc.iter_mut().for_each(|a| *a = a.clamp(0.0, 1.0));
    }
    Volume::new(vols[0].dims(), vols[0].spacing(), acc, kind)
}

/// Iterative mean-space construction. The reference starts as the voxelwise
/// mean of all images (so the result does not depend on case order); each
/// round registers every case to the reference and replaces it with the mean
/// of the warped images. The first round is affine-only.
pub fn build_atlas(cases: &[(String, Volume, Volume)], cfg: &AtlasConfig) -> Result<Atlas, AtlasError> {
    if cases.len() < 2 {
        return Err(AtlasError::TooFewCases(cases.len()));
    }
    let dims = cases[0].1.dims();
    for (index, (_, img, lbl)) in cases.iter().enumerate() {
        for d in [img.dims(), lbl.dims()] {
            if d != dims {
                return Err(AtlasError::InconsistentDims {
                    index,
                    found: d,
                    expected: dims,
                });
            }
        }
    }
    // Canonical case order keeps the floating-point sums independent of input order.
    let mut order: Vec<&(String, Volume, Volume)> = cases.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let cases = order;
    let images: Vec<Volume> = cases.iter().map(|c| c.1.clone()).collect();
    let mut reference = voxel_mean(&images, VolumeKind::Intensity)?.normalize();
    let mut label = voxel_mean(&cases.iter().map(|c| c.2.clone()).collect::<Vec<_>>(), VolumeKind::Label)?;
    for round in 0..cfg.rounds {
        let reg_cfg = if round == 0 {
            cfg.registration.affine_only()
        } else {
            cfg.registration.clone()
        };
        let warped: Vec<(Volume, Volume)> = cases
            .par_iter()
            .map(|(_, img, lbl)| {
                let r = register_pair(&reference, img, &reg_cfg)?;
                let wi = warp_with(&r.params, img, dims, Sampling::Trilinear);
                let wl = warp_with(&r.params, &lbl.as_kind(VolumeKind::Label)?, dims, Sampling::Trilinear);
                Ok((wi, wl))
            })
            .collect::<Result<_, AtlasError>>()?;
        let (wi, wl): (Vec<Volume>, Vec<Volume>) = warped.into_iter().unzip();
        reference = voxel_mean(&wi, VolumeKind::Intensity)?.normalize();
        label = voxel_mean(&wl, VolumeKind::Label)?;
    }
    Atlas::new(reference, label, cases.iter().map(|c| c.0.clone()).collect())
}

/// Registers the atlas intensity onto `target` and warps the atlas label
/// with the result, thresholded at 0.5.
pub fn segment_by_registration(atlas: &Atlas, target: &Volume, cfg: &RegistrationConfig) -> Result<(Volume, Registration), AtlasError> {
    let r = register_pair(target, &atlas.intensity, cfg)?;
    let soft = warp_with(&r.params, &atlas.label, target.dims(), Sampling::Trilinear);
    Ok((soft.threshold(0.5), r))
}

pub const ATLAS_INTENSITY: &str = "atlas_intensity.vvol";
pub const ATLAS_LABEL: &str = "atlas_label.vvol";
pub const ATLAS_MANIFEST: &str = "atlas_manifest.txt";

/// Writes the two volumes and a `key=value` manifest.
pub fn save_atlas(atlas: &Atlas, dir: impl AsRef<Path>, config_hash: &str) -> Result<(), AtlasError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    atlas.intensity.write_vvol(dir.join(ATLAS_INTENSITY))?;
    atlas.label.write_vvol(dir.join(ATLAS_LABEL))?;
    let manifest = format!(
        "cases={}\nconfig_hash={config_hash}\ndims={}x{}x{}\n",
        atlas.provenance.join(","),
        atlas.dims()[0],
        atlas.dims()[1],
        atlas.dims()[2]
    );
    fs::write(dir.join(ATLAS_MANIFEST), manifest)?;
    Ok(())
}

pub fn load_atlas(dir: impl AsRef<Path>) -> Result<Atlas, AtlasError> {
    let dir = dir.as_ref();
    let intensity = Volume::read_vvol(dir.join(ATLAS_INTENSITY))?;
    let label = Volume::read_vvol(dir.join(ATLAS_LABEL))?;
    let text = fs::read_to_string(dir.join(ATLAS_MANIFEST))?;
    let cases = text
        .lines()
        .find_map(|l| l.strip_prefix("cases="))
        .ok_or_else(|| AtlasError::Manifest("missing `cases`".into()))?;
    let provenance = cases.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
    Atlas::new(intensity, label, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::phantom::{generate, generate_subject, PhantomSpec, Regime, SubjectConfig};

    fn smooth_phantom(dims: usize, shift: [f64; 3], seed: u64) -> (Volume, Volume) {
        let mut spec = PhantomSpec::centred([dims; 3], [2.0; 3], [8.0, 8.0, 12.0], [13.0, 13.0, 17.0], Regime::A, seed);
        spec.translation = shift;
        spec.noise_strength = 0.05;
        let p = generate(&spec).unwrap();
        (p.image, p.label)
    }

    fn centroid(v: &Volume) -> [f64; 3] {
        let mut c = [0.0; 3];
        let mut w = 0.0;
        for (idx, &val) in v.data().iter().enumerate() {
            let p = v.coords(idx);
            for a in 0..3 {
                c[a] += val * p[a] as f64;
            }
            w += val;
        }
        c.map(|x| x / w)
    }

    #[test]
    fn identical_pair_stays_at_identity() {
        let (img, _) = smooth_phantom(16, [0.0; 3], 1);
        let r = register_pair(&img, &img, &RegistrationConfig::default()).unwrap();
        assert!(r.loss <= r.identity_loss);
        assert!(r.loss <= -2.0 + 1e-6);
    }

    #[test]
    fn recovers_a_two_voxel_translation() {
        // Moving is the fixed phantom shifted by +2 voxels (4 mm) along x,
        // so sampling moving at p + 2 reproduces fixed.
        let (fixed, _) = smooth_phantom(24, [0.0; 3], 2);
        let (moving, _) = smooth_phantom(24, [4.0, 0.0, 0.0], 2);
        let cfg = RegistrationConfig {
            joint_steps: 0,
            ..RegistrationConfig::default()
        };
        let r = register_pair(&fixed, &moving, &cfg).unwrap();
        let t = &r.params.theta()[9..12];
        assert!((t[0] - 2.0).abs() < 0.5, "t = {t:?}");
        assert!(t[1].abs() < 0.5 && t[2].abs() < 0.5, "t = {t:?}");
    }

    #[test]
    fn constant_fixed_is_degenerate() {
        let (img, _) = smooth_phantom(12, [0.0; 3], 3);
        let c = Volume::zeros(img.dims(), img.spacing(), VolumeKind::Intensity);
        let err = register_pair(&c, &img, &RegistrationConfig::default()).unwrap_err();
        assert!(matches!(err, AtlasError::Loss(LossError::DegenerateEntropy { .. })));
    }

    #[test]
    fn build_needs_two_cases() {
        let (img, lbl) = smooth_phantom(12, [0.0; 3], 4);
        let err = build_atlas(&[("a".into(), img, lbl)], &AtlasConfig::default()).unwrap_err();
        assert!(matches!(err, AtlasError::TooFewCases(1)));
    }

    fn quick() -> AtlasConfig {
        AtlasConfig {
            rounds: 2,
            registration: RegistrationConfig {
                affine_steps: 30,
                joint_steps: 20,
                ..RegistrationConfig::default()
            },
        }
    }

    #[test]
    fn identical_cases_reproduce_the_case() {
        let (img, lbl) = smooth_phantom(16, [0.0; 3], 5);
        let cases = vec![("a".into(), img.clone(), lbl.clone()), ("b".into(), img.clone(), lbl.clone())];
        let atlas = build_atlas(&cases, &quick()).unwrap();
        let diff: f64 = atlas.intensity.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
        assert!(diff < 1e-9, "mean abs diff {diff}");
        assert!(atlas.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn translated_pair_centres_between() {
        let (a_img, a_lbl) = smooth_phantom(24, [-3.0, 0.0, 0.0], 6);
        let (b_img, b_lbl) = smooth_phantom(24, [3.0, 0.0, 0.0], 6);
        let ca = centroid(&a_lbl)[0];
        let cb = centroid(&b_lbl)[0];
        let cases = vec![("a".into(), a_img, a_lbl), ("b".into(), b_img, b_lbl)];
        let atlas = build_atlas(&cases, &quick()).unwrap();
        let c = centroid(&atlas.label)[0];
        assert!(c > ca.min(cb) && c < ca.max(cb), "{ca} < {c} < {cb}");
    }

    #[test]
    fn order_does_not_matter() {
        let cfg = SubjectConfig::for_dims(16);
        let subjects: Vec<_> = (0..3).map(|i| generate_subject(i, 100 + i as u64, &cfg).unwrap()).collect();
        let cases: Vec<(String, Volume, Volume)> = subjects.iter().map(|s| (format!("s{}", s.id), s.ed.image.clone(), s.ed.label.clone())).collect();
        let mut rev = cases.clone();
        rev.reverse();
        let a = build_atlas(&cases, &quick()).unwrap();
        let b = build_atlas(&rev, &quick()).unwrap();
        let diff: f64 = a.intensity.data().iter().zip(b.intensity.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.intensity.len() as f64;
        assert!(diff < 1e-3, "{diff}");
        assert!(a.label.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn registration_baseline_beats_unwarped_atlas() {
        let cfg = SubjectConfig::for_dims(24);
        let subjects: Vec<_> = (0..4).map(|i| generate_subject(i, 200 + i as u64, &cfg).unwrap()).collect();
        let cases: Vec<(String, Volume, Volume)> = subjects[..3].iter().map(|s| (format!("s{}", s.id), s.ed.image.clone(), s.ed.label.clone())).collect();
        let atlas = build_atlas(&cases, &quick()).unwrap();
        let target = &subjects[3].es;
        let (seg, _) = segment_by_registration(&atlas, &target.image, &RegistrationConfig::default()).unwrap();
        let d_reg = dice(&seg, &target.label).unwrap();
        let d_raw = dice(&atlas.label.threshold(0.5), &target.label).unwrap();
        assert!(d_reg > d_raw + 0.05, "registered {d_reg} vs raw {d_raw}");

        let (self_seg, _) = segment_by_registration(&atlas, &atlas.intensity, &RegistrationConfig::default()).unwrap();
        assert!(dice(&self_seg, &atlas.label.threshold(0.5)).unwrap() >= 0.99);
    }

    #[test]
    fn persistence_round_trip() {
        let (img, lbl) = smooth_phantom(8, [0.0; 3], 7);
        let img = img.with_data(img.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let atlas = Atlas::new(img, lbl.as_kind(VolumeKind::Label).unwrap(), vec!["x".into(), "y".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_atlas(&atlas, dir.path(), "abc").unwrap();
        let back = load_atlas(dir.path()).unwrap();
        assert!(back == atlas);
    }
}
