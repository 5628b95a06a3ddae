//! Segmentation metrics: Dice, surface distances, ejection fraction, Pearson
//! correlation and tabular reports.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("mask `{0}` is empty")]
    EmptyMask(&'static str),
    #[error("degenerate variance in `{0}`")]
    DegenerateVariance(&'static str),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// `2|A∩B| / (|A| + |B|)` over voxels `>= 0.5`; two empty masks score 1.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64, MetricsError> {
    a.same_dims(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&u, &v) in a.data().iter().zip(b.data()) {
        let (fu, fv) = (u >= 0.5, v >= 0.5);
        na += fu as usize;
        nb += fv as usize;
        both += (fu && fv) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one 6-connected background neighbor,
/// as points in mm. Voxels on the volume border count as surface.
pub fn surface_points(v: &Volume) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = v.dims();
    let s = v.spacing();
    let fg = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            return false;
        }
        v.get(i as usize, j as usize, k as usize) >= 0.5
    };
    let mut out = Vec::new();
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                if !fg(i, j, k) {
                    continue;
                }
                let boundary = !fg(i - 1, j, k)
                    || !fg(i + 1, j, k)
                    || !fg(i, j - 1, k)
                    || !fg(i, j + 1, k)
                    || !fg(i, j, k - 1)
                    || !fg(i, j, k + 1);
                if boundary {
                    out.push([i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]]);
                }
            }
        }
    }
    out
}

pub(crate) fn dist2(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Static kd-tree over 3D points; nearest-neighbor queries are exact.
pub struct KdTree {
    pts: Vec<[f64; 3]>,
    // Implicit tree: each slice stores its median node at the midpoint.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(mut pts: Vec<[f64; 3]>) -> Self {
        let mut axis = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axis, 0);
        Self { pts, axis }
    }

    fn build(pts: &mut [[f64; 3]], axis: &mut [u8], depth: usize) {
        if pts.is_empty() {
            return;
        }
        // Split on the widest axis of this subset.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ax = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(depth % 3);
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |p, q| p[ax].total_cmp(&q[ax]));
        axis[mid] = ax as u8;
        let (l, r) = pts.split_at_mut(mid);
        let (al, ar) = axis.split_at_mut(mid);
        Self::build(l, al, depth + 1);
        Self::build(&mut r[1..], &mut ar[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Squared distance to the nearest point.
    pub fn nearest_dist2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.pts.len(), q, &mut best);
        best
    }

    fn search(&self, start: usize, end: usize, q: &[f64; 3], best: &mut f64) {
        if start >= end {
            return;
        }
        let mid = start + (end - start) / 2;
        let p = &self.pts[mid];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let ax = self.axis[mid] as usize;
        let delta = q[ax] - p[ax];
        let (near, far) = if delta < 0.0 {
            ((start, mid), (mid + 1, end))
        } else {
            ((mid + 1, end), (start, mid))
        };
        self.search(near.0, near.1, q, best);
        if delta * delta <= *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

/// Symmetric mean and maximum surface distance in mm.
pub fn surface_distances(a: &Volume, b: &Volume) -> Result<(f64, f64), MetricsError> {
    a.same_dims(b)?;
    let sa = surface_points(a);
    let sb = surface_points(b);
    if sa.is_empty() {
        return Err(MetricsError::EmptyMask("a"));
    }
    if sb.is_empty() {
        return Err(MetricsError::EmptyMask("b"));
    }
    let ta = KdTree::new(sa.clone());
    let tb = KdTree::new(sb.clone());
    // Each direction is summed separately so swapping inputs is exact.
    let one_way = |from: &[[f64; 3]], to: &KdTree| {
        from.iter()
            .map(|p| to.nearest_dist2(p).sqrt())
            .fold((0.0, 0.0f64), |(s, m), d| (s + d, m.max(d)))
    };
    let (s_ab, m_ab) = one_way(&sa, &tb);
    let (s_ba, m_ba) = one_way(&sb, &ta);
    Ok(((s_ab + s_ba) / (sa.len() + sb.len()) as f64, m_ab.max(m_ba)))
}

/// `(V_ED - V_ES) / V_ED` from foreground voxel volumes.
pub fn ejection_fraction(ed: &Volume, es: &Volume) -> Result<f64, MetricsError> {
    let ved = ed.foreground_count() as f64 * ed.voxel_volume_mm3();
    if ved == 0.0 {
        return Err(MetricsError::EmptyMask("ed"));
    }
    let ves = es.foreground_count() as f64 * es.voxel_volume_mm3();
    Ok((ved - ves) / ved)
}

pub fn pearson_corr(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(MetricsError::DegenerateVariance("xs"));
    }
    if syy <= 0.0 {
        return Err(MetricsError::DegenerateVariance("ys"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Standard deviation of the Pearson coefficient over `resamples` bootstrap
/// draws of the pairs; degenerate draws are skipped.
pub fn bootstrap_corr_std(xs: &[f64], ys: &[f64], resamples: usize, seed: u64) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut vals = Vec::with_capacity(resamples);
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    for _ in 0..resamples {
        for t in 0..n {
            let i = rng.random_range(0..n);
            bx[t] = xs[i];
            by[t] = ys[i];
        }
        if let Ok(r) = pearson_corr(&bx, &by) {
            vals.push(r);
        }
    }
    (vals.len() >= 2).then(|| mean_std(&vals).1)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Metrics of one predicted frame against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub msd_mm: f64,
    pub hsd_mm: f64,
    pub inference_seconds: f64,
}

impl CaseMetrics {
    pub fn compute(case_id: impl Into<String>, pred: &Volume, truth: &Volume, seconds: f64) -> Result<Self, MetricsError> {
        let d = dice(pred, truth)?;
        let (msd, hsd) = if pred.foreground_count() == 0 && truth.foreground_count() == 0 {
            (0.0, 0.0)
        } else {
            surface_distances(pred, truth)?
        };
        Ok(Self {
            case_id: case_id.into(),
            dice: d,
            msd_mm: msd,
            hsd_mm: hsd,
            inference_seconds: seconds,
        })
    }
}

/// Per-subject EF pair (predicted from segmentations, reference from truth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfPair {
    pub predicted: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub cases: Vec<CaseMetrics>,
    pub ef: Vec<EfPair>,
    pub corr_ef: Option<f64>,
    pub corr_ef_std: Option<f64>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

impl MetricReport {
    pub fn new(method: impl Into<String>, cases: Vec<CaseMetrics>, ef: Vec<EfPair>, bootstrap_seed: Option<u64>) -> Self {
        let p: Vec<f64> = ef.iter().map(|e| e.predicted).collect();
        let r: Vec<f64> = ef.iter().map(|e| e.reference).collect();
        let corr_ef = pearson_corr(&p, &r).ok();
        let corr_ef_std = bootstrap_seed.and_then(|s| bootstrap_corr_std(&p, &r, BOOTSTRAP_RESAMPLES, s));
        Self {
            method: method.into(),
            cases,
            ef,
            corr_ef,
            corr_ef_std,
        }
    }

    fn column(&self, f: impl Fn(&CaseMetrics) -> f64) -> (f64, f64) {
        mean_std(&self.cases.iter().map(f).collect::<Vec<_>>())
    }

    pub fn dice(&self) -> (f64, f64) {
        self.column(|c| c.dice)
    }

    pub fn msd(&self) -> (f64, f64) {
        self.column(|c| c.msd_mm)
    }

    pub fn hsd(&self) -> (f64, f64) {
        self.column(|c| c.hsd_mm)
    }

    pub fn seconds(&self) -> (f64, f64) {
        self.column(|c| c.inference_seconds)
    }

    /// Per-case rows followed by a mean±std footer.
    pub fn to_case_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("case,D,MSD_mm,HSD_mm");
        if with_timing {
            s.push_str(",seconds");
        }
        s.push('\n');
        for c in &self.cases {
            let _ = write!(s, "{},{:.6},{:.6},{:.6}", c.case_id, c.dice, c.msd_mm, c.hsd_mm);
            if with_timing {
                let _ = write!(s, ",{:.6}", c.inference_seconds);
            }
            s.push('\n');
        }
        let pm = |(m, sd): (f64, f64)| format!("{m:.6}±{sd:.6}");
        let _ = write!(s, "mean±std,{},{},{}", pm(self.dice()), pm(self.msd()), pm(self.hsd()));
        if with_timing {
            let _ = write!(s, ",{}", pm(self.seconds()));
        }
        s.push('\n');
        let _ = writeln!(s, "CorrEF,{}", fmt_corr(self.corr_ef, self.corr_ef_std));
        s
    }
}

fn fmt_corr(c: Option<f64>, sd: Option<f64>) -> String {
    match (c, sd) {
        (Some(c), Some(sd)) => format!("{c:.6}±{sd:.6}"),
        (Some(c), None) => format!("{c:.6}"),
        _ => "nan".into(),
    }
}

pub const TABLE_HEADER: &str = "method,D,MSD_mm,HSD_mm,CorrEF,seconds_per_volume";

/// One row per method: Dice, MSD, HSD, CorrEF and seconds per volume.
/// Timing is left out when `with_timing` is false so the file is byte-stable.
pub fn table_csv(reports: &[MetricReport], with_timing: bool) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in reports {
        let pm = |(m, sd): (f64, f64)| format!("{m:.4}±{sd:.4}");
        let secs = if with_timing {
            format!("{:.6}", r.seconds().0)
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            pm(r.dice()),
            pm(r.msd()),
            pm(r.hsd()),
            fmt_corr(r.corr_ef, r.corr_ef_std),
            secs
        );
    }
    s
}
