//! Loss terms: L1 label consistency, NMI intensity consistency and their
//! weighted combination with the adversarial term.

pub mod nmi;

use thiserror::Error;

use crate::volume::{Volume, VolumeError};

pub use nmi::{kink_free, nmi, NmiResult, DEFAULT_BINS};

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_BETA: f64 = 0.4;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("degenerate entropy: joint entropy {h_joint:e} (constant input)")]
    DegenerateEntropy { h_joint: f64 },
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
}

/// Mean absolute difference and its subgradient with respect to `g`.
///
/// Ties get a zero subgradient.
pub fn l1_label(y: &Volume, g: &Volume) -> Result<(f64, Vec<f64>), LossError> {
    y.same_dims(g)?;
    let n = y.len() as f64;
    let mut sum = 0.0;
    let grad = y
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let d = b - a;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// One step's loss values.
///
/// `l_cgan` is the discriminator's two-term cross-entropy and `l_cgan_g` the
/// term the generator actually minimizes (the non-saturating form during
/// training, identical to `l_cgan` otherwise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cgan: f64,
    pub l_cgan_g: f64,
    pub l_label: f64,
    pub l_intensity: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub const CSV_HEADER: &str = "epoch,step,l_cgan_d,l_cgan_g,l_label,l_intensity,total";

impl LossReport {
    pub fn csv_line(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.l_cgan, self.l_cgan_g, self.l_label, self.l_intensity, self.total
        )
    }
}

/// `total = l_cgan + alpha * l_label + beta * l_intensity`.
pub fn combine(l_cgan: f64, l_label: f64, l_intensity: f64, alpha: f64, beta: f64) -> LossReport {
    LossReport {
        l_cgan,
        l_cgan_g: l_cgan,
        l_label,
        l_intensity,
        total: l_cgan + alpha * l_label + beta * l_intensity,
        alpha,
        beta,
    }
}
