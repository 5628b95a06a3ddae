//! Alternating adversarial training of a generator against the
//! discriminator, inference, and the ablation runs.
//!
//! Each step first updates the discriminator on one real and one generated
//! pair, then updates the generator on the non-saturating adversarial term
//! plus the weighted label and intensity consistency terms.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::atlas::{segment_by_registration, Atlas, AtlasError, RegistrationConfig};
use crate::losses::{l1_label, nmi, LossError, LossReport, CSV_HEADER, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_BINS};
use crate::metrics::{dice, ejection_fraction, CaseMetrics, EfPair, MetricReport, MetricsError};
use crate::nnet::{
    sgd_network, DecoderGenerator, DecoderTrace, DiscTrace, Discriminator, GenTrace, Generator, LayerKind, Network,
    NnetError, Param,
};
use crate::phantom::{Case, Dataset, Frame, Split};
use crate::transform::{warp_with, ParamVector, Sampling};
use crate::volume::{Volume, VolumeError, VolumeKind};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-7;
pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.5;
pub const DEFAULT_BATCH: usize = 1;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_PATIENCE: usize = 20;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the atlas-deforming generator needs an atlas")]
    MissingAtlas,
    #[error("no {0} cases")]
    NoCases(&'static str),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Atlas-deforming generator; otherwise a voxelwise decoder.
    pub use_atlas_head: bool,
    /// Label and intensity consistency terms in the generator objective.
    pub use_consistency: bool,
    /// Epochs without a validation Dice improvement before stopping.
    pub patience: usize,
    pub bins: usize,
    /// Per-step decay of the generator weight average used for validation
    /// and inference; 0 uses the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            use_atlas_head: true,
            use_consistency: true,
            patience: DEFAULT_PATIENCE,
            bins: DEFAULT_BINS,
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be finite and non-negative");
        }
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    /// Effective consistency weights: zero when consistency is off, and no
    /// intensity term without an atlas.
    pub fn weights(&self) -> (f64, f64) {
        match (self.use_consistency, self.use_atlas_head) {
            (false, _) => (0.0, 0.0),
            (true, true) => (self.alpha, self.beta),
            (true, false) => (self.alpha, 0.0),
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// The three trained configurations of the ablation, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoConsistency,
    NoAtlas,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoConsistency, Ablation::NoAtlas];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "VoxelAtlasGAN",
            Ablation::NoConsistency => "VoxelGANWA",
            Ablation::NoAtlas => "3D-cGAN",
        }
    }

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoConsistency => {
                c.alpha = 0.0;
                c.beta = 0.0;
                c.use_consistency = false;
            }
            Ablation::NoAtlas => {
                c.alpha = 0.0;
                c.beta = 0.0;
                c.use_atlas_head = false;
                c.use_consistency = false;
            }
        }
        c
    }
}

pub const BASELINE_NAME: &str = "3D-Atlas";

/// Either generator variant.
#[derive(Debug, Clone, PartialEq)]
pub enum GenModel {
    Atlas(Generator),
    Decoder(DecoderGenerator),
}

enum GenOut {
    Atlas(GenTrace),
    Decoder(DecoderTrace),
}

impl GenOut {
    fn label(&self) -> &Volume {
        match self {
            GenOut::Atlas(t) => &t.g_label,
            GenOut::Decoder(t) => &t.g_label,
        }
    }
}

impl Network for GenModel {
    fn params(&self) -> Vec<(LayerKind, &Param)> {
        match self {
            GenModel::Atlas(g) => g.params(),
            GenModel::Decoder(g) => g.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            GenModel::Atlas(g) => g.params_mut(),
            GenModel::Decoder(g) => g.params_mut(),
        }
    }
}

/// Output of one inference pass.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub label: Volume,
    /// Deformation parameters (atlas-deforming generator only).
    pub params: Option<ParamVector>,
    pub seconds: f64,
}

/// One generator forward pass plus one warp of the atlas label, thresholded
/// at 0.5.
pub fn segment(g: &Generator, atlas: &Atlas, x: &Volume) -> Result<Segmentation, TrainError> {
    let start = Instant::now();
    if x.dims() != g.input_dims || atlas.dims() != g.input_dims {
        return Err(NnetError::Shape(format!("generator {:?}, input {:?}, atlas {:?}", g.input_dims, x.dims(), atlas.dims())).into());
    }
    let (_, _, _, params) = g.predict_params(x, &atlas.intensity)?;
    let label = warp_with(&params, &atlas.label, x.dims(), Sampling::Nearest).threshold(0.5);
    Ok(Segmentation {
        label,
        params: Some(params),
        seconds: start.elapsed().as_secs_f64(),
    })
}

impl GenModel {
    pub fn new(cfg: &TrainConfig, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        Ok(if cfg.use_atlas_head {
            GenModel::Atlas(Generator::new(dims, rng)?)
        } else {
            GenModel::Decoder(DecoderGenerator::new(dims, rng))
        })
    }

    pub fn input_dims(&self) -> [usize; 3] {
        match self {
            GenModel::Atlas(g) => g.input_dims,
            GenModel::Decoder(g) => g.input_dims,
        }
    }

    fn forward(&self, x: &Volume, atlas: Option<&Atlas>) -> Result<GenOut, TrainError> {
        Ok(match self {
            GenModel::Atlas(g) => GenOut::Atlas(g.forward(x, atlas.ok_or(TrainError::MissingAtlas)?)?),
            GenModel::Decoder(g) => GenOut::Decoder(g.forward(x)?),
        })
    }

    /// Binary segmentation of `x`; the decoder thresholds its own output.
    pub fn segment(&self, atlas: Option<&Atlas>, x: &Volume) -> Result<Segmentation, TrainError> {
        match self {
            GenModel::Atlas(g) => segment(g, atlas.ok_or(TrainError::MissingAtlas)?, x),
            GenModel::Decoder(g) => {
                let start = Instant::now();
                let label = g.forward(x)?.g_label.threshold(0.5);
                Ok(Segmentation {
                    label,
                    params: None,
                    seconds: start.elapsed().as_secs_f64(),
                })
            }
        }
    }
}

/// How often the consistency losses were evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounters {
    pub nmi: usize,
    pub l1: usize,
}

fn finite(term: &'static str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite { term, value })
    }
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: GenModel,
    /// Exponential moving average of `gen`, updated after every G-step.
    pub ema: GenModel,
    pub disc: Discriminator,
    pub counters: CallCounters,
    rng: ChaCha8Rng,
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossReport,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
}

impl Trainer {
    /// Weights are drawn from streams of `cfg.seed`: stream 1 for the
    /// generator, 2 for the discriminator, 3 for case shuffling. The output
    /// layers of the discriminator and of the atlas-deforming generator start
    /// at zero, so training begins from the undeformed atlas and a neutral
    /// discriminator.
    pub fn new(cfg: TrainConfig, dims: [usize; 3]) -> Result<Self, TrainError> {
        cfg.validate()?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        let mut gen = GenModel::new(&cfg, dims, &mut stream(1))?;
        if let GenModel::Atlas(g) = &mut gen {
            g.zero_head();
        }
        let mut disc = Discriminator::new(dims, &mut stream(2));
        disc.zero_head();
        Ok(Self {
            rng: stream(3),
            cfg,
            ema: gen.clone(),
            gen,
            disc,
            counters: CallCounters::default(),
        })
    }

    /// One D-step followed by one G-step on a single case.
    pub fn train_step(&mut self, x: &Volume, y: &Volume, atlas: Option<&Atlas>) -> Result<LossReport, TrainError> {
        self.train_batch(&[(x, y)], atlas)
    }

    /// One D-step and one G-step with gradients averaged over `batch`.
    pub fn train_batch(&mut self, batch: &[(&Volume, &Volume)], atlas: Option<&Atlas>) -> Result<LossReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::NoCases("batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let (alpha, beta) = self.cfg.weights();
        let outs: Vec<GenOut> = batch.iter().map(|(x, _)| self.gen.forward(x, atlas)).collect::<Result<_, _>>()?;

        // Discriminator: real pairs towards class 0, generated towards class 1.
        self.disc.zero_grad();
        let mut l_d = 0.0;
        for ((x, y), out) in batch.iter().zip(&outs) {
            let real = self.disc.forward(x, y)?;
            let fake = self.disc.forward(x, out.label())?;
            l_d += neg_log(real.probs[0]) + neg_log(fake.probs[1]);
            self.disc.backward(&real, [(real.probs[0] - 1.0) * scale, real.probs[1] * scale]);
            self.disc.backward(&fake, [fake.probs[0] * scale, (fake.probs[1] - 1.0) * scale]);
        }
        let l_d = finite("discriminator loss", l_d * scale)?;
        sgd_network(&mut self.disc, self.cfg.lr, self.cfg.momentum);

        // Generator against the updated discriminator.
        self.gen.zero_grad();
        let (mut l_g, mut l_label, mut l_int) = (0.0, 0.0, 0.0);
        for ((x, y), out) in batch.iter().zip(&outs) {
            let g_label = out.label();
            let dt: DiscTrace = self.disc.forward(x, g_label)?;
            l_g += neg_log(dt.probs[0]);
            let mut d_label = self.disc.backward(&dt, [(dt.probs[0] - 1.0) * scale, dt.probs[1] * scale]);
            let mut d_int = Vec::new();
            if self.cfg.use_consistency {
                self.counters.l1 += 1;
                let (l1, g1) = l1_label(y, g_label)?;
                l_label += finite("label loss", l1)?;
                if alpha != 0.0 {
                    d_label.iter_mut().zip(&g1).for_each(|(d, g)| *d += alpha * scale * g);
                }
                if let GenOut::Atlas(t) = out {
                    self.counters.nmi += 1;
                    let n = nmi(x, &t.g_intensity, self.cfg.bins)?;
                    l_int += finite("intensity loss", n.loss)?;
                    if beta != 0.0 {
                        d_int = n.grad.iter().map(|g| beta * scale * g).collect();
                    }
                }
            }
            match (&mut self.gen, out) {
                (GenModel::Atlas(g), GenOut::Atlas(t)) => {
                    g.backward(t, atlas.ok_or(TrainError::MissingAtlas)?, &d_label, &d_int);
                }
                (GenModel::Decoder(g), GenOut::Decoder(t)) => g.backward(t, &d_label),
                _ => unreachable!("trace matches its generator"),
            }
        }
        // The G-step's discriminator pass leaves gradients on D; drop them.
        self.disc.zero_grad();
        let l_g = finite("generator adversarial loss", l_g * scale)?;
        sgd_network(&mut self.gen, self.cfg.lr, self.cfg.momentum);
        self.update_ema();

        let l_label = l_label * scale;
        let l_int = l_int * scale;
        Ok(LossReport {
            l_cgan: l_d,
            l_cgan_g: l_g,
            l_label,
            l_intensity: l_int,
            total: finite("total loss", l_d + alpha * l_label + beta * l_int)?,
            alpha,
            beta,
        })
    }

    fn update_ema(&mut self) {
        let d = self.cfg.ema_decay;
        for (avg, (_, p)) in self.ema.params_mut().into_iter().zip(self.gen.params()) {
            avg.data.iter_mut().zip(&p.data).for_each(|(a, &w)| *a = d * *a + (1.0 - d) * w);
        }
    }

    /// Mean validation Dice of the averaged generator, cases evaluated
    /// concurrently.
    pub fn validate(&self, val: &[&Case], atlas: Option<&Atlas>) -> Result<f64, TrainError> {
        if val.is_empty() {
            return Err(TrainError::NoCases("validation"));
        }
        let ds: Vec<f64> = val
            .par_iter()
            .map(|c| -> Result<f64, TrainError> { Ok(dice(&self.ema.segment(atlas, &c.image)?.label, &c.label)?) })
            .collect::<Result<_, _>>()?;
        Ok(ds.iter().sum::<f64>() / ds.len() as f64)
    }

    /// Trains for up to `cfg.epochs`, keeping the averaged generator with the
    /// best validation Dice; afterwards both `gen` and `ema` hold it. One CSV
    /// line per step goes to `log`.
    pub fn fit(&mut self, train: &[&Case], val: &[&Case], atlas: Option<&Atlas>, log: &mut dyn Write) -> Result<FitSummary, TrainError> {
        if train.is_empty() {
            return Err(TrainError::NoCases("training"));
        }
        writeln!(log, "{CSV_HEADER}")?;
        let mut best = (self.ema.clone(), self.disc.clone());
        let mut best_dice = self.validate(val, atlas)?;
        let mut best_epoch = 0;
        let mut history = Vec::new();
        let mut stopped_early = false;
        let mut step = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut sums = [0.0; 5];
            let mut n = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<(&Volume, &Volume)> = chunk.iter().map(|&i| (&train[i].image, &train[i].label)).collect();
                let r = self.train_batch(&batch, atlas)?;
                step += 1;
                writeln!(log, "{}", r.csv_line(epoch, step))?;
                for (s, v) in sums.iter_mut().zip([r.l_cgan, r.l_cgan_g, r.l_label, r.l_intensity, r.total]) {
                    *s += v;
                }
                n += 1.0;
            }
            let (alpha, beta) = self.cfg.weights();
            let mean = LossReport {
                l_cgan: sums[0] / n,
                l_cgan_g: sums[1] / n,
                l_label: sums[2] / n,
                l_intensity: sums[3] / n,
                total: sums[4] / n,
                alpha,
                beta,
            };
            let val_dice = self.validate(val, atlas)?;
            history.push(EpochStats { epoch, mean, val_dice });
            if val_dice > best_dice {
                best_dice = val_dice;
                best_epoch = epoch;
                best = (self.ema.clone(), self.disc.clone());
            } else if epoch - best_epoch >= self.cfg.patience {
                stopped_early = true;
                break;
            }
        }
        (self.ema, self.disc) = best;
        self.gen = self.ema.clone();
        Ok(FitSummary {
            history,
            best_epoch,
            best_val_dice: best_dice,
            stopped_early,
        })
    }
}

/// Segments every case and collects per-case metrics plus per-subject EF
/// pairs (subjects with both frames present). An empty predicted ED mask
/// gives a predicted EF of zero.
pub fn evaluate_with(
    method: &str,
    cases: &[&Case],
    bootstrap_seed: Option<u64>,
    mut seg: impl FnMut(&Case) -> Result<(Volume, f64), TrainError>,
) -> Result<MetricReport, TrainError> {
    let mut metrics = Vec::with_capacity(cases.len());
    let mut frames: BTreeMap<usize, [Option<(Volume, Volume)>; 2]> = BTreeMap::new();
    for c in cases {
        let (pred, secs) = seg(c)?;
        metrics.push(CaseMetrics::compute(c.id(), &pred, &c.label, secs)?);
        let slot = match c.frame {
            Frame::Ed => 0,
            Frame::Es => 1,
        };
        frames.entry(c.subject).or_default()[slot] = Some((pred, c.label.clone()));
    }
    let mut ef = Vec::new();
    for pair in frames.values() {
        if let [Some((ped, ted)), Some((pes, tes))] = pair {
            let predicted = match ejection_fraction(ped, pes) {
                Ok(v) => v,
                Err(MetricsError::EmptyMask(_)) => 0.0,
                Err(e) => return Err(e.into()),
            };
            ef.push(EfPair {
                predicted,
                reference: ejection_fraction(ted, tes)?,
            });
        }
    }
    Ok(MetricReport::new(method, metrics, ef, bootstrap_seed))
}

pub fn evaluate_model(method: &str, gen: &GenModel, atlas: Option<&Atlas>, cases: &[&Case], bootstrap_seed: Option<u64>) -> Result<MetricReport, TrainError> {
    evaluate_with(method, cases, bootstrap_seed, |c| {
        let s = gen.segment(atlas, &c.image)?;
        Ok((s.label, s.seconds))
    })
}

pub fn evaluate_registration(atlas: &Atlas, cases: &[&Case], cfg: &RegistrationConfig, bootstrap_seed: Option<u64>) -> Result<MetricReport, TrainError> {
    evaluate_with(BASELINE_NAME, cases, bootstrap_seed, |c| {
        let start = Instant::now();
        let (label, _) = segment_by_registration(atlas, &c.image, cfg)?;
        Ok((label.as_kind(VolumeKind::Label)?, start.elapsed().as_secs_f64()))
    })
}

/// A trained configuration and its validation report.
pub struct AblationRun {
    pub ablation: Ablation,
    pub trainer: Trainer,
    pub summary: FitSummary,
    pub report: MetricReport,
    pub log: Vec<u8>,
}

/// Trains and evaluates one configuration on the dataset's splits.
pub fn train_and_evaluate(ablation: Ablation, dataset: &Dataset, atlas: &Atlas, base: &TrainConfig) -> Result<AblationRun, TrainError> {
    let cfg = ablation.config(base);
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let dims = train.first().ok_or(TrainError::NoCases("training"))?.image.dims();
    let mut trainer = Trainer::new(cfg, dims)?;
    let atlas = trainer.cfg.use_atlas_head.then_some(atlas);
    let mut log = Vec::new();
    let summary = trainer.fit(&train, &val, atlas, &mut log)?;
    let report = evaluate_model(ablation.name(), &trainer.gen, atlas, &val, Some(trainer.cfg.seed))?;
    Ok(AblationRun {
        ablation,
        trainer,
        summary,
        report,
        log,
    })
}

/// Full, no-consistency and no-atlas configurations, in that order.
pub fn run_ablation(dataset: &Dataset, atlas: &Atlas, base: &TrainConfig) -> Result<Vec<AblationRun>, TrainError> {
    Ablation::ALL.iter().map(|&a| train_and_evaluate(a, dataset, atlas, base)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::SubjectConfig;

    fn tiny() -> (Dataset, Atlas) {
        let ds = Dataset::generate(3, 2, 5, &SubjectConfig::for_dims(16)).unwrap();
        let tr = ds.split(Split::Train);
        let atlas = Atlas::new(tr[0].image.clone(), tr[0].label.clone(), vec![tr[0].id()]).unwrap();
        (ds, atlas)
    }

    fn weights(t: &Trainer) -> Vec<f64> {
        t.gen.params().iter().chain(t.disc.params().iter()).flat_map(|(_, p)| p.data.clone()).collect()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.batch_size, c.alpha, c.beta), (0.0002, 0.5, 1, 0.6, 0.4));
        assert!(c.use_atlas_head && c.use_consistency);
    }

    #[test]
    fn zero_lr_keeps_weights_and_reports_losses() {
        let (ds, atlas) = tiny();
        let c = &ds.split(Split::Train)[1];
        let mut t = Trainer::new(TrainConfig { lr: 0.0, ..Default::default() }, [16; 3]).unwrap();
        let before = weights(&t);
        let r = t.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
        assert_eq!(weights(&t), before);
        assert!(r.l_cgan > 0.0 && r.l_cgan_g > 0.0 && r.l_label > 0.0 && r.l_intensity < -1.0);
        assert!((r.total - (r.l_cgan + r.alpha * r.l_label + r.beta * r.l_intensity)).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_hits_the_clamp() {
        let (ds, atlas) = tiny();
        let c = &ds.split(Split::Train)[1];
        let mut t = Trainer::new(TrainConfig { lr: 0.0, ..Default::default() }, [16; 3]).unwrap();
        // A huge bias makes D output "real" for every input: the fake term
        // saturates at the floor.
        t.disc.head.bias.data = vec![1e3, -1e3];
        let r = t.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
        assert!((r.l_cgan - (-PROB_FLOOR.ln())).abs() < 1e-9, "{}", r.l_cgan);
        t.disc.head.bias.data = vec![-1e3, 1e3];
        t.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
        let g_norm: f64 = t.gen.params().iter().flat_map(|(_, p)| p.grad.iter()).map(|g| g * g).sum();
        assert!(g_norm > 0.0);
        let r = t.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
        assert!(r.l_cgan_g <= -PROB_FLOOR.ln() + 1e-9);
    }

    #[test]
    fn consistency_off_never_evaluates_the_losses() {
        let (ds, atlas) = tiny();
        let c = &ds.split(Split::Train)[1];
        let mut t = Trainer::new(Ablation::NoConsistency.config(&TrainConfig::default()), [16; 3]).unwrap();
        for _ in 0..3 {
            let r = t.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
            assert_eq!(r.total, r.l_cgan);
        }
        assert_eq!(t.counters, CallCounters::default());
        let mut full = Trainer::new(TrainConfig::default(), [16; 3]).unwrap();
        full.train_step(&c.image, &c.label, Some(&atlas)).unwrap();
        assert_eq!(full.counters, CallCounters { nmi: 1, l1: 1 });
    }

    #[test]
    fn zero_head_segments_to_the_resampled_atlas() {
        let (ds, atlas) = tiny();
        let mut g = Generator::new([16; 3], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        g.zero_head();
        let x = &ds.split(Split::Val)[0].image;
        let s = segment(&g, &atlas, x).unwrap();
        assert!(s.label == atlas.label.threshold(0.5));
        let again = segment(&g, &atlas, x).unwrap();
        assert!(again.label == s.label && again.params == s.params);
    }

    #[test]
    fn missing_atlas_and_bad_config_are_errors() {
        let (ds, _) = tiny();
        let c = &ds.split(Split::Train)[0];
        let mut t = Trainer::new(TrainConfig::default(), [16; 3]).unwrap();
        assert!(matches!(t.train_step(&c.image, &c.label, None), Err(TrainError::MissingAtlas)));
        assert!(Trainer::new(TrainConfig { batch_size: 0, ..Default::default() }, [16; 3]).is_err());
        assert!(Trainer::new(TrainConfig { momentum: 1.0, ..Default::default() }, [16; 3]).is_err());
    }

    #[test]
    fn decoder_variant_trains_without_atlas() {
        let (ds, _) = tiny();
        let c = &ds.split(Split::Train)[0];
        let mut t = Trainer::new(Ablation::NoAtlas.config(&TrainConfig::default()), [16; 3]).unwrap();
        let r = t.train_step(&c.image, &c.label, None).unwrap();
        assert_eq!((r.alpha, r.beta, r.l_label, r.l_intensity), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(t.counters, CallCounters { nmi: 0, l1: 0 });
        assert!(r.l_cgan.is_finite() && r.l_cgan_g.is_finite());
    }

    #[test]
    fn fit_is_deterministic() {
        let (ds, atlas) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::new(cfg.clone(), [16; 3]).unwrap();
            let mut log = Vec::new();
            let s = t.fit(&ds.split(Split::Train), &ds.split(Split::Val), Some(&atlas), &mut log).unwrap();
            (weights(&t), log, s)
        };
        let (wa, la, sa) = run();
        let (wb, lb, sb) = run();
        assert!(wa == wb && la == lb && sa == sb);
        let text = String::from_utf8(la).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * ds.split(Split::Train).len());
        assert!(text.starts_with(CSV_HEADER));
    }
}
