//! Command-line front end: argument definitions, `key=value` config files,
//! run manifests and one driver per subcommand.
//!
//! Settings resolve as command-line flag, then config file, then built-in
//! default. Config keys are the long flag names (`lr=0.0002`,
//! `no-atlas=true`). Every command writes one `RunManifest` next to its
//! outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::atlas::{build_atlas, load_atlas, save_atlas, Atlas, AtlasConfig, AtlasError, RegistrationConfig};
use crate::gradcheck::{self, Fault, Scope};
use crate::metrics::table_csv;
use crate::nnet::{load_checkpoint, save_checkpoint, CheckpointError, DecoderGenerator, Generator, NnetError};
use crate::phantom::{Case, Dataset, PhantomError, Split, SubjectConfig, MANIFEST};
use crate::trainer::{
    evaluate_model, evaluate_registration, evaluate_with, run_ablation, Ablation, GenModel, TrainConfig, TrainError,
    Trainer, BASELINE_NAME,
};
use crate::volume::{Volume, VolumeError, VolumeKind};

pub const MANIFEST_NAME: &str = "run_manifest.json";
pub const GENERATOR_FILE: &str = "generator.vnet";
pub const DISCRIMINATOR_FILE: &str = "discriminator.vnet";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    /// A check ran and did not pass (gradcheck).
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_errors!(PhantomError, AtlasError, VolumeError, CheckpointError, NnetError);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "voxatlas", version, about = "Atlas-guided adversarial 3D segmentation on synthetic LV phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded phantom dataset (VVOL pairs plus manifest.csv).
    PhantomGen(PhantomGenArgs),
    /// Build a mean-space atlas from the training split.
    BuildAtlas(BuildAtlasArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Segment one volume, or every case of a dataset directory.
    Segment(SegmentArgs),
    /// Score predicted label volumes against a dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Registration baseline plus the three trained configurations.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Number of subjects (each gives an ED and an ES case) [default: 30]
    #[arg(long)]
    pub n: Option<usize>,
    /// Subjects assigned to the training split [default: 20]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Cubic grid side [default: 32]
    #[arg(long)]
    pub dims: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file with any of the flags above
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct RegistrationFlags {
    /// Affine-only registration steps [default: 100]
    #[arg(long)]
    pub affine_steps: Option<usize>,
    /// Joint affine + FFD steps [default: 200]
    #[arg(long)]
    pub joint_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildAtlasArgs {
    /// Dataset directory (uses its training split)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Register-and-average rounds [default: 3]
    #[arg(long)]
    pub rounds: Option<usize>,
    #[command(flatten)]
    pub registration: RegistrationFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    /// Label consistency weight [default: 0.6, reference setting]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Intensity consistency weight [default: 0.4, reference setting]
    #[arg(long)]
    pub beta: Option<f64>,
    /// SGD learning rate [default: 0.0002, reference setting]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.5, reference setting]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Cases per step [default: 1, reference setting]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 20]
    #[arg(long)]
    pub patience: Option<usize>,
    /// NMI histogram bins [default: 32]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Per-step decay of the generator weight average used for validation and inference [default: 0.99]
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fill the seconds column of metric CSVs (off keeps them byte-stable)
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Atlas directory (not needed with --no-atlas)
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Voxelwise decoder generator instead of the atlas deformation head
    #[arg(long)]
    pub no_atlas: bool,
    /// Drop the label and intensity consistency terms
    #[arg(long)]
    pub no_consistency: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Generator checkpoint (VNET)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Atlas directory; without it the checkpoint is read as a decoder generator
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// A VVOL volume, or a dataset directory (segments its validation split)
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output VVOL, or output directory for a dataset input
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted label VVOLs named like the dataset's label files
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Dataset directory holding manifest.csv and the ground truth
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report CSV path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the CorrEF bootstrap [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Atlas directory; built from the training split when absent
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Atlas rounds when the atlas is built here [default: 3]
    #[arg(long)]
    pub rounds: Option<usize>,
    #[command(flatten)]
    pub registration: RegistrationFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// transform, losses, nnet or all [default: all]
    #[arg(long)]
    pub scope: Option<String>,
    /// Seed of the random inputs [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for gradcheck.txt and the manifest (optional)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt an analytic gradient (test fixture): ffd-jacobian
    #[arg(long, hide = true)]
    pub fault: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses a flat `key=value` file; blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim().replace('_', "-");
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(map)
}

/// Layers flag > file > default and records the effective values.
struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    snapshot: BTreeMap<String, String>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            used: BTreeSet::new(),
            snapshot: BTreeMap::new(),
        })
    }

    fn layered<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let v = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(s)) => Some(s.parse::<T>().map_err(|e| CliError::Usage(format!("config {key}={s}: {e}")))?),
            (None, None) => None,
        };
        if let Some(v) = &v {
            self.snapshot.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.layered(key, flag)?.unwrap_or(default);
        self.snapshot.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.layered(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?.ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = self.layered(key, flag.then_some(true))?.unwrap_or(false);
        self.snapshot.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Rejects config keys no setting consumed.
    fn finish(self) -> Result<BTreeMap<String, String>, CliError> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config keys: {unknown:?}")));
        }
        Ok(self.snapshot)
    }
}

fn resolve_registration(r: &mut Resolver, f: &RegistrationFlags) -> Result<RegistrationConfig, CliError> {
    let d = RegistrationConfig::default();
    Ok(RegistrationConfig {
        affine_steps: r.get("affine-steps", f.affine_steps, d.affine_steps)?,
        joint_steps: r.get("joint-steps", f.joint_steps, d.joint_steps)?,
        ..d
    })
}

fn resolve_train(r: &mut Resolver, f: &TrainFlags) -> Result<(TrainConfig, bool), CliError> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: r.get("lr", f.lr, d.lr)?,
        momentum: r.get("momentum", f.momentum, d.momentum)?,
        batch_size: r.get("batch-size", f.batch_size, d.batch_size)?,
        alpha: r.get("alpha", f.alpha, d.alpha)?,
        beta: r.get("beta", f.beta, d.beta)?,
        epochs: r.get("epochs", f.epochs, d.epochs)?,
        patience: r.get("patience", f.patience, d.patience)?,
        bins: r.get("bins", f.bins, d.bins)?,
        ema_decay: r.get("ema-decay", f.ema_decay, d.ema_decay)?,
        seed: r.get("seed", f.seed, d.seed)?,
        ..d
    };
    let timing = r.switch("timing", f.timing)?;
    cfg.validate()?;
    Ok((cfg, timing))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    /// SHA-256 of every input and output file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: BTreeMap<String, String>, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// What a successful command reports on stdout.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    pub manifest: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::BuildAtlas(a) => build_atlas_cmd(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn read_dataset(dir: &Path, m: &mut RunManifest) -> Result<Dataset, CliError> {
    let ds = Dataset::read(dir)?;
    let manifest = dir.join(MANIFEST);
    m.input(&manifest)?;
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    for row in r.deserialize::<crate::phantom::ManifestRow>() {
        let row = row.map_err(|e| CliError::Data(e.to_string()))?;
        m.input(&dir.join(row.image))?;
        m.input(&dir.join(row.label))?;
    }
    Ok(ds)
}

fn read_atlas(dir: &Path, m: &mut RunManifest) -> Result<Atlas, CliError> {
    let atlas = load_atlas(dir)?;
    for f in [crate::atlas::ATLAS_INTENSITY, crate::atlas::ATLAS_LABEL, crate::atlas::ATLAS_MANIFEST] {
        m.input(&dir.join(f))?;
    }
    Ok(atlas)
}

fn phantom_gen(a: PhantomGenArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let n = r.get("n", a.n, 30)?;
    let n_train = r.get("n-train", a.n_train, 20)?;
    let dims = r.get("dims", a.dims, 32)?;
    let seed = r.get("seed", a.seed, 0)?;
    let out = r.required_path("out", a.out)?;
    let config = r.finish()?;
    if n_train > n || dims < 8 {
        return Err(CliError::Usage("need n-train <= n and dims >= 8".into()));
    }
    let ds = Dataset::generate(n, n_train, seed, &SubjectConfig::for_dims(dims))?;
    let written = ds.write(&out)?;
    let mut m = RunManifest::new("phantom-gen", config, Some(seed));
    for p in &written {
        m.output(p)?;
    }
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = out.join(MANIFEST_NAME);
    m.write(&path)?;
    Ok(Outcome {
        summary: format!("wrote {} cases to {}", ds.cases.len(), out.display()),
        manifest: Some(path),
    })
}

fn training_cases(ds: &Dataset) -> Vec<(String, Volume, Volume)> {
    ds.split(Split::Train).iter().map(|c| (c.id(), c.image.clone(), c.label.clone())).collect()
}

fn build_atlas_cmd(a: BuildAtlasArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.required_path("data", a.data)?;
    let out = r.required_path("out", a.out)?;
    let rounds = r.get("rounds", a.rounds, AtlasConfig::default().rounds)?;
    let registration = resolve_registration(&mut r, &a.registration)?;
    let config = r.finish()?;
    let mut m = RunManifest::new("build-atlas", config, None);
    let ds = read_dataset(&data, &mut m)?;
    let cfg = AtlasConfig { rounds, registration };
    let atlas = build_atlas(&training_cases(&ds), &cfg)?;
    save_atlas(&atlas, &out, &cfg.hash())?;
    for f in [crate::atlas::ATLAS_INTENSITY, crate::atlas::ATLAS_LABEL, crate::atlas::ATLAS_MANIFEST] {
        m.output(&out.join(f))?;
    }
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = out.join(MANIFEST_NAME);
    m.write(&path)?;
    Ok(Outcome {
        summary: format!("atlas from {} cases written to {}", atlas.provenance.len(), out.display()),
        manifest: Some(path),
    })
}

fn dataset_dims(ds: &Dataset) -> Result<[usize; 3], CliError> {
    ds.cases
        .first()
        .map(|c| c.image.dims())
        .ok_or_else(|| CliError::Data("dataset has no cases".into()))
}

fn train(a: TrainArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.required_path("data", a.data)?;
    let out = r.required_path("out", a.out)?;
    let atlas_dir = r.path("atlas", a.atlas)?;
    let (mut cfg, timing) = resolve_train(&mut r, &a.train)?;
    cfg.use_atlas_head = !r.switch("no-atlas", a.no_atlas)?;
    cfg.use_consistency = !r.switch("no-consistency", a.no_consistency)?;
    let config = r.finish()?;
    let mut m = RunManifest::new("train", config, Some(cfg.seed));
    let ds = read_dataset(&data, &mut m)?;
    let atlas = match (&atlas_dir, cfg.use_atlas_head) {
        (Some(dir), true) => Some(read_atlas(dir, &mut m)?),
        (None, true) => return Err(CliError::Usage("--atlas is required unless --no-atlas".into())),
        (_, false) => None,
    };
    let dims = dataset_dims(&ds)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let mut trainer = Trainer::new(cfg, dims)?;
    fs::create_dir_all(&out)?;
    let mut log = Vec::new();
    let fit = trainer.fit(&train, &val, atlas.as_ref(), &mut log)?;
    m.timings_s.insert("train".into(), start.elapsed().as_secs_f64());
    let report = evaluate_model(
        if trainer.cfg.use_atlas_head { "VoxelAtlasGAN" } else { "3D-cGAN" },
        &trainer.gen,
        atlas.as_ref(),
        &val,
        Some(trainer.cfg.seed),
    )?;
    let files = [
        (out.join(TRAIN_LOG), log),
        (out.join(METRICS_FILE), report.to_case_csv(timing).into_bytes()),
    ];
    for (p, bytes) in &files {
        fs::write(p, bytes)?;
        m.output(p)?;
    }
    for (name, net) in [(GENERATOR_FILE, &trainer.gen as &dyn crate::nnet::Network), (DISCRIMINATOR_FILE, &trainer.disc)] {
        let p = out.join(name);
        save_checkpoint(net, &p)?;
        m.output(&p)?;
    }
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = out.join(MANIFEST_NAME);
    m.write(&path)?;
    Ok(Outcome {
        summary: format!(
            "best epoch {} of {}, validation Dice {:.4}{}",
            fit.best_epoch,
            fit.history.len(),
            fit.best_val_dice,
            if fit.stopped_early { " (stopped early)" } else { "" }
        ),
        manifest: Some(path),
    })
}

/// Loads a generator checkpoint for inputs of `dims`: the atlas variant when
/// an atlas is given, the voxelwise decoder otherwise.
pub fn load_generator(path: &Path, dims: [usize; 3], with_atlas: bool) -> Result<GenModel, CliError> {
    // Weights are overwritten by the checkpoint; the seed only shapes the
    // throwaway initial values.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = if with_atlas {
        GenModel::Atlas(Generator::new(dims, &mut rng)?)
    } else {
        GenModel::Decoder(DecoderGenerator::new(dims, &mut rng))
    };
    load_checkpoint(&mut g, path)?;
    Ok(g)
}

fn segment(a: SegmentArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let model = r.required_path("model", a.model)?;
    let input = r.required_path("in", a.input)?;
    let out = r.required_path("out", a.out)?;
    let atlas_dir = r.path("atlas", a.atlas)?;
    let config = r.finish()?;
    let mut m = RunManifest::new("segment", config, None);
    m.input(&model)?;
    let atlas = atlas_dir.as_deref().map(|d| read_atlas(d, &mut m)).transpose()?;

    if input.is_dir() {
        let ds = read_dataset(&input, &mut m)?;
        let val = ds.split(Split::Val);
        let gen = load_generator(&model, dataset_dims(&ds)?, atlas.is_some())?;
        fs::create_dir_all(&out)?;
        let report = evaluate_with("segment", &val, None, |c: &Case| {
            let s = gen.segment(atlas.as_ref(), &c.image)?;
            let p = out.join(format!("{}_lbl.vvol", c.id()));
            s.label.as_kind(VolumeKind::Label)?.write_vvol(&p)?;
            Ok((s.label, s.seconds))
        })?;
        for c in &val {
            m.output(&out.join(format!("{}_lbl.vvol", c.id())))?;
        }
        let csv = out.join(METRICS_FILE);
        fs::write(&csv, report.to_case_csv(true))?;
        m.output(&csv)?;
        let (mean_s, _) = report.seconds();
        m.timings_s.insert("mean_per_volume".into(), mean_s);
        m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
        let path = out.join(MANIFEST_NAME);
        m.write(&path)?;
        return Ok(Outcome {
            summary: format!("segmented {} volumes, {:.4} s each", val.len(), mean_s),
            manifest: Some(path),
        });
    }

    let x = Volume::read_vvol(&input)?;
    m.input(&input)?;
    let gen = load_generator(&model, x.dims(), atlas.is_some())?;
    let s = gen.segment(atlas.as_ref(), &x)?;
    s.label.as_kind(VolumeKind::Label)?.write_vvol(&out)?;
    m.output(&out)?;
    m.timings_s.insert("inference".into(), s.seconds);
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = sidecar(&out);
    m.write(&path)?;
    Ok(Outcome {
        summary: format!("segmented {} in {:.4} s ({} foreground voxels)", input.display(), s.seconds, s.label.foreground_count()),
        manifest: Some(path),
    })
}

fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let pred = r.required_path("pred", a.pred)?;
    let truth = r.required_path("truth", a.truth)?;
    let out = r.required_path("out", a.out)?;
    let seed = r.get("seed", a.seed, 0)?;
    let config = r.finish()?;
    let mut m = RunManifest::new("evaluate", config, Some(seed));
    let ds = read_dataset(&truth, &mut m)?;
    let cases: Vec<&Case> = ds
        .cases
        .iter()
        .filter(|c| pred.join(format!("{}_lbl.vvol", c.id())).exists())
        .collect();
    if cases.is_empty() {
        return Err(CliError::Data(format!("no predictions in {} match the dataset", pred.display())));
    }
    let report = evaluate_with("evaluate", &cases, Some(seed), |c: &Case| {
        let p = pred.join(format!("{}_lbl.vvol", c.id()));
        Ok((Volume::read_vvol(&p)?, 0.0))
    })?;
    for c in &cases {
        m.input(&pred.join(format!("{}_lbl.vvol", c.id())))?;
    }
    fs::write(&out, report.to_case_csv(false))?;
    m.output(&out)?;
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = sidecar(&out);
    m.write(&path)?;
    let (d, sd) = report.dice();
    Ok(Outcome {
        summary: format!("{} cases, Dice {d:.4}±{sd:.4}", cases.len()),
        manifest: Some(path),
    })
}

fn ablate(a: AblateArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.required_path("data", a.data)?;
    let out = r.required_path("out", a.out)?;
    let atlas_dir = r.path("atlas", a.atlas)?;
    let (cfg, timing) = resolve_train(&mut r, &a.train)?;
    let rounds = r.get("rounds", a.rounds, AtlasConfig::default().rounds)?;
    let registration = resolve_registration(&mut r, &a.registration)?;
    let config = r.finish()?;
    let mut m = RunManifest::new("ablate", config, Some(cfg.seed));
    let ds = read_dataset(&data, &mut m)?;
    fs::create_dir_all(&out)?;
    let atlas = match &atlas_dir {
        Some(dir) => read_atlas(dir, &mut m)?,
        None => {
            let acfg = AtlasConfig {
                rounds,
                registration: registration.clone(),
            };
            let atlas = build_atlas(&training_cases(&ds), &acfg)?;
            let dir = out.join("atlas");
            save_atlas(&atlas, &dir, &acfg.hash())?;
            for f in [crate::atlas::ATLAS_INTENSITY, crate::atlas::ATLAS_LABEL, crate::atlas::ATLAS_MANIFEST] {
                m.output(&dir.join(f))?;
            }
            m.timings_s.insert("atlas".into(), start.elapsed().as_secs_f64());
            atlas
        }
    };
    let val = ds.split(Split::Val);
    let t0 = Instant::now();
    let baseline = evaluate_registration(&atlas, &val, &registration, Some(cfg.seed))?;
    m.timings_s.insert(BASELINE_NAME.into(), t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let runs = run_ablation(&ds, &atlas, &cfg)?;
    m.timings_s.insert("training".into(), t0.elapsed().as_secs_f64());

    // Table order: baseline, then the trained configurations from the
    // weakest variant to the full model.
    let mut reports = vec![baseline];
    for want in [Ablation::NoAtlas, Ablation::NoConsistency, Ablation::Full] {
        let run = runs.iter().find(|r| r.ablation == want).expect("every configuration ran");
        reports.push(run.report.clone());
        let stem = run.ablation.name();
        let files = [
            (out.join(format!("{stem}_{TRAIN_LOG}")), run.log.clone()),
            (out.join(format!("{stem}_{METRICS_FILE}")), run.report.to_case_csv(timing).into_bytes()),
        ];
        for (p, bytes) in &files {
            fs::write(p, bytes)?;
            m.output(p)?;
        }
        let p = out.join(format!("{stem}_{GENERATOR_FILE}"));
        save_checkpoint(&run.trainer.gen, &p)?;
        m.output(&p)?;
    }
    let b = out.join(format!("{BASELINE_NAME}_{METRICS_FILE}"));
    fs::write(&b, reports[0].to_case_csv(timing))?;
    m.output(&b)?;
    let table = table_csv(&reports, timing);
    let tp = out.join(TABLE_FILE);
    fs::write(&tp, &table)?;
    m.output(&tp)?;
    m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    let path = out.join(MANIFEST_NAME);
    m.write(&path)?;
    Ok(Outcome {
        summary: table,
        manifest: Some(path),
    })
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new(a.config.as_deref())?;
    let scope_s = r.get("scope", a.scope, "all".to_string())?;
    let seed = r.get("seed", a.seed, 0)?;
    let out = r.path("out", a.out)?;
    let fault = match r.layered("fault", a.fault)?.as_deref() {
        None => None,
        Some("ffd-jacobian") => Some(Fault::FfdJacobian),
        Some(other) => return Err(CliError::Usage(format!("unknown fault {other:?}"))),
    };
    let config = r.finish()?;
    let scope = Scope::from_str(&scope_s).map_err(CliError::Usage)?;
    let report = gradcheck::run_with_fault(scope, seed, fault);
    let text = report.to_string();
    let mut manifest = None;
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        let mut m = RunManifest::new("gradcheck", config, Some(seed));
        let p = dir.join("gradcheck.txt");
        fs::write(&p, &text)?;
        m.output(&p)?;
        m.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
        let path = dir.join(MANIFEST_NAME);
        m.write(&path)?;
        manifest = Some(path);
    }
    if report.passed() {
        Ok(Outcome { summary: text, manifest })
    } else {
        let failed = report.failures();
        print!("{text}");
        Err(CliError::Validation(format!("gradient check failed for {}", failed.join(", "))))
    }
}
