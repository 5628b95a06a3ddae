//! Reduced-size ablation: registration baseline plus the three trained
//! configurations, printed as a comparison table CSV.

use voxatlas::atlas::{build_atlas, AtlasConfig, RegistrationConfig};
use voxatlas::metrics::table_csv;
use voxatlas::phantom::{Dataset, Split, SubjectConfig};
use voxatlas::trainer::{evaluate_registration, run_ablation, Ablation, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = Dataset::generate(8, 6, 21, &SubjectConfig::for_dims(16))?;
    let cases: Vec<_> = ds.split(Split::Train).iter().map(|c| (c.id(), c.image.clone(), c.label.clone())).collect();
    let reg = RegistrationConfig {
        affine_steps: 30,
        joint_steps: 30,
        ..Default::default()
    };
    let atlas = build_atlas(&cases, &AtlasConfig { rounds: 1, registration: reg.clone() })?;
    let base = TrainConfig {
        epochs: 4,
        seed: 2,
        ..Default::default()
    };
    let mut reports = vec![evaluate_registration(&atlas, &ds.split(Split::Val), &reg, Some(2))?];
    let runs = run_ablation(&ds, &atlas, &base)?;
    for want in [Ablation::NoAtlas, Ablation::NoConsistency, Ablation::Full] {
        reports.extend(runs.iter().filter(|r| r.ablation == want).map(|r| r.report.clone()));
    }
    print!("{}", table_csv(&reports, true));
    Ok(())
}
