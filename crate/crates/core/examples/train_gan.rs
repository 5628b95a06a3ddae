//! Trains the atlas-deforming generator for a few epochs on 16^3 phantoms
//! and prints the per-epoch losses.

use voxatlas::atlas::Atlas;
use voxatlas::phantom::{Dataset, Split, SubjectConfig};
use voxatlas::trainer::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = Dataset::generate(8, 6, 3, &SubjectConfig::for_dims(16))?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    // A plain voxelwise mean stands in for a registered atlas here.
    let n = train.len() as f64;
    let mean = |f: &dyn Fn(&voxatlas::phantom::Case) -> &voxatlas::volume::Volume| {
        let mut acc = vec![0.0; f(train[0]).len()];
        for c in &train {
            acc.iter_mut().zip(f(c).data()).for_each(|(a, v)| *a += v / n);
        }
        f(train[0]).with_data(acc)
    };
    let atlas = Atlas::new(mean(&|c| &c.image)?.normalize(), mean(&|c| &c.label)?, vec!["mean".into()])?;

    let cfg = TrainConfig {
        epochs: 5,
        seed: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, [16; 3])?;
    let mut log = Vec::new();
    let summary = trainer.fit(&train, &val, Some(&atlas), &mut log)?;
    for e in &summary.history {
        println!(
            "epoch {}: D {:.4} G {:.4} L1 {:.5} NMI {:.4} val Dice {:.4}",
            e.epoch, e.mean.l_cgan, e.mean.l_cgan_g, e.mean.l_label, e.mean.l_intensity, e.val_dice
        );
    }
    println!("best epoch {} (Dice {:.4}); {} log lines", summary.best_epoch, summary.best_val_dice, log.split(|b| *b == b'\n').count() - 1);
    Ok(())
}
