//! One-pass inference: a generator forward plus one nearest warp of the
//! atlas label, timed per volume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxatlas::atlas::Atlas;
use voxatlas::metrics::dice;
use voxatlas::nnet::Generator;
use voxatlas::phantom::{Dataset, SubjectConfig};
use voxatlas::trainer::segment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = Dataset::generate(4, 1, 9, &SubjectConfig::for_dims(32))?;
    let a = &ds.cases[0];
    let atlas = Atlas::new(a.image.clone(), a.label.clone(), vec![a.id()])?;
    let mut g = Generator::new([32; 3], &mut ChaCha8Rng::seed_from_u64(0))?;
    // An untrained zero head reproduces the atlas label.
    g.zero_head();
    for c in &ds.cases {
        let s = segment(&g, &atlas, &c.image)?;
        println!("{}: {:.2} ms, Dice vs truth {:.4}", c.id(), s.seconds * 1e3, dice(&s.label, &c.label)?);
    }
    Ok(())
}
