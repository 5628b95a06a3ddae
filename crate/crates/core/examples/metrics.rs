//! Dice, surface distances, EF and the EF correlation on hand-made masks.

use voxatlas::metrics::{dice, ejection_fraction, pearson_corr, surface_distances};
use voxatlas::volume::{Volume, VolumeKind};

fn cube(n: usize, lo: usize, side: usize, shift: usize) -> Volume {
    Volume::from_fn([n; 3], [1.0; 3], VolumeKind::Label, |i, j, k| {
        let inside = |v: usize, s: usize| v >= lo + s && v < lo + s + side;
        if inside(i, shift) && inside(j, 0) && inside(k, 0) { 1.0 } else { 0.0 }
    })
    .expect("valid mask")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = cube(12, 2, 5, 0);
    let b = cube(12, 2, 5, 2);
    let (msd, hsd) = surface_distances(&a, &b)?;
    println!("5^3 cubes offset by 2: Dice {:.4}, MSD {msd:.4} mm, HSD {hsd:.4} mm", dice(&a, &b)?);

    let ed = cube(12, 1, 10, 0);
    let es = cube(12, 2, 8, 0);
    println!("EF = {:.4}", ejection_fraction(&ed, &es)?);
    println!("corr((1,2,3),(1,2,4)) = {:.6}", pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])?);
    Ok(())
}
