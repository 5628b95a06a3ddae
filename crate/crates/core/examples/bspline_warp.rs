//! Affine + B-spline FFD warping of a volume, and its pullback gradient.

use voxatlas::transform::{cubic_bspline_basis, warp, warp_vjp, AffineParams, ParamVector};
use voxatlas::volume::{Volume, VolumeKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let u = 0.37;
    let b = cubic_bspline_basis(u);
    println!("basis at u={u}: {b:?}, sum = {}", b.iter().sum::<f64>());

    let dims = [24; 3];
    let c = 11.5;
    let ball = Volume::from_fn(dims, [1.0; 3], VolumeKind::Label, |i, j, k| {
        let r2 = [i, j, k].iter().map(|&v| (v as f64 - c).powi(2)).sum::<f64>();
        if r2 < 36.0 { 1.0 } else { 0.0 }
    })?;

    let identity = ParamVector::default_for(dims);
    println!("identity warp exact: {}", warp(&identity, &ball, dims) == ball);

    let mut p = identity.clone();
    p.set_affine(AffineParams::translation([2.0, 0.0, 0.0]));
    // Push one central control point 1.5 voxels along x.
    let c_idx = p.geometry().point_index([5, 5, 5]);
    let n = p.theta().len();
    p.values_mut()[n + 3 * c_idx] = 1.5;
    let moved = warp(&p, &ball, dims);
    println!("foreground mass before {:.1}, after {:.1}", ball.data().iter().sum::<f64>(), moved.data().iter().sum::<f64>());

    // Gradient of sum(warped) w.r.t. all 3012 parameters.
    let ones = Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |_, _, _| 1.0)?;
    let g = warp_vjp(&p, &ball, &ones);
    println!("d sum / d translation = {:?}", &g[9..12]);
    Ok(())
}
