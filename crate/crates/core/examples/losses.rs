//! The label L1 and intensity NMI consistency losses and their combination.

use voxatlas::losses::{combine, l1_label, nmi, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_BINS};
use voxatlas::phantom::{generate_subject, SubjectConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SubjectConfig::for_dims(32);
    let a = generate_subject(0, 1, &cfg)?;
    let b = generate_subject(1, 2, &cfg)?;

    let self_nmi = nmi(&a.ed.image, &a.ed.image, DEFAULT_BINS)?;
    println!("nmi(x, x) = {:.9}", self_nmi.loss);
    let ab = nmi(&a.ed.image, &b.ed.image, DEFAULT_BINS)?;
    let ba = nmi(&b.ed.image, &a.ed.image, DEFAULT_BINS)?;
    println!("nmi(a, b) = {:.9}, nmi(b, a) = {:.9}", ab.loss, ba.loss);

    let (l1, grad) = l1_label(&a.ed.label, &b.ed.label)?;
    let nonzero = grad.iter().filter(|g| **g != 0.0).count();
    println!("L1(label a, label b) = {l1:.5} ({nonzero} voxels disagree)");

    let r = combine(0.69, l1, ab.loss, DEFAULT_ALPHA, DEFAULT_BETA);
    println!("total = {:.5} = l_cgan + {} L1 + {} NMI", r.total, r.alpha, r.beta);
    Ok(())
}
