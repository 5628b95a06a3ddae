//! Generates a small seeded phantom dataset and writes it to a temp dir.

use voxatlas::metrics::ejection_fraction;
use voxatlas::phantom::{Dataset, Frame, Split, SubjectConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = Dataset::generate(6, 4, 7, &SubjectConfig::for_dims(32))?;
    println!("{} cases ({} train, {} val)", ds.cases.len(), ds.split(Split::Train).len(), ds.split(Split::Val).len());
    for pair in ds.cases.chunks(2) {
        let (ed, es) = (&pair[0], &pair[1]);
        assert_eq!((ed.frame, es.frame), (Frame::Ed, Frame::Es));
        let measured = ejection_fraction(&ed.label, &es.label)?;
        println!(
            "subject {:2} regime {:?}: true EF {:.3}, voxel EF {:.3}, ED cavity {} voxels",
            ed.subject,
            ed.regime,
            ed.true_ef,
            measured,
            ed.label.foreground_count()
        );
    }
    let dir = std::env::temp_dir().join("voxatlas_phantoms");
    let files = ds.write(&dir)?;
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}
