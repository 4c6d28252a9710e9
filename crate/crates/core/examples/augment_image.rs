//! Applies each augmentation to a rendered sample and writes the results
//! as PPM files.
//!
//! cargo run --release --example augment_image -- [out_dir]

use std::path::PathBuf;

use dproto::dataset::{augment, pnm, render_sample, AugmentKind, SyntheticSpec};

fn main() -> dproto::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dproto-augment"));
    std::fs::create_dir_all(&out).expect("create the output directory");
    let spec = SyntheticSpec { clutter: 0, ..SyntheticSpec::default() };
    let sample = render_sample(&spec, 3, 2);
    pnm::write(&out.join("original.ppm"), &sample.image)?;
    for kind in AugmentKind::ALL {
        let m = kind.max_magnitude();
        let image = augment(&sample.image, kind, m, 7)?;
        let path = out.join(format!("{kind:?}.ppm").to_lowercase());
        pnm::write(&path, &image)?;
        let diff = image.max_abs_diff(&sample.image);
        println!("{kind:?} at magnitude {m}: max pixel change {diff:.3} -> {}", path.display());
    }
    Ok(())
}
