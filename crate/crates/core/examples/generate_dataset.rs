//! Renders a small synthetic shapes dataset and prints its manifest
//! summary and one sample's ground-truth coverage.
//!
//! cargo run --release --example generate_dataset -- [out_dir] [classes] [per_class]

use std::path::PathBuf;

use dproto::dataset::{generate, Split, SyntheticSpec};

fn main() -> dproto::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dproto-gen"));
    let mut spec = SyntheticSpec::default();
    if let Some(c) = args.next() {
        spec.classes = c.parse().expect("classes must be an integer");
    }
    if let Some(n) = args.next() {
        spec.per_class = n.parse().expect("per_class must be an integer");
    }

    let manifest = generate(&spec, &out)?;
    let train = manifest.entries_in(Split::Train).count();
    let test = manifest.entries_in(Split::Test).count();
    println!("{} classes: {}", manifest.classes.len(), manifest.classes.join(", "));
    println!("{train} train / {test} test images of {:?} in {}", manifest.image_size, out.display());

    let first = &manifest.entries[0];
    let mask = manifest.load_mask(first)?.expect("synthetic entries carry masks");
    let covered = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
    println!("{}: label {}, shape covers {:.1}% of the image", first.image, first.label, 100.0 * covered);
    Ok(())
}
