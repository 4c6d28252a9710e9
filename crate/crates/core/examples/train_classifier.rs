//! Generates the synthetic shapes benchmark, trains a classifier with the
//! default schedule, prints the per-epoch log and saves `model.ckpt` next
//! to the data.
//!
//! cargo run --release --example train_classifier -- [out_dir] [epochs]

use std::path::PathBuf;
use std::time::Instant;

use dproto::backbone::BackboneConfig;
use dproto::checkpoint;
use dproto::dataset::{self, Split, SyntheticSpec};
use dproto::model::{Model, ProtoLayerConfig};
use dproto::trainer::{train, TrainConfig};

fn main() -> dproto::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dproto-shapes"));
    let mut cfg = TrainConfig::default();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs must be an integer");
    }

    let spec = SyntheticSpec::default();
    let manifest = dataset::generate(&spec, &out)?;
    let train_set = manifest.load_split(Split::Train)?;
    let test_set = manifest.load_split(Split::Test)?;
    println!("{} train / {} test images in {}", train_set.len(), test_set.len(), out.display());

    let mut model = Model::new(&BackboneConfig::default(), &ProtoLayerConfig::default(), manifest.classes.clone(), 0)?;
    let start = Instant::now();
    let report = train(&mut model, &train_set, Some(&test_set), &cfg)?;
    print!("{}", report.to_csv());
    for p in &report.pushes {
        println!(
            "push @{}: {:.4} -> {:.4} -> {:.4}",
            p.epoch, p.accuracy_before, p.accuracy_after_push, p.accuracy_after_refit
        );
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    checkpoint::save(&model, &out.join("model.ckpt"), None)?;
    Ok(())
}
