//! Explains one test prediction of a trained checkpoint: picks the
//! strongest prototype of the predicted class, optimizes the multi-scale
//! masks on the input and on the prototype's source image, and writes the
//! CAM, heatmap and binary images.
//!
//! cargo run --release --example explain_prediction -- <data_dir> [test_index] [out_dir]
//!
//! `data_dir` must hold `manifest.json` and `model.ckpt` (see the
//! `train_classifier` example).

use std::path::PathBuf;
use std::time::Instant;

use dproto::checkpoint;
use dproto::dataset::{load_manifest, Split};
use dproto::mdm::{explain, MdmConfig};
use dproto::saliency_eval::localization_metrics;

fn main() -> dproto::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: explain_prediction <data_dir> [test_index] [out_dir]"));
    let index: usize = args.next().map_or(0, |a| a.parse().expect("test_index must be an integer"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| dir.join("explanation"));

    let model = checkpoint::load(&dir.join("model.ckpt"))?.model;
    let test = load_manifest(&dir.join("manifest.json"))?.load_split(Split::Test)?;
    let (x, label) = (&test.images[index], test.labels[index]);

    let start = Instant::now();
    let bundle = explain(&model, x, &MdmConfig::default())?;
    let node = &bundle.node;
    println!(
        "{}: label {}, predicted {} via prototype {} (contribution {:.3}, mask {})",
        test.ids[index],
        model.class_names[label],
        model.class_names[node.predicted_class],
        node.prototype,
        node.contribution,
        node.mask_index
    );
    if let Some(truth) = &test.masks[index] {
        let m = localization_metrics(&bundle.input.cam.region, truth)?;
        println!("CAM region vs ground truth: iou {:.3}, dice {:.3}", m.iou, m.dice);
    }
    for v in &bundle.input.vectors {
        println!("  scale {:>2} grid {:?}: final loss {:.5}", v.scale, v.grid, v.final_loss().unwrap_or(f64::NAN));
    }
    bundle.save(&out, &model.class_names)?;
    println!("explained in {:.1}s -> {}", start.elapsed().as_secs_f64(), out.display());
    Ok(())
}
