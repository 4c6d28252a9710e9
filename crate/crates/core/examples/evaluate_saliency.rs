//! Scores MDM, occlusion and random CAMs of a trained checkpoint against
//! the ground-truth shape masks of the synthetic test split.
//!
//! cargo run --release --example evaluate_saliency -- <data_dir> [images] [steps] [eta] [lr]
//!
//! `data_dir` must hold `manifest.json` and `model.ckpt`, as written by the
//! `train_classifier` example.

use std::path::PathBuf;
use std::time::Instant;

use dproto::checkpoint;
use dproto::dataset::{load_manifest, Split};
use dproto::mdm::{explain_input, MdmConfig};
use dproto::saliency_eval::{evaluate_cam, occlusion_baseline, random_cam, summarize, EvalSettings};

fn main() -> dproto::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: evaluate_saliency <data_dir> [images] [steps] [eta] [lr]"));
    let limit: usize = args.next().map_or(20, |a| a.parse().expect("images must be an integer"));
    let mut mdm = MdmConfig::default();
    if let Some(s) = args.next() {
        mdm.steps = s.parse().expect("steps must be an integer");
    }
    if let Some(e) = args.next() {
        mdm.eta = e.parse().expect("eta must be a number");
    }
    if let Some(l) = args.next() {
        mdm.lr = l.parse().expect("lr must be a number");
    }

    let model = checkpoint::load(&dir.join("model.ckpt"))?.model;
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    let mut test = manifest.load_split(Split::Test)?;
    test.truncate(limit);
    let accuracy = model.accuracy(&test.images, &test.labels)?;
    let settings = EvalSettings::default();
    let [h, w, _] = model.input_shape();

    let mut evals = [Vec::new(), Vec::new(), Vec::new()];
    let mut mdm_seconds = 0.0;
    for (i, (x, &y)) in test.images.iter().zip(&test.labels).enumerate() {
        let truth = test.masks[i].as_ref().expect("synthetic data has masks");
        let start = Instant::now();
        let (cam, _, _) = explain_input(&model, x, &mdm)?;
        mdm_seconds += start.elapsed().as_secs_f64();
        let cams = [cam.values, occlusion_baseline(&model, x, 8, 4)?, random_cam(h, w, i as u64)];
        for (e, c) in evals.iter_mut().zip(&cams) {
            e.push(evaluate_cam(&model, x, y, c, truth, &settings)?);
        }
        let m = &evals[0][i];
        println!(
            "{:>3} label {y} iou mdm {:.3} occ {:.3} rnd {:.3}  del {:.3} ins {:.3}",
            i, m.localization.iou, evals[1][i].localization.iou, evals[2][i].localization.iou, m.deletion.auc, m.insertion.auc
        );
    }
    for (name, e) in ["mdm", "occlusion", "random"].iter().zip(&evals) {
        println!("{name:>10}: {}", serde_json::to_string(&summarize(accuracy, e))?);
    }
    let won = evals[0].iter().filter(|e| e.insertion.auc > e.deletion.auc).count();
    println!("insertion > deletion on {won}/{} images", evals[0].len());
    println!("mdm: {:.2}s per image", mdm_seconds / test.len().max(1) as f64);
    Ok(())
}
