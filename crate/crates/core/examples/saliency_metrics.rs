//! Localization and confidence metrics on hand-made maps: IOU, DICE, PPV
//! and sensitivity of a binarized CAM, AD/AI from confidence pairs, and a
//! deletion/insertion curve for a toy classifier.
//!
//! cargo run --release --example saliency_metrics

use dproto::saliency_eval::{binarize_cam, deletion_insertion, drop_increase, localization_metrics, Classifier};
use dproto::{Result, Tensor};

/// Class-0 confidence is the mean intensity of the left half.
struct LeftHalf;

impl Classifier for LeftHalf {
    fn probabilities_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|x| {
                let w = x.shape()[1];
                let left: Vec<f64> = x.data().chunks(w).flat_map(|row| row[..w / 2].to_vec()).collect();
                let p = left.iter().sum::<f64>() / left.len() as f64;
                vec![p, 1.0 - p]
            })
            .collect())
    }
}

fn main() -> Result<()> {
    let (h, w) = (4, 4);
    let truth: Vec<bool> = (0..h * w).map(|i| i % w < 2).collect();
    let cam: Vec<f64> = (0..h * w).map(|i| 1.0 - (i % w) as f64 / w as f64).collect();
    for pct in [25.0, 50.0, 75.0] {
        let m = localization_metrics(&binarize_cam(&cam, pct)?, &truth)?;
        println!(
            "top {pct:>4}%: iou {:.3} dice {:.3} ppv {:.3} sensitivity {:.3}",
            m.iou, m.dice, m.ppv, m.sensitivity
        );
    }

    let r = drop_increase(&[(0.8, 0.4), (0.6, 0.7), (0.9, 0.9)]);
    println!("AD {:.2}  AI {:.2}", r.ad, r.ai);

    let image = Tensor::full(&[h, w, 1], 1.0);
    let (del, ins) = deletion_insertion(&LeftHalf, &image, &cam, 0, 25.0)?;
    println!("deletion  {:?} auc {:.3}", del.probabilities, del.auc);
    println!("insertion {:?} auc {:.3}", ins.probabilities, ins.auc);
    Ok(())
}
