//! Counts the patch-restricted prototype families on small feature grids
//! and shows that a feature mask reproduces each of them.
//!
//! cargo run --release --example count_prototypes -- [max_side]

use dproto::backbone::FeatureMap;
use dproto::protolayer::{
    containment_witness, count_rect_patch_prototypes, count_unit_patch_prototypes, masked_feature, WitnessStyle,
};
use dproto::Tensor;

fn main() -> dproto::Result<()> {
    let max: usize = std::env::args().nth(1).map_or(7, |a| a.parse().expect("max_side must be an integer"));
    println!("{:>5} {:>6} {:>8}", "grid", "unit", "rect");
    for s in 2..=max {
        let rect = count_rect_patch_prototypes(s, s)?;
        println!("{:>5} {:>6} {:>8}", format!("{s}x{s}"), count_unit_patch_prototypes(s, s)?, rect.closed_form);
    }

    // a 3x3x2 feature map whose values encode their own position
    let (h, w, d) = (3, 3, 2);
    let f = FeatureMap(Tensor::new(vec![h, w, d], (0..h * w * d).map(|v| v as f64).collect())?);
    let styles = [
        WitnessStyle::UnitPatch { row: 1, col: 2 },
        WitnessStyle::RectPatch { top: 0, left: 0, height: 2, width: 2 },
        WitnessStyle::SpatialScalar { weights: vec![0.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 0.0] },
    ];
    for style in &styles {
        let mask = containment_witness(h, w, d, style)?;
        let z = masked_feature(&f, &mask)?;
        // masked GAP divides by h·w; undo it to get the plain patch sum
        let raw: Vec<f64> = z.iter().map(|v| v * (h * w) as f64).collect();
        println!("{style:?}\n  z = {z:.4?}\n  patch sum = {raw:?}");
    }
    Ok(())
}
