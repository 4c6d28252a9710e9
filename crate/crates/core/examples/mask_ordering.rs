//! Optimizes a mask against detection nodes that add up contributions of
//! disjoint regions, and shows that larger contributions keep larger mask
//! values.
//!
//! cargo run --release --example mask_ordering -- [eta]

use dproto::mdm::{ordering_property_harness, MdmConfig, RegionResponse};

fn main() -> dproto::Result<()> {
    let eta: f64 = std::env::args().nth(1).map_or(0.2, |a| a.parse().expect("eta must be a number"));
    let cases: [&[f64]; 3] = [&[0.8, 0.3], &[0.2, 0.6, 0.4], &[0.1, 0.9, 0.3, 0.7, 0.5]];
    for response in [RegionResponse::Saturating, RegionResponse::Linear] {
        println!("{response:?} response, eta {eta}");
        for c in cases {
            let r = ordering_property_harness(c, response, eta, 1e-3, &MdmConfig::default())?;
            println!(
                "  I = {:?}\n  m = {:.3?}\n  spearman {:.3}, {} violations",
                r.contributions,
                r.masks,
                r.spearman,
                r.violations.len()
            );
        }
    }
    Ok(())
}
