//! Optimizes a single-cell mask against the identity node, whose optimum
//! is known in closed form: m = 1 - eta / 2.
//!
//! cargo run --release --example mask_closed_form

use dproto::autodiff::{Graph, Var};
use dproto::mdm::{optimize_mask_vector, DetectionNode, MdmConfig};
use dproto::Tensor;

fn main() -> dproto::Result<()> {
    let node = DetectionNode::custom(|g: &Graph, x: Var| g.reshape(x, &[1]), vec![1.0]);
    let x = Tensor::full(&[1, 1, 1], 1.0);
    for eta in [0.0, 0.1, 0.2, 0.5, 1.0] {
        let cfg = MdmConfig { eta, ..MdmConfig::default() };
        let mv = optimize_mask_vector(&node, &x, 1, [1, 1], &cfg)?;
        let expected = (1.0 - eta / 2.0).max(0.0);
        println!(
            "eta {eta:<4} m = {:.6}  expected {expected:.6}  loss {:.6}",
            mv.values[0],
            mv.final_loss().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
