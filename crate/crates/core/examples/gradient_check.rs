//! Checks reverse-mode gradients of a small conv → ReLU → pool → GAP
//! network against central finite differences.
//!
//! cargo run --release --example gradient_check

use dproto::autodiff::{gradient_check, Graph, Var};
use dproto::rng;
use dproto::{Result, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn network(g: &Graph, x: Var, kernel: &Tensor) -> Result<Var> {
    let w = g.constant(kernel.clone());
    let y = g.relu(g.conv2d(x, w, None, 1, 1)?);
    let y = g.max_pool2d(y, 2, 2)?;
    let y = g.global_avg_pool(y)?;
    Ok(g.sum(g.square(y)))
}

fn main() -> Result<()> {
    let x = random(&[1, 8, 8, 2], 1);
    let kernel = random(&[3, 3, 2, 4], 2);
    let r = gradient_check(|g, v| network(g, v, &kernel), &x, 1e-5)?;
    println!(
        "input:  max relative error {:.2e} over {} components ({} excluded at kinks)",
        r.max_rel_error, r.checked, r.excluded
    );
    let r = gradient_check(
        |g, w| {
            let x = g.constant(x.clone());
            let y = g.relu(g.conv2d(x, w, None, 1, 1)?);
            Ok(g.sum(g.square(g.global_avg_pool(y)?)))
        },
        &kernel,
        1e-5,
    )?;
    println!("kernel: max relative error {:.2e} over {} components", r.max_rel_error, r.checked);
    Ok(())
}
