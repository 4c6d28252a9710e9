#![allow(dead_code)]

use std::sync::Arc;

use dproto::autodiff::{gradient_check, GradCheckReport};
use dproto::autodiff::{Graph, Var};
use dproto::backbone::{BackboneConfig, ConvBlockSpec};
use dproto::model::{Model, ProtoLayerConfig, Trainable};
use dproto::rng;
use dproto::trainer::{loss_terms, TrainConfig};
use dproto::{Result, Tensor};
use rand::Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 99);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ v ∘ W` with fixed pseudo-random weights, turning any tensor into a
/// scalar with a non-uniform gradient.
pub fn project(g: &Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v);
    let w = g.constant(random(&shape, -1.0, 1.0, 7 + shape.iter().sum::<usize>() as u64));
    Ok(g.sum(g.mul(v, w)?))
}

type Case = Box<dyn Fn(&Graph, Var) -> Result<Var>>;

fn case(f: impl Fn(&Graph, Var) -> Result<Var> + 'static) -> Case {
    Box::new(f)
}

/// Every differentiable op, each checked with respect to one operand.
pub fn op_cases() -> Vec<(&'static str, Case, Tensor)> {
    let c34 = random(&[3, 4], -1.0, 1.0, 1);
    let masks = Arc::new(random(&[5, 3, 3, 4], 0.0, 1.0, 2).into_data());
    let conv_w = random(&[3, 3, 2, 3], -0.5, 0.5, 3);
    let conv_b = random(&[3], -0.5, 0.5, 4);
    let conv_x = random(&[1, 6, 6, 2], -1.0, 1.0, 5);
    let protos = random(&[5, 4], -1.0, 1.0, 6);
    let z = random(&[2, 3, 4], -1.0, 1.0, 8);
    vec![
        ("add", case({ let c = c34.clone(); move |g, x| { let c = g.constant(c.clone()); project(g, g.add(x, c)?) } }), random(&[3, 4], -1.0, 1.0, 10)),
        ("sub", case({ let c = c34.clone(); move |g, x| { let c = g.constant(c.clone()); project(g, g.sub(c, x)?) } }), random(&[3, 4], -1.0, 1.0, 11)),
        ("mul", case({ let c = c34.clone(); move |g, x| { let c = g.constant(c.clone()); project(g, g.mul(x, c)?) } }), random(&[3, 4], -1.0, 1.0, 12)),
        ("div_denominator", case({ let c = c34.clone(); move |g, x| { let c = g.constant(c.clone()); project(g, g.div(c, x)?) } }), random(&[3, 4], 0.5, 1.5, 13)),
        ("div_numerator", case(|g, x| { let c = g.constant(random(&[3, 4], 0.5, 1.5, 14)); project(g, g.div(x, c)?) }), random(&[3, 4], -1.0, 1.0, 15)),
        ("add_scalar", case(|g, x| project(g, g.add_scalar(x, 0.3))), random(&[3, 4], -1.0, 1.0, 16)),
        ("mul_scalar", case(|g, x| project(g, g.mul_scalar(x, -1.7))), random(&[3, 4], -1.0, 1.0, 17)),
        ("scale_channels_mask", case(|g, x| { let im = g.constant(random(&[4, 5, 3], 0.0, 1.0, 18)); project(g, g.scale_channels(x, im)?) }), random(&[4, 5], 0.0, 1.0, 19)),
        ("scale_channels_input", case(|g, x| { let m = g.constant(random(&[4, 5], 0.0, 1.0, 20)); project(g, g.scale_channels(m, x)?) }), random(&[4, 5, 3], 0.0, 1.0, 21)),
        ("matmul_left", case(|g, x| { let b = g.constant(random(&[4, 2], -1.0, 1.0, 22)); project(g, g.matmul(x, b)?) }), random(&[3, 4], -1.0, 1.0, 23)),
        ("matmul_right", case(|g, x| { let a = g.constant(random(&[2, 3], -1.0, 1.0, 24)); project(g, g.matmul(a, x)?) }), random(&[3, 4], -1.0, 1.0, 25)),
        ("transpose", case(|g, x| project(g, g.transpose(x)?)), random(&[3, 4], -1.0, 1.0, 26)),
        ("conv2d_input", case({ let (w, b) = (conv_w.clone(), conv_b.clone()); move |g, x| { let w = g.constant(w.clone()); let b = g.constant(b.clone()); project(g, g.conv2d(x, w, Some(b), 1, 1)?) } }), conv_x.clone()),
        ("conv2d_input_strided", case({ let w = conv_w.clone(); move |g, x| { let w = g.constant(w.clone()); project(g, g.conv2d(x, w, None, 2, 1)?) } }), conv_x.clone()),
        ("conv2d_weight", case({ let (xx, b) = (conv_x.clone(), conv_b.clone()); move |g, w| { let x = g.constant(xx.clone()); let b = g.constant(b.clone()); project(g, g.conv2d(x, w, Some(b), 2, 0)?) } }), conv_w.clone()),
        ("conv2d_bias", case({ let (xx, w) = (conv_x.clone(), conv_w.clone()); move |g, b| { let x = g.constant(xx.clone()); let w = g.constant(w.clone()); project(g, g.conv2d(x, w, Some(b), 1, 1)?) } }), conv_b.clone()),
        ("max_pool2d", case(|g, x| project(g, g.max_pool2d(x, 2, 2)?)), random(&[1, 4, 6, 2], -1.0, 1.0, 27)),
        ("relu", case(|g, x| project(g, g.relu(x))), random(&[3, 4], -1.0, 1.0, 28)),
        ("ln", case(|g, x| project(g, g.ln(x))), random(&[3, 4], 0.5, 2.0, 29)),
        ("square", case(|g, x| project(g, g.square(x))), random(&[3, 4], -1.0, 1.0, 30)),
        ("abs", case(|g, x| project(g, g.abs(x))), random(&[3, 4], -1.0, 1.0, 31)),
        ("global_avg_pool", case(|g, x| project(g, g.global_avg_pool(x)?)), random(&[2, 3, 3, 4], -1.0, 1.0, 32)),
        ("upsample_bilinear", case(|g, x| project(g, g.upsample_bilinear(x, 8, 10)?)), random(&[3, 4], 0.0, 1.0, 33)),
        ("sum", case(|g, x| { let y = g.square(x); Ok(g.sum(y)) }), random(&[3, 4], -1.0, 1.0, 34)),
        ("mean", case(|g, x| { let y = g.square(x); Ok(g.mean(y)) }), random(&[3, 4], -1.0, 1.0, 35)),
        ("max_all", case(|g, x| Ok(g.max_all(x))), random(&[3, 4], -1.0, 1.0, 36)),
        ("max_axis", case(|g, x| project(g, g.max_axis(x, 1)?)), random(&[2, 3, 4], -1.0, 1.0, 37)),
        ("min_axis", case(|g, x| project(g, g.min_axis(x, 0)?)), random(&[3, 4], -1.0, 1.0, 38)),
        ("select_min", case(|g, x| project(g, g.select_min(x, &[true, false, true, true, false, true, false, true, true, false, false, true])?)), random(&[3, 4], -1.0, 1.0, 39)),
        ("sq_dist", case(|g, x| { let c = g.constant(random(&[6], -1.0, 1.0, 40)); g.sq_dist(x, c) }), random(&[6], -1.0, 1.0, 41)),
        ("pairwise_sq_dist_z", case({ let p = protos.clone(); move |g, x| { let p = g.constant(p.clone()); project(g, g.pairwise_sq_dist(x, p)?) } }), z.clone()),
        ("pairwise_sq_dist_p", case({ let zz = z.clone(); move |g, p| { let z = g.constant(zz.clone()); project(g, g.pairwise_sq_dist(z, p)?) } }), protos.clone()),
        ("softmax_cross_entropy", case(|g, x| g.softmax_cross_entropy(x, &[2, 0, 3])), random(&[3, 4], -2.0, 2.0, 42)),
        ("masked_gap", case({ let m = masks.clone(); move |g, x| project(g, g.masked_gap(x, &m, &[0, 2, 4])?) }), random(&[2, 3, 3, 4], -1.0, 1.0, 43)),
        ("reshape", case(|g, x| project(g, g.reshape(x, &[4, 3])?)), random(&[3, 4], -1.0, 1.0, 44)),
    ]
}

pub fn tiny_model(seed: u64) -> Model {
    let backbone = BackboneConfig {
        input_size: [16, 16, 3],
        conv_blocks: vec![ConvBlockSpec::new(6, 3, 1, 2), ConvBlockSpec::new(6, 3, 1, 2)],
        shaping_channels: 5,
        target_grid: [4, 4],
        ..BackboneConfig::default()
    };
    let proto = ProtoLayerConfig { prototypes_per_class: 2, feature_masks: 6, epsilon: 1e-12 };
    Model::new(&backbone, &proto, vec!["a".into(), "b".into(), "c".into()], seed).unwrap()
}

/// Gradient check of the full training loss with respect to the prototype
/// matrix of a small model.
pub fn end_to_end_prototype_check() -> GradCheckReport {
    let model = tiny_model(3);
    let images: Vec<Tensor> = (0..3).map(|i| random(&[16, 16, 3], 0.0, 1.0, 100 + i)).collect();
    let batch = dproto::model::stack(&images).unwrap();
    let labels = [0, 1, 2];
    let cfg = TrainConfig::default();
    let f = |g: &Graph, p: Var| {
        let mut vars = model.bind(g, Trainable::NONE);
        vars.prototypes = p;
        let x = g.constant(batch.clone());
        let pass = model.forward(g, &vars, x)?;
        Ok(loss_terms(g, &model, &vars, &pass, &labels, &cfg)?.total)
    };
    gradient_check(f, &model.prototypes.matrix(), EPS).unwrap()
}

/// Rendered synthetic samples sized for [`tiny_model`].
pub fn tiny_data(per_class: usize, seed: u64) -> dproto::dataset::LabeledImages {
    let spec = dproto::dataset::SyntheticSpec {
        classes: 3,
        per_class,
        image_size: 16,
        clutter: 0,
        seed,
        ..Default::default()
    };
    let mut out = dproto::dataset::LabeledImages::default();
    for (idx, label, _) in dproto::dataset::synthetic::layout(&spec) {
        let s = dproto::dataset::render_sample(&spec, idx, label);
        out.ids.push(format!("{idx}"));
        out.images.push(s.image);
        out.labels.push(label);
        out.masks.push(Some(s.mask));
    }
    out
}

pub fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1,
        push_period: 2,
        batch_size: 6,
        head_refit_iterations: 3,
        push_augmentations: 4,
        ..TrainConfig::default()
    }
}
