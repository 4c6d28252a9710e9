mod common;

use common::{tiny_data, tiny_model, tiny_train_config};
use dproto::rng;
use dproto::trainer::{push_prototypes, refit_head, train};
use rand::Rng;

fn objective(p: &[f64], vectors: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .map(|z| z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

#[test]
fn pushed_prototype_is_mean_of_its_sources() {
    let data = tiny_data(4, 1);
    for r in [1, 3, 8] {
        let mut model = tiny_model(2);
        push_prototypes(&mut model, &data, r, 5, 1).unwrap();
        for p in &model.prototypes.prototypes {
            let src = p.source.as_ref().unwrap();
            assert_eq!(src.source_vectors.len(), r);
            assert_eq!(src.mask_ids.len(), r);
            assert_eq!(data.labels[src.image_index], p.class_id);
            for (k, &v) in p.vector.iter().enumerate() {
                let mean = src.source_vectors.iter().map(|z| z[k]).sum::<f64>() / r as f64;
                assert!((v - mean).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn no_perturbation_beats_the_pushed_prototype() {
    let data = tiny_data(4, 3);
    let mut model = tiny_model(4);
    push_prototypes(&mut model, &data, 6, 9, 2).unwrap();
    let mut r = rng::stream(11, 0);
    for p in &model.prototypes.prototypes {
        let vectors = &p.source.as_ref().unwrap().source_vectors;
        let best = objective(&p.vector, vectors);
        for _ in 0..1000 {
            let scale = 10f64.powi(r.gen_range(-6..0));
            let q: Vec<f64> = p.vector.iter().map(|v| v + scale * r.gen_range(-1.0..1.0)).collect();
            assert!(objective(&q, vectors) >= best);
        }
    }
}

#[test]
fn push_is_deterministic() {
    let data = tiny_data(3, 0);
    let mut a = tiny_model(1);
    let mut b = tiny_model(1);
    push_prototypes(&mut a, &data, 4, 7, 3).unwrap();
    push_prototypes(&mut b, &data, 4, 7, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn refit_changes_only_the_head() {
    let data = tiny_data(3, 2);
    let mut model = tiny_model(6);
    let before = model.clone();
    let losses = refit_head(&mut model, &data, 5, &tiny_train_config(1), 0).unwrap();
    assert_eq!(losses.len(), 5);
    assert!(losses.last() <= losses.first());
    assert_eq!(model.backbone, before.backbone);
    assert_eq!(model.prototypes, before.prototypes);
    assert_eq!(model.masks, before.masks);
    assert_ne!(model.head, before.head);
}

#[test]
fn warmup_leaves_the_feature_blocks_untouched() {
    let data = tiny_data(3, 4);
    let mut model = tiny_model(8);
    let before = model.clone();
    let cfg = dproto::trainer::TrainConfig { warmup_epochs: 2, ..tiny_train_config(2) };
    train(&mut model, &data, None, &cfg).unwrap();
    for (b, a) in before.backbone.blocks.iter().zip(&model.backbone.blocks) {
        assert_eq!(a, b);
    }
    assert_ne!(model.backbone.shaping, before.backbone.shaping);
    assert_ne!(model.prototypes.matrix(), before.prototypes.matrix());
}

#[test]
fn zero_epochs_is_the_identity() {
    let data = tiny_data(2, 5);
    let mut model = tiny_model(3);
    let before = model.clone();
    let report = train(&mut model, &data, None, &tiny_train_config(0)).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic_and_logs_pushes() {
    let data = tiny_data(3, 6);
    let cfg = tiny_train_config(4);
    let mut a = tiny_model(9);
    let mut b = tiny_model(9);
    let ra = train(&mut a, &data, Some(&data), &cfg).unwrap();
    let rb = train(&mut b, &data, Some(&data), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.pushes.iter().map(|p| p.epoch).collect::<Vec<_>>(), vec![2, 4]);
    assert!(a.prototypes.has_provenance());
    assert_eq!(a.trained_epochs, 4);
}

#[test]
fn missing_class_is_rejected() {
    let mut data = tiny_data(2, 0);
    let keep: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != 2).collect();
    data.images = keep.iter().map(|&i| data.images[i].clone()).collect();
    data.labels = keep.iter().map(|&i| data.labels[i]).collect();
    let mut model = tiny_model(0);
    let err = train(&mut model, &data, None, &tiny_train_config(1)).unwrap_err();
    assert!(matches!(err, dproto::Error::EmptyClass(2)));
}
