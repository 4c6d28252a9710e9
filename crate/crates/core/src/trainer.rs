//! Loss, staged training schedule, prototype push and head refit.
//!
//! Training runs in two stages. During the first `warmup_epochs` epochs the
//! backbone is frozen and only the shaping layers, prototypes and head are
//! updated; afterwards every group is trained jointly. Every `push_period`
//! epochs after warmup the prototypes are projected onto training data
//! (averaging `R` augmented views of a source image) and the head is refit
//! on the frozen activations.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{random_augmentation, LabeledImages};
use crate::error::{Error, Result};
use crate::model::{stack, ForwardPass, Model, ModelVars, Trainable};
use crate::optim::{Optimizer, OptimizerKind};
use crate::protolayer::{ClassifierHead, PrototypeSource};
use crate::rng;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub backbone: f64,
    pub shaping: f64,
    pub prototypes: f64,
    pub head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            backbone: 1e-4,
            shaping: 3e-3,
            prototypes: 3e-3,
            head: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the clustering cost.
    pub lambda1: f64,
    /// Weight of the separation cost (non-positive).
    pub lambda2: f64,
    /// Weight of the off-class head L1 penalty.
    pub lambda3: f64,
    pub learning_rates: LearningRates,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub push_period: usize,
    /// Passes over the training set when refitting the head after a push.
    pub head_refit_iterations: usize,
    /// Views `R` averaged into each pushed prototype; view 0 is the
    /// unaugmented source image.
    pub push_augmentations: usize,
    /// Probability that a training image is replaced by a random
    /// augmentation of itself.
    pub augment_probability: f64,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.8,
            lambda2: -0.08,
            lambda3: 1e-4,
            learning_rates: LearningRates::default(),
            optimizer: OptimizerKind::Adam,
            batch_size: 60,
            epochs: 30,
            warmup_epochs: 5,
            push_period: 10,
            head_refit_iterations: 20,
            push_augmentations: 8,
            augment_probability: 0.0,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 <= 0.0 && self.lambda3 >= 0.0) {
            return fail("loss weights must satisfy lambda2 <= 0 <= lambda1 and lambda3 >= 0");
        }
        let lr = &self.learning_rates;
        if [lr.backbone, lr.shaping, lr.prototypes, lr.head]
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return fail("learning rates must be positive and finite");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.push_period == 0 {
            return fail("push_period must be >= 1");
        }
        if self.push_augmentations == 0 {
            return fail("push_augmentations must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return fail("augment_probability must lie in [0, 1]");
        }
        if !(self.divergence_threshold > 0.0) {
            return fail("divergence_threshold must be positive");
        }
        Ok(())
    }

    /// Whether prototypes are pushed at the end of 1-based `epoch`.
    pub fn is_push_epoch(&self, epoch: usize) -> bool {
        epoch > self.warmup_epochs && epoch % self.push_period == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub clst: f64,
    pub sep: f64,
    pub l1_head: f64,
}

impl LossBreakdown {
    /// `ce + λ1·clst + λ2·sep + λ3·l1`.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        self.cross_entropy + cfg.lambda1 * self.clst + cfg.lambda2 * self.sep + cfg.lambda3 * self.l1_head
    }
}

/// Graph nodes of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cross_entropy: Var,
    pub clst: Var,
    pub sep: Var,
    pub l1_head: Var,
}

impl LossVars {
    pub fn read(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar(self.total),
            cross_entropy: g.scalar(self.cross_entropy),
            clst: g.scalar(self.clst),
            sep: g.scalar(self.sep),
            l1_head: g.scalar(self.l1_head),
        }
    }
}

/// Builds the total loss on top of a forward pass.
pub fn loss_terms(
    g: &Graph,
    model: &Model,
    vars: &ModelVars,
    pass: &ForwardPass,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let m = model.classes();
    let class_ids = model.prototypes.class_ids();
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::LabelOutOfRange { label: bad, classes: m });
    }
    let cross_entropy = g.softmax_cross_entropy(pass.logits, labels)?;

    let own: Vec<bool> = labels
        .iter()
        .flat_map(|&y| class_ids.iter().map(move |&c| c == y))
        .collect();
    let clst = g.mean(g.select_min(pass.min_distances, &own)?);
    let sep = if m > 1 {
        let other: Vec<bool> = own.iter().map(|b| !b).collect();
        g.mul_scalar(g.mean(g.select_min(pass.min_distances, &other)?), -1.0)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let off = ClassifierHead::off_class_mask(m, &class_ids);
    let off = g.constant(Tensor::new(
        vec![m, class_ids.len()],
        off.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?);
    let l1_head = g.sum(g.abs(g.mul(vars.head, off)?));

    let mut total = cross_entropy;
    for (term, weight) in [(clst, cfg.lambda1), (sep, cfg.lambda2), (l1_head, cfg.lambda3)] {
        total = g.add(total, g.mul_scalar(term, weight))?;
    }
    Ok(LossVars {
        total,
        cross_entropy,
        clst,
        sep,
        l1_head,
    })
}

/// Loss of the model on one labeled batch.
pub fn compute_loss(model: &Model, images: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "loss needs a non-empty batch with one label per image ({} images, {} labels)",
            images.len(),
            labels.len()
        )));
    }
    let g = Graph::new();
    let vars = model.bind(&g, Trainable::NONE);
    let x = g.constant(stack(images)?);
    let pass = model.forward(&g, &vars, x)?;
    Ok(loss_terms(&g, model, &vars, &pass, labels, cfg)?.read(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Accuracy over the (possibly augmented) batches seen this epoch.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub pushed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushEvent {
    pub epoch: usize,
    pub accuracy_before: f64,
    pub accuracy_after_push: f64,
    pub accuracy_after_refit: f64,
    /// Mean refit loss of the first and last pass.
    pub refit_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub pushes: Vec<PushEvent>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,ce,clst,sep,l1,train_acc,test_acc,pushed\n");
        for e in &self.epochs {
            let l = &e.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                l.total,
                l.cross_entropy,
                l.clst,
                l.sep,
                l.l1_head,
                e.train_accuracy,
                e.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                u8::from(e.pushed)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Optimizers {
    backbone: Vec<Optimizer>,
    shaping: Vec<Optimizer>,
    prototypes: Optimizer,
    head: Optimizer,
}

impl Optimizers {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let lr = &cfg.learning_rates;
        let n_block = 2 * model.backbone.blocks.len();
        let params = model.backbone.parameters();
        let make = |lr: f64, t: &Tensor| Optimizer::new(cfg.optimizer, lr, t.numel());
        Optimizers {
            backbone: params[..n_block].iter().map(|(_, t)| make(lr.backbone, t)).collect(),
            shaping: params[n_block..].iter().map(|(_, t)| make(lr.shaping, t)).collect(),
            prototypes: make(lr.prototypes, &model.prototypes.matrix()),
            head: make(lr.head, &model.head.weights),
        }
    }
}

fn check_classes(model: &Model, data: &LabeledImages) -> Result<()> {
    let m = model.classes();
    let mut counts = vec![0usize; m];
    for &y in &data.labels {
        if y >= m {
            return Err(Error::LabelOutOfRange { label: y, classes: m });
        }
        counts[y] += 1;
    }
    match counts.iter().position(|&c| c == 0) {
        Some(c) => Err(Error::EmptyClass(c)),
        None => Ok(()),
    }
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train(
    model: &mut Model,
    train_set: &LabeledImages,
    test_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_classes(model, train_set)?;
    let mut opt = Optimizers::new(model, cfg);
    let mut report = TrainReport::default();
    let eval_set = test_set.unwrap_or(train_set);
    let test_accuracy = |model: &Model| -> Result<Option<f64>> {
        test_set
            .map(|t| model.accuracy(&t.images, &t.labels))
            .transpose()
    };

    for epoch in 1..=cfg.epochs {
        let joint = epoch > cfg.warmup_epochs;
        let trainable = Trainable {
            backbone: joint,
            shaping: true,
            prototypes: true,
            head: true,
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(rng::mix(&[cfg.seed, epoch as u64]), rng::STREAM_SHUFFLE));

        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let images = batch
                .iter()
                .map(|&i| training_view(&train_set.images[i], cfg, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, hits) = train_step(model, &mut opt, &images, &labels, cfg, trainable)?;
            if !loss.total.is_finite() || loss.total > cfg.divergence_threshold {
                return Err(Error::Divergence { epoch, loss: loss.total });
            }
            let w = batch.len() as f64;
            sum.total += w * loss.total;
            sum.cross_entropy += w * loss.cross_entropy;
            sum.clst += w * loss.clst;
            sum.sep += w * loss.sep;
            sum.l1_head += w * loss.l1_head;
            correct += hits;
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown {
            total: sum.total / n,
            cross_entropy: sum.cross_entropy / n,
            clst: sum.clst / n,
            sep: sum.sep / n,
            l1_head: sum.l1_head / n,
        };

        let pushed = cfg.is_push_epoch(epoch);
        if pushed {
            let accuracy_before = model.accuracy(&eval_set.images, &eval_set.labels)?;
            push_prototypes(model, train_set, cfg.push_augmentations, cfg.seed, epoch)?;
            let accuracy_after_push = model.accuracy(&eval_set.images, &eval_set.labels)?;
            let losses = refit_head(
                model,
                train_set,
                cfg.head_refit_iterations,
                cfg,
                rng::mix(&[cfg.seed, epoch as u64]),
            )?;
            let accuracy_after_refit = model.accuracy(&eval_set.images, &eval_set.labels)?;
            log::info!(
                "epoch {epoch}: push accuracy {accuracy_before:.4} -> {accuracy_after_push:.4} -> refit {accuracy_after_refit:.4}"
            );
            report.pushes.push(PushEvent {
                epoch,
                accuracy_before,
                accuracy_after_push,
                accuracy_after_refit,
                refit_loss: losses.first().zip(losses.last()).map(|(a, b)| (*a, *b)),
            });
        }
        let test_accuracy = test_accuracy(model)?;
        log::info!(
            "epoch {epoch}: loss {:.5} (ce {:.5}, clst {:.5}, sep {:.5}) train acc {:.4} test acc {}",
            loss.total,
            loss.cross_entropy,
            loss.clst,
            loss.sep,
            correct as f64 / n,
            test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        model.trained_epochs += 1;
        report.epochs.push(EpochLog {
            epoch,
            loss,
            train_accuracy: correct as f64 / n,
            test_accuracy,
            pushed,
        });
    }
    Ok(report)
}

fn training_view(image: &Tensor, cfg: &TrainConfig, epoch: usize, index: usize) -> Result<Tensor> {
    if cfg.augment_probability == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = rng::stream(
        rng::mix(&[cfg.seed, epoch as u64, index as u64]),
        rng::STREAM_TRAIN_AUGMENT,
    );
    if rng.gen::<f64>() < cfg.augment_probability {
        Ok(random_augmentation(image, &mut rng)?.0)
    } else {
        Ok(image.clone())
    }
}

fn train_step(
    model: &mut Model,
    opt: &mut Optimizers,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    trainable: Trainable,
) -> Result<(LossBreakdown, usize)> {
    let g = Graph::new();
    let vars = model.bind(&g, trainable);
    let x = g.constant(stack(images)?);
    let pass = model.forward(&g, &vars, x)?;
    let loss = loss_terms(&g, model, &vars, &pass, labels, cfg)?;
    let breakdown = loss.read(&g);
    let hits = {
        let logits = g.value(pass.logits);
        logits
            .data()
            .chunks(model.classes())
            .zip(labels)
            .filter(|(row, &y)| tensor::argmax(row) == y)
            .count()
    };
    let mut grads = g.backward(loss.total)?;

    let n_block = 2 * model.backbone.blocks.len();
    let param_vars: Vec<Var> = vars.backbone.all().collect();
    let params = model.backbone.parameters_mut();
    for (i, (p, v)) in params.into_iter().zip(param_vars).enumerate() {
        let Some(grad) = grads.take(v) else { continue };
        let o = if i < n_block {
            &mut opt.backbone[i]
        } else {
            &mut opt.shaping[i - n_block]
        };
        o.step(p.data_mut(), &grad);
    }
    if let Some(grad) = grads.take(vars.prototypes) {
        let mut m = model.prototypes.matrix();
        opt.prototypes.step(m.data_mut(), &grad);
        model.prototypes.set_matrix(&m)?;
    }
    if let Some(grad) = grads.take(vars.head) {
        opt.head.step(model.head.weights.data_mut(), &grad);
    }
    Ok((breakdown, hits))
}

/// Augmented view `r` (1-based) of the source image of prototype `j`.
fn push_view(image: &Tensor, seed: u64, epoch: usize, j: usize, r: usize) -> Result<Tensor> {
    let mut rng = rng::stream(
        rng::mix(&[seed, epoch as u64, j as u64, r as u64]),
        rng::STREAM_PUSH,
    );
    Ok(random_augmentation(image, &mut rng)?.0)
}

fn nearest_row(z: &Tensor, p: &[f64]) -> (usize, f64) {
    let d = p.len();
    let dists: Vec<f64> = z
        .data()
        .chunks(d)
        .map(|row| row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let i = tensor::argmin(&dists);
    (i, dists[i])
}

/// Projects every prototype onto the training images of its class.
///
/// The source image of `p_j` is the class image holding the masked vector
/// nearest to `p_j`. Its unaugmented version and `R − 1` seeded
/// augmentations each contribute their nearest masked vector, and `p_j`
/// becomes their mean.
pub fn push_prototypes(
    model: &mut Model,
    train_set: &LabeledImages,
    augmentations: usize,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    if augmentations == 0 {
        return Err(Error::InvalidArgument("push needs at least one view per prototype".into()));
    }
    let classes: Vec<usize> = model.prototypes.class_ids();
    let mut by_class = vec![Vec::new(); model.classes()];
    for (i, &y) in train_set.labels.iter().enumerate() {
        if y >= by_class.len() {
            return Err(Error::LabelOutOfRange { label: y, classes: by_class.len() });
        }
        by_class[y].push(i);
    }
    if let Some(&c) = classes.iter().find(|&&c| by_class[c].is_empty()) {
        return Err(Error::EmptyClass(c));
    }
    let z_all = model.masked_features_batch(&train_set.images)?;

    let mut updates = Vec::with_capacity(classes.len());
    for (j, proto) in model.prototypes.prototypes.iter().enumerate() {
        let p = &proto.vector;
        let (mut best_img, mut best_mask, mut best_d) = (usize::MAX, 0, f64::INFINITY);
        for &i in &by_class[proto.class_id] {
            let (e, d) = nearest_row(&z_all[i], p);
            if d < best_d {
                (best_img, best_mask, best_d) = (i, e, d);
            }
        }
        let source = &train_set.images[best_img];
        let views = (1..augmentations)
            .map(|r| push_view(source, seed, epoch, j, r))
            .collect::<Result<Vec<_>>>()?;
        let z_views = if views.is_empty() {
            Vec::new()
        } else {
            model.masked_features_batch(&views)?
        };
        let d = p.len();
        let mut mask_ids = vec![best_mask];
        let mut source_vectors = vec![z_all[best_img].data()[best_mask * d..][..d].to_vec()];
        for z in &z_views {
            let (e, _) = nearest_row(z, p);
            mask_ids.push(e);
            source_vectors.push(z.data()[e * d..][..d].to_vec());
        }
        let mean: Vec<f64> = (0..d)
            .map(|k| source_vectors.iter().map(|v| v[k]).sum::<f64>() / augmentations as f64)
            .collect();
        updates.push((
            mean,
            PrototypeSource {
                image_index: best_img,
                image_id: train_set.ids.get(best_img).cloned().unwrap_or_default(),
                epoch,
                mask_ids,
                augmentations,
                source_vectors,
                source_image: Some(source.clone()),
            },
        ));
    }
    for (proto, (vector, source)) in model.prototypes.prototypes.iter_mut().zip(updates) {
        proto.vector = vector;
        proto.source = Some(source);
    }
    Ok(())
}

/// Refits only the head for `iterations` passes over the training set,
/// with backbone and prototypes frozen. Returns the mean loss of each pass.
pub fn refit_head(
    model: &mut Model,
    train_set: &LabeledImages,
    iterations: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if iterations == 0 {
        return Ok(Vec::new());
    }
    let acts = model.activations_batch(&train_set.images)?;
    let k = model.prototypes.len();
    let m = model.classes();
    let class_ids = model.prototypes.class_ids();
    let off: Vec<f64> = ClassifierHead::off_class_mask(m, &class_ids)
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let off = Tensor::new(vec![m, k], off)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rates.head, m * k);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(rng::mix(&[seed, it as u64]), rng::STREAM_SHUFFLE));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let a: Vec<f64> = batch.iter().flat_map(|&i| acts[i].iter().copied()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let g = Graph::new();
            let head = g.leaf(model.head.weights.clone(), true);
            let a = g.constant(Tensor::new(vec![batch.len(), k], a)?);
            let logits = g.matmul(a, g.transpose(head)?)?;
            let ce = g.softmax_cross_entropy(logits, &labels)?;
            let l1 = g.sum(g.abs(g.mul(head, g.constant(off.clone()))?));
            let loss = g.add(ce, g.mul_scalar(l1, cfg.lambda3))?;
            total += g.scalar(loss) * batch.len() as f64;
            let grads = g.backward(loss)?;
            if let Some(grad) = grads.get(head) {
                opt.step(model.head.weights.data_mut(), grad);
            }
        }
        losses.push(total / train_set.len() as f64);
    }
    Ok(losses)
}
