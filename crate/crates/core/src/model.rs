//! The full classifier: backbone, shaping layers, mask pool, prototypes and
//! head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{checked_image, Backbone, BackboneConfig, BackboneVars, FeatureMap};
use crate::error::{Error, Result};
use crate::protolayer::{ClassifierHead, MaskPool, PrototypeSet};
use crate::rng;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoLayerConfig {
    pub prototypes_per_class: usize,
    pub feature_masks: usize,
    pub epsilon: f64,
}

impl Default for ProtoLayerConfig {
    fn default() -> Self {
        ProtoLayerConfig {
            prototypes_per_class: 10,
            feature_masks: 64,
            epsilon: 1e-12,
        }
    }
}

impl ProtoLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes_per_class == 0 || self.feature_masks == 0 {
            return Err(Error::InvalidConfig(
                "prototypes_per_class and feature_masks must be >= 1".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub shaping: bool,
    pub prototypes: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        shaping: false,
        prototypes: false,
        head: false,
    };
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub prototypes: Var,
    pub head: Var,
}

/// Graph nodes of one forward pass over a batch of `N` images.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// `[N, H1, W1, D1]`
    pub features: Var,
    /// `[N, n, D1]` masked feature vectors.
    pub masked: Var,
    /// `[N, n, K]` squared distances.
    pub distances: Var,
    /// `[N, K]` distance to the closest masked vector.
    pub min_distances: Var,
    /// `[N, K]`
    pub activations: Var,
    /// `[N, m]`
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
    /// Activation `g_j` per prototype.
    pub activations: Vec<f64>,
    /// Index of the mask attaining each prototype's activation.
    pub nearest_masks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub masks: MaskPool,
    pub prototypes: PrototypeSet,
    pub head: ClassifierHead,
    pub proto_config: ProtoLayerConfig,
    pub class_names: Vec<String>,
    /// Epochs of training applied so far.
    pub trained_epochs: usize,
}

impl Model {
    pub fn new(
        backbone: &BackboneConfig,
        proto: &ProtoLayerConfig,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        proto.validate()?;
        if class_names.is_empty() {
            return Err(Error::InvalidConfig("at least one class is required".into()));
        }
        let backbone = Backbone::new(backbone, rng::mix(&[seed, rng::STREAM_BACKBONE]))?;
        let fshape = backbone.feature_shape();
        let masks = MaskPool::generate(proto.feature_masks, fshape, rng::mix(&[seed, rng::STREAM_MASKS]))?;
        let prototypes = PrototypeSet::init(
            class_names.len(),
            proto.prototypes_per_class,
            fshape[2],
            rng::mix(&[seed, rng::STREAM_PROTOTYPES]),
        )?;
        let head = ClassifierHead::init(class_names.len(), &prototypes.class_ids());
        Ok(Model {
            backbone,
            masks,
            prototypes,
            head,
            proto_config: proto.clone(),
            class_names,
            trained_epochs: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.backbone.input_shape()
    }

    pub fn epsilon(&self) -> f64 {
        self.proto_config.epsilon
    }

    pub fn bind(&self, g: &Graph, train: Trainable) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind(g, train.backbone, train.shaping),
            prototypes: g.leaf(self.prototypes.matrix(), train.prototypes),
            head: g.leaf(self.head.weights.clone(), train.head),
        }
    }

    /// Runs the network on `[N, H, W, C]` images.
    pub fn forward(&self, g: &Graph, vars: &ModelVars, images: Var) -> Result<ForwardPass> {
        let features = self.backbone.forward(g, &vars.backbone, images)?;
        self.forward_from_features(g, vars, features)
    }

    pub fn forward_from_features(&self, g: &Graph, vars: &ModelVars, features: Var) -> Result<ForwardPass> {
        let selection: Vec<usize> = (0..self.masks.len()).collect();
        let masked = g.masked_gap(features, self.masks.shared(), &selection)?;
        let distances = g.pairwise_sq_dist(masked, vars.prototypes)?;
        let min_distances = g.min_axis(distances, 1)?;
        let activations = log_activation(g, min_distances, self.epsilon())?;
        let logits = self.logits_from_activations(g, vars, activations)?;
        Ok(ForwardPass {
            features,
            masked,
            distances,
            min_distances,
            activations,
            logits,
        })
    }

    pub fn logits_from_activations(&self, g: &Graph, vars: &ModelVars, activations: Var) -> Result<Var> {
        let wt = g.transpose(vars.head)?;
        g.matmul(activations, wt)
    }

    pub fn feature_map(&self, image: &Tensor) -> Result<FeatureMap> {
        self.backbone.extract_features(image)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let image = checked_image(image, self.input_shape())?;
        let g = Graph::new();
        let vars = self.bind(&g, Trainable::NONE);
        let x = g.constant(stack(std::slice::from_ref(&image))?);
        let pass = self.forward(&g, &vars, x)?;
        let logits = g.to_tensor(pass.logits).into_data();
        let activations = g.to_tensor(pass.activations).into_data();
        let k = self.prototypes.len();
        let dist = g.value(pass.distances);
        let nearest_masks = (0..k)
            .map(|j| {
                let col: Vec<f64> = dist.data().chunks(k).map(|row| row[j]).collect();
                tensor::argmin(&col)
            })
            .collect();
        Ok(Prediction {
            probabilities: tensor::softmax(&logits),
            class: tensor::argmax(&logits),
            logits,
            activations,
            nearest_masks,
        })
    }

    /// Predictions for many images, evaluated in parallel.
    pub fn predict_all(&self, images: &[Tensor]) -> Result<Vec<Prediction>> {
        images.par_iter().map(|im| self.predict(im)).collect()
    }

    /// Class probabilities for one image.
    pub fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict(image)?.probabilities)
    }

    /// Runs `read` on the forward pass of each chunk of images (in
    /// parallel across chunks) and concatenates the per-image results.
    fn map_batches<T: Send>(
        &self,
        images: &[Tensor],
        read: impl Fn(&Graph, &ForwardPass) -> Vec<T> + Sync,
    ) -> Result<Vec<T>> {
        let chunks: Vec<Vec<T>> = images
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let g = Graph::new();
                let vars = self.bind(&g, Trainable::NONE);
                let x = g.constant(stack(chunk)?);
                let pass = self.forward(&g, &vars, x)?;
                Ok(read(&g, &pass))
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Logits per image.
    pub fn logits_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let m = self.classes();
        self.map_batches(images, |g, pass| {
            g.value(pass.logits).data().chunks(m).map(<[f64]>::to_vec).collect()
        })
    }

    /// Prototype activations `[K]` per image.
    pub fn activations_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let k = self.prototypes.len();
        self.map_batches(images, |g, pass| {
            g.value(pass.activations).data().chunks(k).map(<[f64]>::to_vec).collect()
        })
    }

    /// Masked feature vectors `[n, D1]` per image.
    pub fn masked_features_batch(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let [_, _, d] = self.backbone.feature_shape();
        let n = self.masks.len();
        self.map_batches(images, |g, pass| {
            g.value(pass.masked)
                .data()
                .chunks(n * d)
                .map(|c| Tensor::new(vec![n, d], c.to_vec()).expect("consistent shape"))
                .collect()
        })
    }

    /// Fraction of images whose arg-max logit equals the label.
    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        if images.len() != labels.len() {
            return Err(Error::shape("accuracy", format!("{} images, {} labels", images.len(), labels.len())));
        }
        if images.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits_batch(images)?;
        let correct = logits.iter().zip(labels).filter(|(l, &y)| tensor::argmax(l) == y).count();
        Ok(correct as f64 / images.len() as f64)
    }
}

const INFERENCE_CHUNK: usize = 32;

/// `ln(s + 1) − ln(s + ε)` applied elementwise.
pub fn log_activation(g: &Graph, s: Var, epsilon: f64) -> Result<Var> {
    let num = g.ln(g.add_scalar(s, 1.0));
    let den = g.ln(g.add_scalar(s, epsilon));
    g.sub(num, den)
}

/// Stacks `[H, W, C]` images into one `[N, H, W, C]` tensor.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protolayer::class_logits;

    fn small() -> Model {
        let cfg = BackboneConfig::default();
        let proto = ProtoLayerConfig {
            prototypes_per_class: 2,
            feature_masks: 5,
            epsilon: 1e-12,
        };
        Model::new(&cfg, &proto, vec!["a".into(), "b".into()], 3).unwrap()
    }

    #[test]
    fn graph_forward_matches_reference_path() {
        let m = small();
        let [h, w, c] = m.input_shape();
        let image = Tensor::new(
            vec![h, w, c],
            (0..h * w * c).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        let pred = m.predict(&image).unwrap();
        let f = m.feature_map(&image).unwrap();
        let reference = class_logits(&f, &m.prototypes, &m.head, &m.masks, m.epsilon()).unwrap();
        for (a, b) in pred.logits.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let proto = ProtoLayerConfig { epsilon: 0.0, ..Default::default() };
        assert!(Model::new(&BackboneConfig::default(), &proto, vec!["a".into()], 0).is_err());
    }
}
