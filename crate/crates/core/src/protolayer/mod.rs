//! Unrestricted feature masks, prototypes, similarity scores and the
//! prototype-to-class head.
//!
//! A feature mask `M_i` is an `[H1, W1, D1]` array with entries in [0, 1].
//! Applied to a feature map `F` it yields the vector
//! `z_i = GAP(M_i ∘ F)`, i.e. `z_i[d] = mean_{h,w} M_i[h,w,d]·F[h,w,d]`.
//! A prototype activates on an image through its closest masked vector:
//! `g = max_i ln((‖z_i − p‖² + 1) / (‖z_i − p‖² + ε))`.

mod expressiveness;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use expressiveness::{
    containment_witness, count_rect_patch_prototypes, count_unit_patch_prototypes,
    enumerate_rect_patches, RectPatchCount, WitnessStyle,
};

/// A frozen random mask over the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    pub id: usize,
    pub values: Tensor,
}

/// Draws `n` masks with i.i.d. uniform [0, 1] entries.
pub fn generate_feature_masks(n: usize, shape: [usize; 3], seed: u64) -> Result<Vec<FeatureMask>> {
    Ok(MaskPool::generate(n, shape, seed)?.masks())
}

/// Contiguous storage for the whole mask pool, `[n, H1, W1, D1]`.
///
/// The buffer is shared (never copied) by every graph that pools features
/// through it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPool {
    shape: [usize; 3],
    data: Arc<Vec<f64>>,
}

impl MaskPool {
    pub fn generate(n: usize, shape: [usize; 3], seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("feature mask count must be >= 1".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("invalid mask shape {shape:?}")));
        }
        let mut rng = rng::stream(seed, rng::STREAM_MASKS);
        let len = n * shape.iter().product::<usize>();
        let data = (0..len).map(|_| rng.gen::<f64>()).collect();
        Ok(MaskPool {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_data(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || data.is_empty() || data.len() % per != 0 {
            return Err(Error::shape(
                "mask pool",
                format!("{} values for masks of shape {shape:?}", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("feature mask values must lie in [0, 1]".into()));
        }
        Ok(MaskPool {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_masks(masks: &[FeatureMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty mask list".into()))?;
        let shape: [usize; 3] = first
            .values
            .shape()
            .try_into()
            .map_err(|_| Error::shape("mask pool", format!("{:?}", first.values.shape())))?;
        let mut data = Vec::with_capacity(masks.len() * first.values.numel());
        for m in masks {
            if m.values.shape() != shape {
                return Err(Error::shape(
                    "mask pool",
                    format!("{:?} vs {:?}", m.values.shape(), shape),
                ));
            }
            data.extend_from_slice(m.values.data());
        }
        Self::from_data(shape, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn shared(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self, i: usize) -> FeatureMask {
        let per: usize = self.shape.iter().product();
        FeatureMask {
            id: i,
            values: Tensor::new(self.shape.to_vec(), self.data[i * per..(i + 1) * per].to_vec())
                .expect("consistent shape"),
        }
    }

    pub fn masks(&self) -> Vec<FeatureMask> {
        (0..self.len()).map(|i| self.mask(i)).collect()
    }

    /// All masked feature vectors `z_i` of one feature map, `n × D1`.
    pub fn masked_features(&self, f: &FeatureMap) -> Result<Vec<Vec<f64>>> {
        if f.tensor().shape() != self.shape {
            return Err(Error::shape(
                "masked_feature",
                format!("feature map {:?} vs masks {:?}", f.tensor().shape(), self.shape),
            ));
        }
        let per: usize = self.shape.iter().product();
        Ok(self
            .data
            .chunks(per)
            .map(|m| masked_gap(f.tensor().data(), m, self.shape[2]))
            .collect())
    }
}

fn masked_gap(features: &[f64], mask: &[f64], channels: usize) -> Vec<f64> {
    let mut z = vec![0.0; channels];
    for (fp, mp) in features.chunks(channels).zip(mask.chunks(channels)) {
        for d in 0..channels {
            z[d] += fp[d] * mp[d];
        }
    }
    let spatial = (features.len() / channels) as f64;
    z.iter_mut().for_each(|v| *v /= spatial);
    z
}

/// `z = GAP(M ∘ F)`: per-channel mean of the masked feature map.
pub fn masked_feature(f: &FeatureMap, m: &FeatureMask) -> Result<Vec<f64>> {
    let (fs, ms) = (f.tensor().shape(), m.values.shape());
    if fs != ms || fs.len() != 3 {
        return Err(Error::shape("masked_feature", format!("feature map {fs:?} vs mask {ms:?}")));
    }
    Ok(masked_gap(f.tensor().data(), m.values.data(), fs[2]))
}

/// Squared Euclidean distance `‖z − p‖²`.
pub fn similarity(z: &[f64], p: &[f64]) -> Result<f64> {
    if z.len() != p.len() {
        return Err(Error::shape("similarity", format!("{} vs {}", z.len(), p.len())));
    }
    Ok(z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `ln((s + 1) / (s + ε))`, strictly decreasing in `s`.
pub fn log_activation(s: f64, epsilon: f64) -> f64 {
    (s + 1.0).ln() - (s + epsilon).ln()
}

/// Provenance recorded when a prototype is projected onto training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSource {
    /// Index of the source image in the training split.
    pub image_index: usize,
    /// Dataset identifier of the source image (its manifest path).
    pub image_id: String,
    pub epoch: usize,
    /// Nearest mask index per augmented view.
    pub mask_ids: Vec<usize>,
    /// Number of views R averaged into the prototype.
    pub augmentations: usize,
    /// Nearest masked vector per view; the prototype is their mean.
    pub source_vectors: Vec<Vec<f64>>,
    /// The unaugmented source image, `[H, W, C]`.
    #[serde(skip)]
    pub source_image: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub id: usize,
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub source: Option<PrototypeSource>,
}

/// All prototypes, grouped by class in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Prototype>,
    dim: usize,
}

impl PrototypeSet {
    /// `per_class` prototypes for each of `classes` classes, initialized
    /// uniformly in [0, 1).
    pub fn init(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "need classes, prototypes per class and D1 >= 1 (got {classes}, {per_class}, {dim})"
            )));
        }
        let mut rng = rng::stream(seed, rng::STREAM_PROTOTYPES);
        let prototypes = (0..classes * per_class)
            .map(|j| Prototype {
                id: j,
                vector: (0..dim).map(|_| rng.gen::<f64>()).collect(),
                class_id: j / per_class,
                source: None,
            })
            .collect();
        Ok(PrototypeSet { prototypes, dim })
    }

    pub fn from_prototypes(prototypes: Vec<Prototype>) -> Result<Self> {
        let dim = prototypes
            .first()
            .map(|p| p.vector.len())
            .ok_or_else(|| Error::InvalidArgument("empty prototype set".into()))?;
        if prototypes.iter().any(|p| p.vector.len() != dim) {
            return Err(Error::shape("prototypes", "prototype vectors differ in length"));
        }
        Ok(PrototypeSet { prototypes, dim })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    /// `[K, D1]` matrix of prototype vectors.
    pub fn matrix(&self) -> Tensor {
        let data = self.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect();
        Tensor::new(vec![self.len(), self.dim], data).expect("consistent shape")
    }

    pub fn set_matrix(&mut self, m: &Tensor) -> Result<()> {
        if m.shape() != [self.len(), self.dim] {
            return Err(Error::shape(
                "prototypes",
                format!("{:?} vs [{}, {}]", m.shape(), self.len(), self.dim),
            ));
        }
        for (p, row) in self.prototypes.iter_mut().zip(m.data().chunks(self.dim)) {
            p.vector.copy_from_slice(row);
        }
        Ok(())
    }

    pub fn has_provenance(&self) -> bool {
        self.prototypes.iter().all(|p| p.source.is_some())
    }
}

/// Fully connected layer from prototype activations to class logits,
/// weights `[m, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Tensor,
}

impl ClassifierHead {
    /// Weight 1 from each prototype to its own class and −0.5 elsewhere.
    pub fn init(classes: usize, class_ids: &[usize]) -> Self {
        let k = class_ids.len();
        let mut w = vec![-0.5; classes * k];
        for (j, &c) in class_ids.iter().enumerate() {
            w[c * k + j] = 1.0;
        }
        ClassifierHead {
            weights: Tensor::new(vec![classes, k], w).expect("consistent shape"),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn prototypes(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Row-major `[m, K]` flags marking weights from prototypes of other
    /// classes.
    pub fn off_class_mask(classes: usize, class_ids: &[usize]) -> Vec<bool> {
        let k = class_ids.len();
        (0..classes * k).map(|i| class_ids[i % k] != i / k).collect()
    }

    /// `logit_c = Σ_j w_{c,j} · g_j`.
    pub fn logits(&self, activations: &[f64]) -> Result<Vec<f64>> {
        let k = self.prototypes();
        if activations.len() != k {
            return Err(Error::shape(
                "class_logits",
                format!("{} activations for {k} prototypes", activations.len()),
            ));
        }
        Ok(self
            .weights
            .data()
            .chunks(k)
            .map(|row| row.iter().zip(activations).map(|(w, g)| w * g).sum())
            .collect())
    }
}

/// Activation of one prototype on a feature map and the index of the mask
/// attaining it (ties toward the lowest index).
pub fn prototype_activation(
    f: &FeatureMap,
    p: &Prototype,
    masks: &MaskPool,
    epsilon: f64,
) -> Result<(f64, usize)> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("empty mask list".into()));
    }
    let z = masks.masked_features(f)?;
    let dists = z
        .iter()
        .map(|zi| similarity(zi, &p.vector))
        .collect::<Result<Vec<_>>>()?;
    let best = crate::tensor::argmin(&dists);
    Ok((log_activation(dists[best], epsilon), best))
}

/// Class logits of one feature map.
pub fn class_logits(
    f: &FeatureMap,
    prototypes: &PrototypeSet,
    head: &ClassifierHead,
    masks: &MaskPool,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if head.prototypes() != prototypes.len() {
        return Err(Error::shape(
            "class_logits",
            format!("head has {} columns for {} prototypes", head.prototypes(), prototypes.len()),
        ));
    }
    let acts = prototypes
        .prototypes
        .iter()
        .map(|p| prototype_activation(f, p, masks, epsilon).map(|(g, _)| g))
        .collect::<Result<Vec<_>>>()?;
    head.logits(&acts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(shape: [usize; 3], data: Vec<f64>) -> FeatureMap {
        FeatureMap(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn masks_are_seeded_and_in_range() {
        let a = generate_feature_masks(3, [7, 7, 4], 7).unwrap();
        let b = generate_feature_masks(3, [7, 7, 4], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.values.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(generate_feature_masks(0, [7, 7, 4], 7).is_err());
    }

    #[test]
    fn identity_and_zero_masks() {
        let f = fmap([2, 2, 2], vec![3.0, 5.0, 3.0, 5.0, 3.0, 5.0, 3.0, 5.0]);
        let ones = FeatureMask { id: 0, values: Tensor::full(&[2, 2, 2], 1.0) };
        let zeros = FeatureMask { id: 1, values: Tensor::zeros(&[2, 2, 2]) };
        assert_eq!(masked_feature(&f, &ones).unwrap(), vec![3.0, 5.0]);
        assert_eq!(masked_feature(&f, &zeros).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn masked_feature_hand_value() {
        let f = fmap([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let m = FeatureMask { id: 0, values: Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
        assert_eq!(masked_feature(&f, &m).unwrap(), vec![1.25]);
        let bad = FeatureMask { id: 0, values: Tensor::zeros(&[2, 1, 1]) };
        assert!(masked_feature(&f, &bad).is_err());
    }

    #[test]
    fn similarity_cases() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(similarity(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn activation_values() {
        let eps = 1e-12;
        assert!((log_activation(0.0, eps) - 27.631_021_115_928_547).abs() < 1e-9);
        assert!((log_activation(1.0, eps) - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(log_activation(1e12, eps) < 1e-11 && log_activation(1e12, eps) > 0.0);
    }

    #[test]
    fn activation_picks_matching_mask() {
        let f = fmap([1, 1, 1], vec![2.0]);
        let pool = MaskPool::from_data([1, 1, 1], vec![0.25, 0.5, 0.5]).unwrap();
        let p = Prototype { id: 0, vector: vec![1.0], class_id: 0, source: None };
        let (g, idx) = prototype_activation(&f, &p, &pool, 1e-12).unwrap();
        assert_eq!(idx, 1);
        assert!((g - log_activation(0.0, 1e-12)).abs() < 1e-12);
    }

    #[test]
    fn head_init_and_logits() {
        let head = ClassifierHead::init(2, &[0, 0, 1]);
        assert_eq!(head.weights.data(), &[1.0, 1.0, -0.5, -0.5, -0.5, 1.0]);
        assert_eq!(
            ClassifierHead::off_class_mask(2, &[0, 0, 1]),
            vec![false, false, true, true, true, false]
        );
        let single = ClassifierHead { weights: Tensor::new(vec![1, 1], vec![2.0]).unwrap() };
        assert_eq!(single.logits(&[0.5]).unwrap(), vec![1.0]);
        let zero = ClassifierHead { weights: Tensor::zeros(&[2, 3]) };
        assert_eq!(zero.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(zero.logits(&[1.0]).is_err());
    }
}
