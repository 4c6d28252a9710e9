//! Feature extractor: a stack of conv/ReLU/max-pool blocks followed by a
//! pointwise shaping network (1×1 conv → ReLU → 1×1 conv).

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window (and stride); 1 disables pooling.
    pub pool: usize,
}

impl ConvBlockSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        ConvBlockSpec {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }
}

/// Activation applied after the second shaping convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// (H, W, C) of input images.
    pub input_size: [usize; 3],
    pub conv_blocks: Vec<ConvBlockSpec>,
    /// Channel count D1 of the feature map.
    pub shaping_channels: usize,
    /// Spatial extent (H1, W1) of the feature map.
    pub target_grid: [usize; 2],
    pub final_activation: FinalActivation,
    /// Pixel value subtracted from every input. Masking an image means
    /// pulling pixels toward this value.
    pub input_mean: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: [56, 56, 3],
            conv_blocks: vec![
                ConvBlockSpec::new(16, 3, 1, 2),
                ConvBlockSpec::new(32, 3, 1, 2),
                ConvBlockSpec::new(32, 3, 1, 2),
            ],
            shaping_channels: 32,
            target_grid: [7, 7],
            final_activation: FinalActivation::Relu,
            input_mean: 0.5,
        }
    }
}

impl BackboneConfig {
    /// Checks every invariant and returns the feature-map shape
    /// `[H1, W1, D1]`.
    pub fn validate(&self) -> Result<[usize; 3]> {
        let [h, w, c] = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size must be positive, got {:?}",
                self.input_size
            )));
        }
        if !(0.0..=1.0).contains(&self.input_mean) {
            return Err(Error::InvalidConfig(format!("input_mean must be in [0, 1], got {}", self.input_mean)));
        }
        if self.shaping_channels == 0 {
            return Err(Error::InvalidConfig("shaping_channels (D1) must be >= 1".into()));
        }
        let (mut h, mut w) = (h, w);
        let mut trace = format!("{h}x{w}x{c}");
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: channels, kernel, stride and pool must be positive ({b:?})"
                )));
            }
            let pad = b.kernel / 2;
            if h + 2 * pad < b.kernel || w + 2 * pad < b.kernel {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel {} larger than padded input ({trace})",
                    b.kernel
                )));
            }
            h = (h + 2 * pad - b.kernel) / b.stride + 1;
            w = (w + 2 * pad - b.kernel) / b.stride + 1;
            let _ = write!(trace, " -> conv{}x{}/{} {h}x{w}x{}", b.kernel, b.kernel, b.stride, b.out_channels);
            if b.pool > 1 {
                if h < b.pool || w < b.pool {
                    return Err(Error::InvalidConfig(format!(
                        "block {i}: pool {} larger than {h}x{w} ({trace})",
                        b.pool
                    )));
                }
                h = (h - b.pool) / b.pool + 1;
                w = (w - b.pool) / b.pool + 1;
                let _ = write!(trace, " -> pool{} {h}x{w}", b.pool);
            }
        }
        let _ = write!(trace, " -> shaping 1x1 {h}x{w}x{}", self.shaping_channels);
        if [h, w] != self.target_grid {
            return Err(Error::InvalidConfig(format!(
                "blocks produce a {h}x{w} grid but target_grid is {}x{} (shape trace: {trace})",
                self.target_grid[0], self.target_grid[1]
            )));
        }
        Ok([h, w, self.shaping_channels])
    }

    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        self.validate()
    }
}

/// One convolution with HWIO weights and a bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn init(rng: &mut impl Rng, kernel: usize, in_c: usize, out_c: usize, stride: usize) -> Self {
        let fan_in = (kernel * kernel * in_c) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..kernel * kernel * in_c * out_c)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ConvLayer {
            weight: Tensor::new(vec![kernel, kernel, in_c, out_c], weight).expect("consistent shape"),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding: kernel / 2,
        }
    }
}

/// The feature map `F(x)` of one image, `[H1, W1, D1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    feature_shape: [usize; 3],
    pub blocks: Vec<ConvLayer>,
    pub shaping: [ConvLayer; 2],
}

/// Graph handles for a bound [`Backbone`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub blocks: Vec<(Var, Var)>,
    pub shaping: [(Var, Var); 2],
}

impl BackboneVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.blocks
            .iter()
            .chain(self.shaping.iter())
            .flat_map(|&(w, b)| [w, b])
    }
}

impl Backbone {
    /// Builds a network with seeded fan-in-scaled uniform weights and zero
    /// biases.
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let feature_shape = config.validate()?;
        let mut rng = rng::stream(seed, rng::STREAM_BACKBONE);
        let mut in_c = config.input_size[2];
        let mut blocks = Vec::with_capacity(config.conv_blocks.len());
        for b in &config.conv_blocks {
            blocks.push(ConvLayer::init(&mut rng, b.kernel, in_c, b.out_channels, b.stride));
            in_c = b.out_channels;
        }
        let d1 = config.shaping_channels;
        let shaping = [
            ConvLayer::init(&mut rng, 1, in_c, d1, 1),
            ConvLayer::init(&mut rng, 1, d1, d1, 1),
        ];
        Ok(Backbone {
            config: config.clone(),
            feature_shape,
            blocks,
            shaping,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[H1, W1, D1]`.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_size
    }

    pub fn bind(&self, g: &Graph, train_blocks: bool, train_shaping: bool) -> BackboneVars {
        let bind = |l: &ConvLayer, grad: bool| {
            (g.leaf(l.weight.clone(), grad), g.leaf(l.bias.clone(), grad))
        };
        BackboneVars {
            blocks: self.blocks.iter().map(|l| bind(l, train_blocks)).collect(),
            shaping: [bind(&self.shaping[0], train_shaping), bind(&self.shaping[1], train_shaping)],
        }
    }

    /// Maps `[N, H, W, C]` images to `[N, H1, W1, D1]` feature maps.
    pub fn forward(&self, g: &Graph, vars: &BackboneVars, images: Var) -> Result<Var> {
        let shape = g.shape(images);
        let [h, w, c] = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::shape(
                "backbone",
                format!("expected [N, {h}, {w}, {c}] images, got {shape:?}"),
            ));
        }
        let mut x = g.add_scalar(images, -self.config.input_mean);
        for ((layer, spec), &(wv, bv)) in self.blocks.iter().zip(&self.config.conv_blocks).zip(&vars.blocks) {
            x = g.conv2d(x, wv, Some(bv), layer.stride, layer.padding)?;
            x = g.relu(x);
            if spec.pool > 1 {
                x = g.max_pool2d(x, spec.pool, spec.pool)?;
            }
        }
        let [(w0, b0), (w1, b1)] = vars.shaping;
        x = g.conv2d(x, w0, Some(b0), 1, 0)?;
        x = g.relu(x);
        x = g.conv2d(x, w1, Some(b1), 1, 0)?;
        if self.config.final_activation == FinalActivation::Relu {
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Feature map of a single `[H, W, C]` image. Pixels outside [0, 1] are
    /// clamped with a warning.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureMap> {
        let image = checked_image(image, self.config.input_size)?;
        let g = Graph::new();
        let vars = self.bind(&g, false, false);
        let [h, w, c] = self.config.input_size;
        let x = g.constant(image.reshape(&[1, h, w, c])?);
        let f = self.forward(&g, &vars, x)?;
        let [h1, w1, d1] = self.feature_shape;
        Ok(FeatureMap(g.to_tensor(f).reshape(&[h1, w1, d1])?))
    }

    /// Parameter tensors in a fixed order: block weights and biases, then
    /// shaping weights and biases.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.weight"), &l.weight));
            out.push((format!("backbone.block{i}.bias"), &l.bias));
        }
        for (i, l) in self.shaping.iter().enumerate() {
            out.push((format!("shaping.{i}.weight"), &l.weight));
            out.push((format!("shaping.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.blocks.iter_mut().chain(self.shaping.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

/// Validates an `[H, W, C]` image against the expected size and clamps
/// out-of-range pixels.
pub fn checked_image(image: &Tensor, expected: [usize; 3]) -> Result<Tensor> {
    if image.shape() != expected {
        return Err(Error::shape(
            "image",
            format!("expected {expected:?}, got {:?}", image.shape()),
        ));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("image has pixels outside [0, 1]; clamping");
        return Ok(image.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
    }
    Ok(image.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_gives_seven_by_seven() {
        assert_eq!(BackboneConfig::default().validate().unwrap(), [7, 7, 32]);
    }

    #[test]
    fn mismatched_grid_is_rejected_with_trace() {
        let cfg = BackboneConfig {
            input_size: [64, 64, 3],
            ..BackboneConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("8x8") && err.contains("7x7") && err.contains("64x64x3"), "{err}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = BackboneConfig::default();
        assert_eq!(Backbone::new(&cfg, 9).unwrap(), Backbone::new(&cfg, 9).unwrap());
        assert_ne!(Backbone::new(&cfg, 9).unwrap(), Backbone::new(&cfg, 10).unwrap());
    }

    #[test]
    fn feature_map_shape_and_finiteness() {
        let net = Backbone::new(&BackboneConfig::default(), 1).unwrap();
        let f = net.extract_features(&Tensor::zeros(&[56, 56, 3])).unwrap();
        assert_eq!(f.tensor().shape(), &[7, 7, 32]);
        assert!(f.tensor().is_finite());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let net = Backbone::new(&BackboneConfig::default(), 1).unwrap();
        assert!(net.extract_features(&Tensor::zeros(&[32, 32, 3])).is_err());
    }
}
