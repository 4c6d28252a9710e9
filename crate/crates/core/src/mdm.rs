//! Multiple dynamic masks: saliency by activation-consistent mask
//! optimization.
//!
//! For each of `D` coarse grids `d_i` (sizes `a_i × b_i`), the grid is
//! upsampled to the image, multiplied into it, and optimized so that a
//! detection node keeps its original response while the mask stays small:
//!
//! `L_i = ‖node(g(d_i)·x) − target‖² + η · mean|d_i|`
//!
//! The upsampled grids are summed, thresholded at `γ` and min-max
//! normalized into a class activation map.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::checked_image;
use crate::colormap;
use crate::dataset::pnm;
use crate::error::{Error, Result};
use crate::model::{Model, Trainable};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdmConfig {
    /// `(a_i, b_i)` per scale.
    pub grid_sizes: Vec<[usize; 2]>,
    /// Initial mask value.
    pub tau: f64,
    /// Regularization weight, shared by all scales. Scales with the
    /// feature depth: 10 at D1 = 512, 0.625 at the default D1 = 32.
    pub eta: f64,
    /// CAM threshold on the summed upsampled grids.
    pub gamma: f64,
    pub steps: usize,
    pub lr: f64,
    /// Heatmap blend weights of the image and the colorized CAM.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MdmConfig {
    fn default() -> Self {
        MdmConfig {
            grid_sizes: (1..=10).map(|i| [5 + i, 5 + i]).collect(),
            tau: 0.5,
            eta: 0.625,
            gamma: 3.0,
            steps: 800,
            lr: 0.05,
            alpha: 0.5,
            beta: 0.3,
        }
    }
}

impl MdmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.grid_sizes.is_empty() || self.grid_sizes.iter().any(|g| g[0] == 0 || g[1] == 0) {
            return fail("mdm needs at least one non-empty grid");
        }
        for (i, a) in self.grid_sizes.iter().enumerate() {
            if self.grid_sizes[..i].contains(a) {
                return fail("mdm grid sizes must be pairwise distinct");
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau must lie in [0, 1]");
        }
        if !(self.eta >= 0.0 && self.lr > 0.0 && self.steps > 0) {
            return fail("mdm needs eta >= 0, lr > 0 and steps >= 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be non-negative");
        }
        Ok(())
    }
}

/// A trained (or initial) mask grid of one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVector {
    pub scale: usize,
    pub grid: [usize; 2],
    /// Row-major `a × b` values in [0, 1].
    pub values: Vec<f64>,
    pub eta: f64,
    pub trained: bool,
    /// Loss before each step.
    #[serde(skip)]
    pub losses: Vec<f64>,
}

impl MaskVector {
    pub fn new(scale: usize, grid: [usize; 2], tau: f64, eta: f64) -> Self {
        MaskVector {
            scale,
            grid,
            values: vec![tau; grid[0] * grid[1]],
            eta,
            trained: false,
            losses: Vec::new(),
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Whether the mean loss of the last 100 steps is no larger than that
    /// of the 100 steps before.
    pub fn tail_non_increasing(&self) -> bool {
        let n = self.losses.len();
        if n < 200 {
            return true;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.losses[n - 100..]) <= mean(&self.losses[n - 200..n - 100]) + 1e-12
    }

    pub fn upsampled(&self, h: usize, w: usize) -> Vec<f64> {
        crate::autodiff::kernels::upsample(&self.values, self.grid[0], self.grid[1], h, w)
    }
}

/// What a prototype node's masked response is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeTarget {
    /// The masked vector of the unmasked input.
    OriginalActivation,
    /// The prototype vector itself.
    Prototype,
}

type ScalarFn<'a> = Box<dyn Fn(&Graph, Var) -> Result<Var> + Send + Sync + 'a>;

pub enum NodeKind<'a> {
    /// Masked feature vector `z_j` of a trained model, `j` frozen.
    Prototype {
        model: &'a Model,
        prototype: usize,
        mask_index: usize,
        target: NodeTarget,
    },
    /// Arbitrary differentiable map from an `[H, W, C]` image.
    Custom(ScalarFn<'a>),
}

/// A network quantity whose response the masks must preserve.
pub struct DetectionNode<'a> {
    pub kind: NodeKind<'a>,
    /// Value the masked response is pulled toward.
    pub target: Vec<f64>,
    /// Pixel value a zero mask leaves behind.
    pub fill: f64,
}

impl fmt::Debug for DetectionNode<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            NodeKind::Prototype { prototype, mask_index, target, .. } => f
                .debug_struct("DetectionNode")
                .field("prototype", prototype)
                .field("mask_index", mask_index)
                .field("target", target)
                .finish(),
            NodeKind::Custom(_) => f.debug_struct("DetectionNode").field("kind", &"custom").finish(),
        }
    }
}

impl<'a> DetectionNode<'a> {
    pub fn custom(f: impl Fn(&Graph, Var) -> Result<Var> + Send + Sync + 'a, target: Vec<f64>) -> Self {
        DetectionNode {
            kind: NodeKind::Custom(Box::new(f)),
            target,
            fill: 0.0,
        }
    }

    /// Node response to an `[H, W, C]` image variable.
    pub fn eval(&self, g: &Graph, image: Var) -> Result<Var> {
        match &self.kind {
            NodeKind::Prototype { model, mask_index, .. } => {
                let [h, w, c] = model.input_shape();
                let vars = model.bind(g, Trainable::NONE);
                let x = g.reshape(image, &[1, h, w, c])?;
                let f = model.backbone.forward(g, &vars.backbone, x)?;
                let z = g.masked_gap(f, model.masks.shared(), &[*mask_index])?;
                g.reshape(z, &[model.backbone.feature_shape()[2]])
            }
            NodeKind::Custom(f) => f(g, image),
        }
    }

    /// Node response to a concrete image.
    pub fn response(&self, image: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let v = self.eval(&g, x)?;
        Ok(g.to_tensor(v).into_data())
    }
}

/// Information about the node chosen to explain a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub predicted_class: usize,
    pub prototype: usize,
    /// `w_{c,t} · g_t(x)`.
    pub contribution: f64,
    /// Mask index nearest to the prototype on the input (`j_x`).
    pub mask_index: usize,
    /// Mask index nearest to the prototype on its source image.
    pub source_mask_index: Option<usize>,
}

/// Picks the predicted-class prototype with the largest logit contribution
/// (ties to the lowest id) and freezes its nearest mask on `x`.
pub fn select_detection_node<'a>(model: &'a Model, x: &Tensor) -> Result<(DetectionNode<'a>, NodeInfo)> {
    if model.trained_epochs == 0 {
        return Err(Error::InvalidArgument(
            "cannot select a detection node on an untrained model".into(),
        ));
    }
    let pred = model.predict(x)?;
    let c = pred.class;
    let k = model.prototypes.len();
    let w = &model.head.weights.data()[c * k..(c + 1) * k];
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in model.prototypes.prototypes.iter().enumerate() {
        if p.class_id != c {
            continue;
        }
        let contrib = w[j] * pred.activations[j];
        if best.map_or(true, |(_, b)| contrib > b) {
            best = Some((j, contrib));
        }
    }
    let (t, contribution) =
        best.ok_or_else(|| Error::InvalidArgument(format!("class {c} has no prototypes")))?;
    let mask_index = pred.nearest_masks[t];
    let [_, _, d] = model.backbone.feature_shape();
    let z = model.masked_features_batch(std::slice::from_ref(x))?;
    let target = z[0].data()[mask_index * d..(mask_index + 1) * d].to_vec();
    Ok((
        DetectionNode {
            kind: NodeKind::Prototype {
                model,
                prototype: t,
                mask_index,
                target: NodeTarget::OriginalActivation,
            },
            target,
            fill: model.backbone.config().input_mean,
        },
        NodeInfo {
            predicted_class: c,
            prototype: t,
            contribution,
            mask_index,
            source_mask_index: None,
        },
    ))
}

/// Node for the source image of prototype `t`, targeting `p_t` itself.
pub fn prototype_image_node(model: &Model, t: usize) -> Result<Option<(DetectionNode<'_>, Tensor, usize)>> {
    let proto = model
        .prototypes
        .prototypes
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("no prototype {t}")))?;
    let Some(image) = proto.source.as_ref().and_then(|s| s.source_image.clone()) else {
        return Ok(None);
    };
    let [_, _, d] = model.backbone.feature_shape();
    let z = model.masked_features_batch(std::slice::from_ref(&image))?;
    let dists: Vec<f64> = z[0]
        .data()
        .chunks(d)
        .map(|row| row.iter().zip(&proto.vector).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mask_index = tensor::argmin(&dists);
    let node = DetectionNode {
        kind: NodeKind::Prototype {
            model,
            prototype: t,
            mask_index,
            target: NodeTarget::Prototype,
        },
        target: proto.vector.clone(),
        fill: model.backbone.config().input_mean,
    };
    Ok(Some((node, image, mask_index)))
}

/// Optimizes one mask grid by projected gradient descent. The mask acts on
/// `x - fill`, so masked-out pixels take the value `fill`.
pub fn optimize_mask_vector(
    node: &DetectionNode<'_>,
    x: &Tensor,
    scale: usize,
    grid: [usize; 2],
    cfg: &MdmConfig,
) -> Result<MaskVector> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("mdm", format!("expected an [H, W, C] image, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if grid[0] == 0 || grid[1] == 0 || grid[0] > h || grid[1] > w {
        return Err(Error::InvalidArgument(format!(
            "mask grid {}x{} does not fit a {h}x{w} image",
            grid[0], grid[1]
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("mask optimization needs at least one step".into()));
    }
    let mut mv = MaskVector::new(scale, grid, cfg.tau, cfg.eta);
    mv.losses.reserve(cfg.steps);
    let centered = x.map(|v| v - node.fill);
    for step in 0..cfg.steps {
        let g = Graph::new();
        let d = g.leaf(Tensor::new(grid.to_vec(), mv.values.clone())?, true);
        let image = g.constant(centered.clone());
        let target = g.constant(Tensor::vector(node.target.clone()));
        let up = g.upsample_bilinear(d, h, w)?;
        let masked = g.add_scalar(g.scale_channels(up, image)?, node.fill);
        let response = node.eval(&g, masked)?;
        let response = g.reshape(response, &[node.target.len()])?;
        let fit = g.sq_dist(response, target)?;
        let reg = g.mul_scalar(g.mean(g.abs(d)), cfg.eta);
        let loss = g.add(fit, reg)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("mask loss at scale {scale}, step {step}: {value}")));
        }
        mv.losses.push(value);
        let grads = g.backward(loss)?;
        if let Some(grad) = grads.get(d) {
            for (v, gr) in mv.values.iter_mut().zip(grad) {
                *v = (*v - cfg.lr * gr).clamp(0.0, 1.0);
            }
        }
    }
    if !mv.tail_non_increasing() {
        log::warn!("mask loss at scale {scale} rose over the last 100 steps");
    }
    mv.trained = true;
    Ok(mv)
}

/// Optimizes every configured scale (in parallel).
pub fn optimize_all(node: &DetectionNode<'_>, x: &Tensor, cfg: &MdmConfig) -> Result<Vec<MaskVector>> {
    cfg.validate()?;
    cfg.grid_sizes
        .par_iter()
        .enumerate()
        .map(|(i, &grid)| optimize_mask_vector(node, x, i + 1, grid, cfg))
        .collect()
}

/// Class activation map in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    /// `[H, W]`
    pub values: Tensor,
    /// Pixels whose summed grids reach `gamma`; cleared when the map is
    /// identically zero.
    pub region: Vec<bool>,
    pub gamma: f64,
    pub scales: Vec<usize>,
}

/// `N(1[S ≥ γ] ∘ S)` with `S = Σ_i upsample(d_i)`.
pub fn mix_cam(vectors: &[MaskVector], gamma: f64, h: usize, w: usize) -> Result<Cam> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("mix_cam needs at least one mask vector".into()));
    }
    let mut sum = vec![0.0; h * w];
    for v in vectors {
        for (s, u) in sum.iter_mut().zip(v.upsampled(h, w)) {
            *s += u;
        }
    }
    Ok(cam_from_sum(&sum, gamma, h, w, vectors.iter().map(|v| v.scale).collect()))
}

pub fn cam_from_sum(sum: &[f64], gamma: f64, h: usize, w: usize, scales: Vec<usize>) -> Cam {
    let mut region: Vec<bool> = sum.iter().map(|&s| s >= gamma).collect();
    let kept: Vec<f64> = sum.iter().zip(&region).map(|(&s, &b)| if b { s } else { 0.0 }).collect();
    let (lo, hi) = kept
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let values = if hi > lo {
        kept.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        region.iter_mut().for_each(|b| *b = false);
        vec![0.0; h * w]
    };
    Cam {
        values: Tensor::new(vec![h, w], values).expect("consistent shape"),
        region,
        gamma,
        scales,
    }
}

/// Heatmap `α·x + β·color(cam)` and binary image `region ∘ x`, both
/// clamped to [0, 1].
pub fn render_explanations(x: &Tensor, cam: &Cam, alpha: f64, beta: f64) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if s.len() != 3 || s[..2] != cam.values.shape()[..] {
        return Err(Error::shape(
            "render_explanations",
            format!("image {s:?} vs cam {:?}", cam.values.shape()),
        ));
    }
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument("alpha and beta must be non-negative".into()));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut heat = Vec::with_capacity(h * w * 3);
    let mut binary = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        let px = &x.data()[p * c..(p + 1) * c];
        let rgb = |k: usize| if c == 3 { px[k] } else { px[0] };
        let col = colormap::color(cam.values.data()[p]);
        for k in 0..3 {
            heat.push((alpha * rgb(k) + beta * col[k]).clamp(0.0, 1.0));
            binary.push(if cam.region[p] { rgb(k).clamp(0.0, 1.0) } else { 0.0 });
        }
    }
    Ok((Tensor::new(vec![h, w, 3], heat)?, Tensor::new(vec![h, w, 3], binary)?))
}

/// Saliency of the input only: selects the node and mixes its CAM.
pub fn explain_input(model: &Model, x: &Tensor, cfg: &MdmConfig) -> Result<(Cam, NodeInfo, Vec<MaskVector>)> {
    let x = checked_image(x, model.input_shape())?;
    let (node, info) = select_detection_node(model, &x)?;
    let vectors = optimize_all(&node, &x, cfg)?;
    let [h, w, _] = model.input_shape();
    Ok((mix_cam(&vectors, cfg.gamma, h, w)?, info, vectors))
}

/// Artifacts for one side (input or prototype source) of an explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationSide {
    pub image: Tensor,
    pub cam: Cam,
    pub heatmap: Tensor,
    pub binary: Tensor,
    pub vectors: Vec<MaskVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationBundle {
    pub node: NodeInfo,
    pub input: ExplanationSide,
    /// Absent when the prototype was never projected onto an image.
    pub prototype: Option<ExplanationSide>,
    pub config: MdmConfig,
}

#[derive(Serialize)]
struct BundleSideJson<'a> {
    final_losses: Vec<Option<f64>>,
    grids: Vec<[usize; 2]>,
    region_fraction: f64,
    masks: Vec<&'a [f64]>,
}

#[derive(Serialize)]
struct BundleJson<'a> {
    node: &'a NodeInfo,
    class_name: &'a str,
    gamma: f64,
    scales: usize,
    config: &'a MdmConfig,
    input: BundleSideJson<'a>,
    prototype: Option<BundleSideJson<'a>>,
}

impl ExplanationBundle {
    /// Writes `cam_*.ppm` (grayscale), `heatmap_*.ppm`, `binary_*.ppm`,
    /// `prototype_source.ppm` and `bundle.json` into `dir`.
    pub fn save(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut sides = vec![("x", &self.input)];
        if let Some(p) = &self.prototype {
            sides.push(("prototype", p));
            pnm::write(&dir.join("prototype_source.ppm"), &p.image)?;
        }
        for (name, side) in sides {
            write_gray(&dir.join(format!("cam_{name}.ppm")), &side.cam.values)?;
            pnm::write(&dir.join(format!("heatmap_{name}.ppm")), &side.heatmap)?;
            pnm::write(&dir.join(format!("binary_{name}.ppm")), &side.binary)?;
        }
        let json = BundleJson {
            node: &self.node,
            class_name: class_names.get(self.node.predicted_class).map_or("", String::as_str),
            gamma: self.config.gamma,
            scales: self.config.grid_sizes.len(),
            config: &self.config,
            input: side_json(&self.input),
            prototype: self.prototype.as_ref().map(side_json),
        };
        let path = dir.join("bundle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn side_json(s: &ExplanationSide) -> BundleSideJson<'_> {
    BundleSideJson {
        final_losses: s.vectors.iter().map(MaskVector::final_loss).collect(),
        grids: s.vectors.iter().map(|v| v.grid).collect(),
        region_fraction: s.cam.region.iter().filter(|&&b| b).count() as f64 / s.cam.region.len() as f64,
        masks: s.vectors.iter().map(|v| v.values.as_slice()).collect(),
    }
}

fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    pnm::write(path, &map.clone().reshape(&[s[0], s[1], 1])?)
}

fn side(image: Tensor, vectors: Vec<MaskVector>, cfg: &MdmConfig) -> Result<ExplanationSide> {
    let [h, w] = [image.shape()[0], image.shape()[1]];
    let cam = mix_cam(&vectors, cfg.gamma, h, w)?;
    let (heatmap, binary) = render_explanations(&image, &cam, cfg.alpha, cfg.beta)?;
    Ok(ExplanationSide {
        image,
        cam,
        heatmap,
        binary,
        vectors,
    })
}

/// Full explanation of one prediction: CAMs of the input and of the
/// selected prototype's source image.
pub fn explain(model: &Model, x: &Tensor, cfg: &MdmConfig) -> Result<ExplanationBundle> {
    cfg.validate()?;
    let x = checked_image(x, model.input_shape())?;
    let (node, mut info) = select_detection_node(model, &x)?;
    let proto = prototype_image_node(model, info.prototype)?;
    if proto.is_none() {
        log::warn!(
            "prototype {} has no source image; explaining the input only",
            info.prototype
        );
    }
    // all 2·D grid optimizations are independent
    let mut jobs: Vec<(&DetectionNode, &Tensor, usize, [usize; 2])> = cfg
        .grid_sizes
        .iter()
        .enumerate()
        .map(|(i, &g)| (&node, &x, i + 1, g))
        .collect();
    if let Some((pnode, pimage, _)) = &proto {
        jobs.extend(cfg.grid_sizes.iter().enumerate().map(|(i, &g)| (pnode, pimage, i + 1, g)));
    }
    let mut vectors = jobs
        .into_par_iter()
        .map(|(n, im, i, g)| optimize_mask_vector(n, im, i, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let proto_vectors = vectors.split_off(cfg.grid_sizes.len());
    let input = side(x, vectors, cfg)?;
    let prototype = match proto {
        Some((_, image, j)) => {
            info.source_mask_index = Some(j);
            Some(side(image, proto_vectors, cfg)?)
        }
        None => None,
    };
    Ok(ExplanationBundle {
        node: info,
        input,
        prototype,
        config: cfg.clone(),
    })
}

/// Per-region response of the controlled node used by the ordering harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionResponse {
    /// `I_r · m_r`
    Linear,
    /// `I_r · (2m_r − m_r²)`: increasing and concave, with slope ordered by
    /// `I_r` at every mask value.
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub contributions: Vec<f64>,
    pub masks: Vec<f64>,
    /// Pairs `(a, b, (I_a − I_b)(m_a − m_b))` below `−tol`.
    pub violations: Vec<(usize, usize, f64)>,
    pub spearman: f64,
}

/// Optimizes a `1 × R` mask against a node that is additive over `R`
/// disjoint single-pixel regions with contributions `I_r`, then checks
/// `(I_a − I_b)(m_a − m_b) ≥ −tol` for every pair.
pub fn ordering_property_harness(
    contributions: &[f64],
    response: RegionResponse,
    eta: f64,
    tol: f64,
    cfg: &MdmConfig,
) -> Result<OrderingReport> {
    let r = contributions.len();
    if r == 0 {
        return Err(Error::InvalidArgument("need at least one region".into()));
    }
    let weights = Tensor::new(vec![1, r, 1], contributions.to_vec())?;
    let node = DetectionNode::custom(
        move |g: &Graph, image: Var| {
            let w = g.constant(weights.clone());
            let per = match response {
                RegionResponse::Linear => image,
                RegionResponse::Saturating => g.sub(g.mul_scalar(image, 2.0), g.square(image))?,
            };
            let out = g.sum(g.mul(per, w)?);
            g.reshape(out, &[1])
        },
        vec![0.0],
    );
    let image = Tensor::full(&[1, r, 1], 1.0);
    let target = node.response(&image)?;
    let node = DetectionNode { target, ..node };
    let run_cfg = MdmConfig { eta, ..cfg.clone() };
    let mv = optimize_mask_vector(&node, &image, 1, [1, r], &run_cfg)?;
    let mut violations = Vec::new();
    for a in 0..r {
        for b in a + 1..r {
            let v = (contributions[a] - contributions[b]) * (mv.values[a] - mv.values[b]);
            if v < -tol {
                violations.push((a, b, v));
            }
        }
    }
    Ok(OrderingReport {
        contributions: contributions.to_vec(),
        spearman: spearman(contributions, &mv.values),
        masks: mv.values,
        violations,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(eta: f64) -> f64 {
        let node = DetectionNode::custom(|g: &Graph, x: Var| g.reshape(x, &[1]), vec![1.0]);
        let x = Tensor::full(&[1, 1, 1], 1.0);
        let cfg = MdmConfig { eta, ..Default::default() };
        optimize_mask_vector(&node, &x, 1, [1, 1], &cfg).unwrap().values[0]
    }

    #[test]
    fn single_cell_closed_form() {
        for eta in [0.1, 0.2, 0.5] {
            assert!((single_cell(eta) - (1.0 - eta / 2.0)).abs() < 1e-3);
        }
        assert!((single_cell(0.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ignored_region_decays_to_zero() {
        let node = DetectionNode::custom(|g: &Graph, _x: Var| Ok(g.constant(Tensor::vector(vec![2.0]))), vec![2.0]);
        let x = Tensor::full(&[2, 2, 1], 1.0);
        let mv = optimize_mask_vector(&node, &x, 1, [2, 2], &MdmConfig { eta: 1.0, ..Default::default() }).unwrap();
        assert!(mv.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mix_cam_hand_case() {
        let cam = cam_from_sum(&[4.0, 3.0, 2.0, 1.0], 3.0, 2, 2, vec![1]);
        assert_eq!(cam.values.data(), &[1.0, 0.75, 0.0, 0.0]);
        assert_eq!(cam.region, vec![true, true, false, false]);
    }

    #[test]
    fn constant_field_below_threshold_is_zero() {
        let v = MaskVector { values: vec![0.5; 4], ..MaskVector::new(1, [2, 2], 0.5, 1.0) };
        let w = MaskVector { scale: 2, ..v.clone() };
        let cam = mix_cam(&[v, w], 3.0, 4, 4).unwrap();
        assert!(cam.values.data().iter().all(|&x| x == 0.0));
        assert!(cam.region.iter().all(|&b| !b));
    }

    #[test]
    fn render_cases() {
        let x = Tensor::full(&[1, 1, 3], 1.0);
        let cam = Cam {
            values: Tensor::full(&[1, 1], 1.0),
            region: vec![true],
            gamma: 0.0,
            scales: vec![1],
        };
        let (heat, bin) = render_explanations(&x, &cam, 0.5, 0.3).unwrap();
        assert!((heat.data()[0] - 0.8).abs() < 1e-12);
        assert_eq!(bin.data(), x.data());
        let (ident, _) = render_explanations(&x, &cam, 1.0, 0.0).unwrap();
        assert_eq!(ident, x);
        let zero = Cam { values: Tensor::zeros(&[1, 1]), region: vec![false], ..cam };
        let (_, bin) = render_explanations(&x, &zero, 0.5, 0.3).unwrap();
        assert!(bin.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ordering_two_regions() {
        let r = ordering_property_harness(&[0.9, 0.1], RegionResponse::Saturating, 0.2, 1e-3, &MdmConfig::default())
            .unwrap();
        assert!(r.violations.is_empty());
        assert!(r.masks[0] >= r.masks[1]);
        let eq = ordering_property_harness(&[0.5, 0.5], RegionResponse::Linear, 0.2, 1e-3, &MdmConfig::default())
            .unwrap();
        assert!((eq.masks[0] - eq.masks[1]).abs() <= 1e-3);
    }
}
