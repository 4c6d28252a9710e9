//! Procedural shape images with pixel-exact ground-truth regions.
//!
//! Each image shows one class-determining shape (its kind and fill color
//! are fixed per class) over a noisy gray background, plus optional small
//! distractor shapes drawn in a palette shared by all classes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Entry, Manifest, Split, MANIFEST_VERSION};
use super::pnm;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

/// Class vocabulary: shape kind, fill color and class name.
pub const CLASS_VOCABULARY: [(ShapeKind, [f64; 3], &str); 6] = [
    (ShapeKind::Square, [0.85, 0.15, 0.15], "red_square"),
    (ShapeKind::Circle, [0.15, 0.75, 0.2], "green_circle"),
    (ShapeKind::Triangle, [0.15, 0.3, 0.9], "blue_triangle"),
    (ShapeKind::Cross, [0.95, 0.85, 0.1], "yellow_cross"),
    (ShapeKind::Diamond, [0.8, 0.2, 0.85], "magenta_diamond"),
    (ShapeKind::Ring, [0.1, 0.85, 0.85], "cyan_ring"),
];

/// Distractor fills, shared across classes and distinct from every class
/// color.
pub const DISTRACTOR_PALETTE: [[f64; 3]; 4] = [
    [0.2, 0.2, 0.2],
    [0.8, 0.8, 0.8],
    [0.6, 0.45, 0.3],
    [0.35, 0.4, 0.45],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Center in pixel coordinates (column, row).
    pub center: [f64; 2],
    /// Half extent of the bounding square, in pixels.
    pub radius: f64,
    pub color: [f64; 3],
}

impl ShapeParams {
    /// Whether the pixel whose center is `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let r = self.radius;
        match self.kind {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => {
                // apex up, base on the bottom edge of the bounding square
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
            ShapeKind::Cross => {
                let arm = 0.4 * r;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }

    pub fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
            .collect()
    }

    /// Whether the bounding square lies fully inside an `h × w` frame.
    pub fn in_frame(&self, h: usize, w: usize) -> bool {
        let [cx, cy] = self.center;
        cx - self.radius >= 0.0
            && cy - self.radius >= 0.0
            && cx + self.radius <= w as f64
            && cy + self.radius <= h as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Distractor shapes per image.
    pub clutter: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Class-shape radius range as fractions of the image side.
    pub radius_range: [f64; 2],
    pub distractor_radius_range: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            per_class: 200,
            image_size: 56,
            clutter: 2,
            noise: 0.03,
            seed: 0,
            train_fraction: 0.8,
            radius_range: [0.2, 0.26],
            distractor_radius_range: [0.06, 0.1],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.classes == 0 || self.classes > CLASS_VOCABULARY.len() {
            return fail(format!("classes must be in 1..={}", CLASS_VOCABULARY.len()));
        }
        if self.per_class == 0 {
            return fail("per_class must be >= 1".into());
        }
        if self.image_size < 8 {
            return fail("image_size must be >= 8".into());
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return fail("train_fraction must lie in [0, 1]".into());
        }
        for (name, [lo, hi]) in [
            ("radius_range", self.radius_range),
            ("distractor_radius_range", self.distractor_radius_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < 0.5) {
                return fail(format!("{name} must satisfy 0 < lo <= hi < 0.5"));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_VOCABULARY[..self.classes].iter().map(|c| c.2.to_string()).collect()
    }

    /// Number of training images per class.
    pub fn train_per_class(&self) -> usize {
        (self.per_class as f64 * self.train_fraction).round() as usize
    }
}

/// One rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub label: usize,
    pub shape: ShapeParams,
    pub distractors: Vec<ShapeParams>,
}

fn random_shape<R: Rng>(
    rng: &mut R,
    kind: ShapeKind,
    color: [f64; 3],
    size: usize,
    range: [f64; 2],
) -> ShapeParams {
    let s = size as f64;
    let radius = rng.gen_range(range[0]..=range[1]) * s;
    let center = [rng.gen_range(radius..=s - radius), rng.gen_range(radius..=s - radius)];
    ShapeParams { kind, center, radius, color }
}

/// Renders the sample with index `index` deterministically from the spec.
pub fn render_sample(spec: &SyntheticSpec, index: usize, label: usize) -> Sample {
    let mut rng = rng::stream(rng::mix(&[spec.seed, index as u64]), rng::STREAM_DATASET);
    let n = spec.image_size;
    let (kind, color, _) = CLASS_VOCABULARY[label];
    let shape = random_shape(&mut rng, kind, color, n, spec.radius_range);
    let distractors: Vec<ShapeParams> = (0..spec.clutter)
        .map(|_| {
            let kind = CLASS_VOCABULARY[rng.gen_range(0..spec.classes)].0;
            let color = DISTRACTOR_PALETTE[rng.gen_range(0..DISTRACTOR_PALETTE.len())];
            random_shape(&mut rng, kind, color, n, spec.distractor_radius_range)
        })
        .collect();

    let mut pixels = vec![[BACKGROUND; 3]; n * n];
    for d in &distractors {
        for (p, inside) in pixels.iter_mut().zip(d.rasterize(n, n)) {
            if inside {
                *p = d.color;
            }
        }
    }
    let mask = shape.rasterize(n, n);
    for (p, &inside) in pixels.iter_mut().zip(&mask) {
        if inside {
            *p = shape.color;
        }
    }
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = pixels
        .iter()
        .flat_map(|p| *p)
        .map(|v| {
            let noisy = if spec.noise > 0.0 { v + normal.sample(&mut rng) } else { v };
            // quantized exactly as stored on disk
            (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    Sample {
        image: Tensor::new(vec![n, n, 3], data).expect("consistent shape"),
        mask,
        label,
        shape,
        distractors,
    }
}

/// `(index, label, split)` for every sample, class-interleaved.
pub fn layout(spec: &SyntheticSpec) -> Vec<(usize, usize, Split)> {
    let train = spec.train_per_class();
    (0..spec.per_class)
        .flat_map(|j| {
            (0..spec.classes).map(move |c| {
                let split = if j < train { Split::Train } else { Split::Test };
                (j * spec.classes + c, c, split)
            })
        })
        .collect()
}

/// Writes images, ground-truth masks and `manifest.json` under `out_dir`.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = spec.image_size;
    let entries = layout(spec)
        .into_par_iter()
        .map(|(idx, label, split)| {
            let s = render_sample(spec, idx, label);
            let image = format!("images/{idx:05}.ppm");
            let mask = format!("masks/{idx:05}.pgm");
            pnm::write(&out_dir.join(&image), &s.image)?;
            pnm::write_mask(&out_dir.join(&mask), &s.mask, n, n)?;
            Ok(Entry {
                image,
                label,
                mask: Some(mask),
                split,
                shape: Some(s.shape),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: Some(spec.seed),
        image_size: [n, n, 3],
        classes: spec.class_names(),
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
