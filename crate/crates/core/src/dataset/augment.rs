//! Geometric augmentations: rotation, perspective, shear and elastic
//! distortion.
//!
//! Every transform is an inverse warp with bilinear sampling. Samples that
//! fall outside the frame take the background color, estimated as the mean
//! of the border pixels.

use std::str::FromStr;

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Rotation,
    Perspective,
    Shear,
    Distortion,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Rotation,
        AugmentKind::Perspective,
        AugmentKind::Shear,
        AugmentKind::Distortion,
    ];

    /// Largest magnitude drawn by [`random_augmentation`]: degrees for
    /// rotation, shear factor, corner jitter as a fraction of the side, and
    /// pixels of elastic displacement.
    pub fn max_magnitude(self) -> f64 {
        match self {
            AugmentKind::Rotation => 25.0,
            AugmentKind::Perspective => 0.1,
            AugmentKind::Shear => 0.2,
            AugmentKind::Distortion => 3.0,
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(AugmentKind::Rotation),
            "perspective" => Ok(AugmentKind::Perspective),
            "shear" => Ok(AugmentKind::Shear),
            "distortion" => Ok(AugmentKind::Distortion),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation {other:?} (expected rotation, perspective, shear or distortion)"
            ))),
        }
    }
}

/// Applies one transform to an `[H, W, C]` image.
///
/// Rotation and shear are fully determined by `magnitude` (signed); the
/// perspective and distortion fields are drawn from `seed`.
pub fn augment(image: &Tensor, kind: AugmentKind, magnitude: f64, seed: u64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("augment", format!("expected [H, W, C], got {s:?}")));
    }
    if !magnitude.is_finite() {
        return Err(Error::InvalidArgument(format!("augmentation magnitude {magnitude}")));
    }
    let (h, w) = (s[0], s[1]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut rng = rng::stream(seed, rng::STREAM_TRAIN_AUGMENT);
    let out = match kind {
        AugmentKind::Rotation => {
            let (sin, cos) = (-magnitude.to_radians()).sin_cos();
            warp(image, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
            })
        }
        AugmentKind::Shear => warp(image, |x, y| (x + magnitude * (y - cy), y)),
        AugmentKind::Perspective => {
            let j = magnitude.abs();
            let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
            let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
            let mut jittered = corners;
            for c in jittered.iter_mut() {
                c.0 += rng.gen_range(-1.0..=1.0) * j * w as f64;
                c.1 += rng.gen_range(-1.0..=1.0) * j * h as f64;
            }
            let hm = homography(&corners, &jittered)
                .ok_or_else(|| Error::NonFinite("degenerate perspective transform".into()))?;
            warp(image, |x, y| {
                let z = hm[(2, 0)] * x + hm[(2, 1)] * y + hm[(2, 2)];
                (
                    (hm[(0, 0)] * x + hm[(0, 1)] * y + hm[(0, 2)]) / z,
                    (hm[(1, 0)] * x + hm[(1, 1)] * y + hm[(1, 2)]) / z,
                )
            })
        }
        AugmentKind::Distortion => {
            const GRID: usize = 4;
            let m = magnitude.abs();
            let mut field = |_| -> Vec<f64> {
                let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-1.0..=1.0) * m).collect();
                kernels::upsample(&coarse, GRID, GRID, h, w)
            };
            let (fx, fy) = (field(0), field(1));
            warp(image, |x, y| {
                let i = y as usize * w + x as usize;
                (x + fx[i], y + fy[i])
            })
        }
    };
    Tensor::new(s.to_vec(), out)
}

/// Draws a kind uniformly and a magnitude within its documented range.
pub fn random_augmentation<R: Rng>(image: &Tensor, rng: &mut R) -> Result<(Tensor, AugmentKind, f64)> {
    let kind = AugmentKind::ALL[rng.gen_range(0..4)];
    let max = kind.max_magnitude();
    let magnitude = match kind {
        AugmentKind::Rotation | AugmentKind::Shear => rng.gen_range(-max..=max),
        _ => rng.gen_range(0.0..=max),
    };
    let out = augment(image, kind, magnitude, rng.gen())?;
    Ok((out, kind, magnitude))
}

fn border_mean(image: &Tensor) -> Vec<f64> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut sum = vec![0.0; c];
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                let p = &image.data()[(y * w + x) * c..][..c];
                sum.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                n += 1.0;
            }
        }
    }
    sum.into_iter().map(|v| v / n).collect()
}

/// Inverse warp: output pixel `(x, y)` samples the input at `src(x, y)`.
fn warp(image: &Tensor, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let fill = border_mean(image);
    let data = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            for ch in 0..c {
                let tap = |xi: f64, yi: f64| -> f64 {
                    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 || !xi.is_finite() {
                        fill[ch]
                    } else {
                        data[(yi as usize * w + xi as usize) * c + ch]
                    }
                };
                let top = tap(x0, y0) * (1.0 - tx) + tap(x0 + 1.0, y0) * tx;
                let bottom = tap(x0, y0 + 1.0) * (1.0 - tx) + tap(x0 + 1.0, y0 + 1.0) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Projective map taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::new(
            vec![9, 11, 3],
            (0..9 * 11 * 3).map(|i| ((i * 7919) % 97) as f64 / 96.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let im = image();
        assert_eq!(augment(&im, AugmentKind::Rotation, 0.0, 1).unwrap(), im);
    }

    #[test]
    fn full_turn_is_identity() {
        let im = image();
        let out = augment(&im, AugmentKind::Rotation, 360.0, 1).unwrap();
        assert!(out.max_abs_diff(&im) <= 0.02);
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let im = image();
        for kind in [AugmentKind::Shear, AugmentKind::Perspective, AugmentKind::Distortion] {
            let out = augment(&im, kind, 0.0, 5).unwrap();
            assert!(out.max_abs_diff(&im) < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn seeded_and_same_size() {
        let im = image();
        for kind in AugmentKind::ALL {
            let a = augment(&im, kind, kind.max_magnitude(), 11).unwrap();
            let b = augment(&im, kind, kind.max_magnitude(), 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), im.shape());
        }
    }

    #[test]
    fn unknown_kind() {
        assert!("blur".parse::<AugmentKind>().is_err());
        assert_eq!("shear".parse::<AugmentKind>().unwrap(), AugmentKind::Shear);
    }
}
