//! Counting and containment checks relating masked prototypes to the
//! patch-restricted prototype families.

use super::FeatureMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of single-location (1×1 patch) prototypes on an `h × w` grid.
///
/// Cross-checked against the number of distinct one-hot spatial masks.
pub fn count_unit_patch_prototypes(h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("grid {h}x{w} is empty")));
    }
    let mut seen = std::collections::HashSet::new();
    for r in 0..h {
        for c in 0..w {
            let mut onehot = vec![false; h * w];
            onehot[r * w + c] = true;
            seen.insert(onehot);
        }
    }
    debug_assert_eq!(seen.len(), h * w);
    Ok(seen.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RectPatchCount {
    pub closed_form: usize,
    pub enumerated: usize,
}

/// All `(top, left, height, width)` rectangles with `1 < height·width < h·w`.
pub fn enumerate_rect_patches(h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for ph in 1..=h {
        for pw in 1..=w {
            let area = ph * pw;
            if area <= 1 || area >= h * w {
                continue;
            }
            for top in 0..=h - ph {
                for left in 0..=w - pw {
                    out.push((top, left, ph, pw));
                }
            }
        }
    }
    out
}

/// Number of rectangular multi-location patches strictly smaller than the
/// grid, by closed form and by enumeration. Fails when they disagree.
pub fn count_rect_patch_prototypes(h: usize, w: usize) -> Result<RectPatchCount> {
    if h * w < 2 {
        return Err(Error::InvalidArgument(format!(
            "rectangular patches need at least 2 grid cells, got {h}x{w}"
        )));
    }
    let (hi, wi) = (h as i64, w as i64);
    let n = hi * wi;
    let closed = n * (n + hi + wi - 3) / 4 - 1;
    let enumerated = enumerate_rect_patches(h, w).len();
    if closed != enumerated as i64 {
        return Err(Error::Verification(format!(
            "rect patch count on {h}x{w}: closed form {closed}, enumeration {enumerated}"
        )));
    }
    Ok(RectPatchCount {
        closed_form: closed as usize,
        enumerated,
    })
}

/// Restricted prototype family realized by a containment witness.
#[derive(Clone, Debug, PartialEq)]
pub enum WitnessStyle {
    UnitPatch { row: usize, col: usize },
    RectPatch { top: usize, left: usize, height: usize, width: usize },
    /// One weight in [0, 1] per grid location, shared by all channels.
    SpatialScalar { weights: Vec<f64> },
}

/// Builds the mask that reproduces a restricted prototype through
/// `masked_feature` (up to the `1 / (h·w)` pooling factor).
pub fn containment_witness(h: usize, w: usize, d: usize, style: &WitnessStyle) -> Result<FeatureMask> {
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("mask shape {h}x{w}x{d} is empty")));
    }
    let spatial: Vec<f64> = match *style {
        WitnessStyle::UnitPatch { row, col } => {
            if row >= h || col >= w {
                return Err(Error::InvalidArgument(format!(
                    "unit patch ({row},{col}) outside {h}x{w} grid"
                )));
            }
            (0..h * w).map(|i| if i == row * w + col { 1.0 } else { 0.0 }).collect()
        }
        WitnessStyle::RectPatch { top, left, height, width } => {
            if height == 0 || width == 0 || top + height > h || left + width > w {
                return Err(Error::InvalidArgument(format!(
                    "rect patch {height}x{width} at ({top},{left}) does not fit a {h}x{w} grid"
                )));
            }
            (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    let inside = (top..top + height).contains(&r) && (left..left + width).contains(&c);
                    if inside { 1.0 } else { 0.0 }
                })
                .collect()
        }
        WitnessStyle::SpatialScalar { ref weights } => {
            if weights.len() != h * w {
                return Err(Error::InvalidArgument(format!(
                    "{} spatial weights for a {h}x{w} grid",
                    weights.len()
                )));
            }
            if weights.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("spatial weights must lie in [0, 1]".into()));
            }
            weights.clone()
        }
    };
    let data = spatial.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
    Ok(FeatureMask {
        id: 0,
        values: Tensor::new(vec![h, w, d], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_counts() {
        assert_eq!(count_unit_patch_prototypes(7, 7).unwrap(), 49);
        assert_eq!(count_unit_patch_prototypes(1, 1).unwrap(), 1);
        assert_eq!(count_unit_patch_prototypes(2, 3).unwrap(), 6);
    }

    #[test]
    fn rect_counts() {
        assert_eq!(count_rect_patch_prototypes(2, 2).unwrap().enumerated, 4);
        assert_eq!(count_rect_patch_prototypes(3, 3).unwrap().enumerated, 26);
        assert_eq!(count_rect_patch_prototypes(7, 7).unwrap().closed_form, 734);
        assert_eq!(count_rect_patch_prototypes(1, 2).unwrap().closed_form, 0);
        assert!(count_rect_patch_prototypes(1, 1).is_err());
    }

    #[test]
    fn witnesses() {
        let m = containment_witness(7, 7, 3, &WitnessStyle::UnitPatch { row: 2, col: 3 }).unwrap();
        let ones: Vec<usize> = (0..49).filter(|i| m.values.data()[i * 3] == 1.0).collect();
        assert_eq!(ones, vec![2 * 7 + 3]);
        assert_eq!(m.values.sum(), 3.0);

        let r = containment_witness(
            3,
            3,
            2,
            &WitnessStyle::RectPatch { top: 0, left: 0, height: 2, width: 2 },
        )
        .unwrap();
        assert_eq!(r.values.sum(), 8.0);
        assert_eq!(r.values.data()[..4], [1.0; 4]);

        let s = containment_witness(2, 2, 2, &WitnessStyle::SpatialScalar { weights: vec![0.5; 4] }).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.5));

        assert!(containment_witness(7, 7, 1, &WitnessStyle::UnitPatch { row: 7, col: 0 }).is_err());
        assert!(containment_witness(
            3,
            3,
            1,
            &WitnessStyle::RectPatch { top: 2, left: 0, height: 2, width: 1 }
        )
        .is_err());
    }
}
