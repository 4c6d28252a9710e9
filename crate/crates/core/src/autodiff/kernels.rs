//! Dense numeric kernels shared by forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major matrices, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the bounds above cover every element addressed through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds NHWC input into a `rows × (kh·kw·c)` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let c = g.in_c;
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * c;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for kh in 0..g.kernel_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kw in 0..g.kernel_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let src = base + (ih as usize * g.in_w + iw as usize) * c;
                        let off = (kh * g.kernel_w + kw) * c;
                        dst[off..off + c].copy_from_slice(&input[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeometry, grad_input: &mut [f64]) {
    let patch = g.patch();
    let c = g.in_c;
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * c;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for kh in 0..g.kernel_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kw in 0..g.kernel_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (ih as usize * g.in_w + iw as usize) * c;
                        let off = (kh * g.kernel_w + kw) * c;
                        for (d, s) in grad_input[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-axis interpolation taps for bilinear resizing with half-pixel
/// centers: source coordinate `(i + 0.5) · in/out − 0.5`, clamped at the
/// edges.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn bilinear_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

/// Bilinear resize of a single-channel `h×w` grid to `out_h×out_w`.
pub fn upsample(grid: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for i in 0..out_h {
        let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
        for j in 0..out_w {
            let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
            let top = (1.0 - fx) * grid[y0 * w + x0] + fx * grid[y0 * w + x1];
            let bottom = (1.0 - fx) * grid[y1 * w + x0] + fx * grid[y1 * w + x1];
            out[i * out_w + j] = (1.0 - fy) * top + fy * bottom;
        }
    }
    out
}

/// Adjoint of [`upsample`].
pub fn upsample_adjoint(
    grad_out: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_grid: &mut [f64],
) {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
        for j in 0..out_w {
            let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
            let g = grad_out[i * out_w + j];
            grad_grid[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
            grad_grid[y0 * w + x1] += (1.0 - fy) * fx * g;
            grad_grid[y1 * w + x0] += fy * (1.0 - fx) * g;
            grad_grid[y1 * w + x1] += fy * fx * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_constant_is_constant() {
        let out = upsample(&[0.7], 1, 1, 4, 4);
        assert!(out.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upsample_identity_at_same_size() {
        let grid: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(upsample(&grid, 2, 3, 2, 3), grid);
    }

    #[test]
    fn upsample_half_pixel_centers() {
        // 2 -> 4: output centers map to -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped hi)
        let out = upsample(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
