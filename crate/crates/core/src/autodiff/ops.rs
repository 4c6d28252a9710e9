//! Forward implementations of every op and their adjoints.

use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.record(out, &[a], op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.record(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.record(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.record(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        Ok(self.record(out, &[a, b], Op::Div(a, b)))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// Multiplies every channel of `input` (`[..., C]`) by a per-location
    /// `mask` whose shape is `input`'s shape without the last axis.
    pub fn scale_channels(&self, mask: Var, input: Var) -> Result<Var> {
        let (sm, si) = (self.shape(mask), self.shape(input));
        if si.is_empty() || sm.as_slice() != &si[..si.len() - 1] {
            return Err(Error::shape("scale_channels", format!("mask {sm:?} vs input {si:?}")));
        }
        let c = *si.last().unwrap();
        let out = {
            let (m, x) = (self.value(mask), self.value(input));
            let mut data = x.data().to_vec();
            for (chunk, &w) in data.chunks_mut(c).zip(m.data()) {
                chunk.iter_mut().for_each(|v| *v *= w);
            }
            Tensor::new(si.clone(), data)?
        };
        Ok(self.record(out, &[mask, input], Op::ScaleChannels { mask, input }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (ta, tb) = (self.value(a), self.value(b));
            kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = {
            let t = self.value(a);
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    data[j * rows + i] = t.data()[i * cols + j];
                }
            }
            Tensor::new(vec![cols, rows], data)?
        };
        Ok(self.record(out, &[a], Op::Transpose { input: a, rows, cols }))
    }

    /// 2-D convolution of NHWC `input` with an HWIO `weight`
    /// (`[kh, kw, c_in, c_out]`), zero padding on all sides.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let mismatch = || Error::shape("conv2d", format!("input {si:?}, weight {sw:?}"));
        if si.len() != 4 || sw.len() != 4 || si[3] != sw[2] || stride == 0 {
            return Err(mismatch());
        }
        let (kh, kw, out_c) = (sw[0], sw[1], sw[3]);
        if si[1] + 2 * padding < kh || si[2] + 2 * padding < kw {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [out_c] {
                return Err(Error::shape("conv2d", format!("bias {sb:?} for {out_c} outputs")));
            }
        }
        let geom = ConvGeometry {
            batch: si[0],
            in_h: si[1],
            in_w: si[2],
            in_c: si[3],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (si[1] + 2 * padding - kh) / stride + 1,
            out_w: (si[2] + 2 * padding - kw) / stride + 1,
        };
        let rows = geom.rows();
        let patch = geom.patch();
        let mut out = vec![0.0; rows * out_c];
        let cols = {
            let x = self.value(input);
            let w = self.value(weight);
            let cols = if geom.is_pointwise() {
                Vec::new()
            } else {
                kernels::im2col(x.data(), &geom)
            };
            let a = if geom.is_pointwise() { x.data() } else { &cols[..] };
            kernels::gemm(rows, patch, out_c, a, false, w.data(), false, &mut out, 0.0);
            if let Some(b) = bias {
                let b = self.value(b);
                for row in out.chunks_mut(out_c) {
                    row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
                }
            }
            cols
        };
        let shape = vec![geom.batch, geom.out_h, geom.out_w, out_c];
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_c,
                cols,
            },
        ))
    }

    /// Max pooling over NHWC input without padding.
    pub fn max_pool2d(&self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
            return Err(Error::shape(
                "max_pool2d",
                format!("input {s:?}, kernel {kernel}, stride {stride}"),
            ));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let mut index = Vec::with_capacity(n * oh * ow * c);
        let mut out = Vec::with_capacity(n * oh * ow * c);
        {
            let x = self.value(input);
            let x = x.data();
            for b in 0..n {
                for i in 0..oh {
                    for j in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for di in 0..kernel {
                                for dj in 0..kernel {
                                    let idx = ((b * h + i * stride + di) * w + j * stride + dj) * c + ch;
                                    if best == usize::MAX || x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            index.push(best);
                            out.push(x[best]);
                        }
                    }
                }
            }
        }
        self.note_kinks(index.iter().map(|&i| i as u64));
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.record(out, &[input], Op::Gather { input, index }))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.note_kinks(self.value(a).data().iter().map(|&v| (v > 0.0) as u64));
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.note_kinks(self.value(a).data().iter().map(|&v| v.signum() as i64 as u64));
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Spatial mean of `[N, H, W, C]` (to `[N, C]`) or `[H, W, C]` (to `[C]`).
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (batch, spatial, channels, out_shape) = match s.len() {
            3 => (1, s[0] * s[1], s[2], vec![s[2]]),
            4 => (s[0], s[1] * s[2], s[3], vec![s[0], s[3]]),
            _ => return Err(Error::shape("global_avg_pool", format!("{s:?}"))),
        };
        let out = {
            let x = self.value(a);
            let mut data = vec![0.0; batch * channels];
            for b in 0..batch {
                let acc = &mut data[b * channels..(b + 1) * channels];
                for p in 0..spatial {
                    let row = &x.data()[(b * spatial + p) * channels..][..channels];
                    acc.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                acc.iter_mut().for_each(|o| *o /= spatial as f64);
            }
            Tensor::new(out_shape, data)?
        };
        Ok(self.record(
            out,
            &[a],
            Op::GlobalAvgPool {
                input: a,
                spatial,
                channels,
            },
        ))
    }

    /// Bilinear resize of an `[h, w]` grid to `[out_h, out_w]` with
    /// half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("upsample_bilinear", format!("{s:?} -> [{out_h}, {out_w}]")));
        }
        let out = kernels::upsample(self.value(a).data(), s[0], s[1], out_h, out_w);
        let out = Tensor::new(vec![out_h, out_w], out)?;
        Ok(self.record(
            out,
            &[a],
            Op::Upsample {
                input: a,
                in_hw: (s[0], s[1]),
                out_hw: (out_h, out_w),
            },
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.record(Tensor::scalar(v), &[a], Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = {
            let t = self.value(a);
            t.sum() / t.numel() as f64
        };
        self.record(Tensor::scalar(v), &[a], Op::Mean(a))
    }

    /// Largest element; gradient flows to the first maximal index.
    pub fn max_all(&self, a: Var) -> Var {
        let (idx, v) = {
            let t = self.value(a);
            let i = crate::tensor::argmax(t.data());
            (i, t.data()[i])
        };
        self.note_kinks(std::iter::once(idx as u64));
        self.record(
            Tensor::scalar(v),
            &[a],
            Op::Gather {
                input: a,
                index: vec![idx],
            },
        )
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize, take_max: bool) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * inner);
        let mut out = Vec::with_capacity(outer * inner);
        {
            let t = self.value(a);
            let x = t.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = o * len * inner + i;
                    for j in 1..len {
                        let idx = (o * len + j) * inner + i;
                        let better = if take_max { x[idx] > x[best] } else { x[idx] < x[best] };
                        if better {
                            best = idx;
                        }
                    }
                    index.push(best);
                    out.push(x[best]);
                }
            }
        }
        self.note_kinks(index.iter().map(|&i| i as u64));
        let mut shape = s.clone();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, &[a], Op::Gather { input: a, index }))
    }

    /// Maximum along `axis` (removed from the shape); ties route the
    /// gradient to the lowest index.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("max_axis", a, axis, true)
    }

    pub fn min_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("min_axis", a, axis, false)
    }

    /// Row-wise minimum of `[N, K]` restricted to entries where `allowed`
    /// (row-major, same size) is true. Every row needs an allowed entry.
    pub fn select_min(&self, a: Var, allowed: &[bool]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || allowed.len() != s[0] * s[1] {
            return Err(Error::shape(
                "select_min",
                format!("{s:?} with {} selection flags", allowed.len()),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut index = Vec::with_capacity(rows);
        {
            let t = self.value(a);
            for r in 0..rows {
                let best = (0..cols)
                    .map(|c| r * cols + c)
                    .filter(|&i| allowed[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if t.data()[b] <= t.data()[i] => Some(b),
                        _ => Some(i),
                    })
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("select_min: row {r} has no selected entry"))
                    })?;
                index.push(best);
            }
        }
        self.note_kinks(index.iter().map(|&i| i as u64));
        let out = {
            let t = self.value(a);
            Tensor::new(vec![rows], index.iter().map(|&i| t.data()[i]).collect())?
        };
        Ok(self.record(out, &[a], Op::Gather { input: a, index }))
    }

    /// `||a − b||²` over all elements.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_dist", a, b)?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        Ok(self.record(Tensor::scalar(v), &[a, b], Op::SqDist(a, b)))
    }

    /// Squared distances between every row of `z` (`[..., D]`) and every
    /// row of `p` (`[K, D]`), giving `[..., K]`.
    pub fn pairwise_sq_dist(&self, z: Var, p: Var) -> Result<Var> {
        let (sz, sp) = (self.shape(z), self.shape(p));
        if sz.is_empty() || sp.len() != 2 || sz[sz.len() - 1] != sp[1] {
            return Err(Error::shape("pairwise_sq_dist", format!("{sz:?} vs {sp:?}")));
        }
        let dim = sp[1];
        let k = sp[0];
        let rows = sz.iter().product::<usize>() / dim;
        let out = {
            let (tz, tp) = (self.value(z), self.value(p));
            let mut out = Vec::with_capacity(rows * k);
            for zr in tz.data().chunks(dim) {
                for pr in tp.data().chunks(dim) {
                    out.push(zr.iter().zip(pr).map(|(a, b)| (a - b) * (a - b)).sum());
                }
            }
            let mut shape = sz[..sz.len() - 1].to_vec();
            shape.push(k);
            Tensor::new(shape, out)?
        };
        Ok(self.record(out, &[z, p], Op::PairwiseSqDist { z, p, dim }))
    }

    /// Mean softmax cross-entropy of `[N, m]` logits against labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let (loss, probs) = {
            let t = self.value(logits);
            let mut probs = Vec::with_capacity(t.numel());
            let mut loss = 0.0;
            for (row, &y) in t.data().chunks(classes).zip(labels) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[y];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (loss / labels.len() as f64, probs)
        };
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
        ))
    }

    /// Masked global average pooling: for each selected mask `M_i` of a
    /// pool laid out as `[n, H, W, D]`, `z_i[d] = mean_{h,w} M_i[h,w,d]·F[h,w,d]`.
    ///
    /// `features` is `[N, H, W, D]`; the result is `[N, selection.len(), D]`.
    pub fn masked_gap(
        &self,
        features: Var,
        masks: &Arc<Vec<f64>>,
        selection: &[usize],
    ) -> Result<Var> {
        let s = self.shape(features);
        if s.len() != 4 {
            return Err(Error::shape("masked_gap", format!("features {s:?}")));
        }
        let (batch, spatial, channels) = (s[0], s[1] * s[2], s[3]);
        let per_mask = spatial * channels;
        let pool = masks.len() / per_mask;
        if masks.len() % per_mask != 0 || selection.iter().any(|&i| i >= pool) {
            return Err(Error::shape(
                "masked_gap",
                format!("mask pool of {} values vs feature map {s:?}", masks.len()),
            ));
        }
        let out = {
            let f = self.value(features);
            let mut out = vec![0.0; batch * selection.len() * channels];
            let scale = 1.0 / spatial as f64;
            for b in 0..batch {
                let fb = &f.data()[b * per_mask..(b + 1) * per_mask];
                for (k, &m) in selection.iter().enumerate() {
                    let mk = &masks[m * per_mask..(m + 1) * per_mask];
                    let z = &mut out[(b * selection.len() + k) * channels..][..channels];
                    for (fp, mp) in fb.chunks(channels).zip(mk.chunks(channels)) {
                        for d in 0..channels {
                            z[d] += fp[d] * mp[d];
                        }
                    }
                    z.iter_mut().for_each(|v| *v *= scale);
                }
            }
            Tensor::new(vec![batch, selection.len(), channels], out)?
        };
        Ok(self.record(
            out,
            &[features],
            Op::MaskedGap {
                features,
                masks: Arc::clone(masks),
                selection: selection.to_vec(),
                spatial,
                channels,
            },
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, &[a], Op::Reshape(a)))
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn val(nodes: &[Node], v: Var) -> &[f64] {
    nodes[v.0].value.data()
}

/// Propagates `grad` (the gradient of the loss w.r.t. `node`'s output)
/// into the gradient slots of the node's inputs.
pub(super) fn backward_node(
    nodes: &[Node],
    node: &Node,
    out: &Tensor,
    grad: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    match &node.op {
        Op::Leaf | Op::Detached => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(grad).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), y) in ga.iter_mut().zip(grad).zip(vb) {
                    *g += d * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((g, d), x) in gb.iter_mut().zip(grad).zip(va) {
                    *g += d * x;
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), y) in ga.iter_mut().zip(grad).zip(vb) {
                    *g += d / y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (((g, d), x), y) in gb.iter_mut().zip(grad).zip(va).zip(vb) {
                    *g -= d * x / (y * y);
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
            }
        }
        Op::MulScalar(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(grad).for_each(|(g, d)| *g += c * d);
            }
        }
        Op::ScaleChannels { mask, input } => {
            let c = *out.shape().last().unwrap();
            let (vm, vx) = (val(nodes, *mask), val(nodes, *input));
            if let Some(gm) = slot(nodes, grads, *mask) {
                for ((g, dchunk), xchunk) in gm.iter_mut().zip(grad.chunks(c)).zip(vx.chunks(c)) {
                    *g += dchunk.iter().zip(xchunk).map(|(d, x)| d * x).sum::<f64>();
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for ((gchunk, dchunk), &w) in gx.chunks_mut(c).zip(grad.chunks(c)).zip(vm) {
                    gchunk.iter_mut().zip(dchunk).for_each(|(g, d)| *g += d * w);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                kernels::gemm(*m, *n, *k, grad, false, vb, true, ga, 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                kernels::gemm(*k, *m, *n, va, true, grad, false, gb, 1.0);
            }
        }
        Op::Transpose { input, rows, cols } => {
            if let Some(ga) = slot(nodes, grads, *input) {
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] += grad[j * rows + i];
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            out_c,
            cols,
        } => {
            let rows = geom.rows();
            let patch = geom.patch();
            let unfolded: &[f64] = if geom.is_pointwise() { val(nodes, *input) } else { cols };
            if let Some(gw) = slot(nodes, grads, *weight) {
                kernels::gemm(patch, rows, *out_c, unfolded, true, grad, false, gw, 1.0);
            }
            if let Some(b) = bias {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in grad.chunks(*out_c) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            let w = val(nodes, *weight);
            if let Some(gx) = slot(nodes, grads, *input) {
                if geom.is_pointwise() {
                    kernels::gemm(rows, *out_c, patch, grad, false, w, true, gx, 1.0);
                } else {
                    let mut dcols = vec![0.0; rows * patch];
                    kernels::gemm(rows, *out_c, patch, grad, false, w, true, &mut dcols, 0.0);
                    kernels::col2im(&dcols, geom, gx);
                }
            }
        }
        Op::Relu(a) => {
            let va = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), x) in ga.iter_mut().zip(grad).zip(va) {
                    if *x > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Ln(a) => {
            let va = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), x) in ga.iter_mut().zip(grad).zip(va) {
                    *g += d / x;
                }
            }
        }
        Op::Square(a) => {
            let va = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), x) in ga.iter_mut().zip(grad).zip(va) {
                    *g += 2.0 * x * d;
                }
            }
        }
        Op::Abs(a) => {
            let va = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, d), x) in ga.iter_mut().zip(grad).zip(va) {
                    if *x > 0.0 {
                        *g += d;
                    } else if *x < 0.0 {
                        *g -= d;
                    }
                }
            }
        }
        Op::GlobalAvgPool {
            input,
            spatial,
            channels,
        } => {
            if let Some(ga) = slot(nodes, grads, *input) {
                let scale = 1.0 / *spatial as f64;
                for (b, gb) in ga.chunks_mut(spatial * channels).enumerate() {
                    let drow = &grad[b * channels..(b + 1) * channels];
                    for gp in gb.chunks_mut(*channels) {
                        gp.iter_mut().zip(drow).for_each(|(g, d)| *g += d * scale);
                    }
                }
            }
        }
        Op::Upsample {
            input,
            in_hw,
            out_hw,
        } => {
            if let Some(ga) = slot(nodes, grads, *input) {
                kernels::upsample_adjoint(grad, in_hw.0, in_hw.1, out_hw.0, out_hw.1, ga);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|g| *g += grad[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = grad[0] / ga.len() as f64;
                ga.iter_mut().for_each(|g| *g += d);
            }
        }
        Op::Gather { input, index } => {
            if let Some(ga) = slot(nodes, grads, *input) {
                for (&i, d) in index.iter().zip(grad) {
                    ga[i] += d;
                }
            }
        }
        Op::SqDist(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| 2.0 * (x - y) * grad[0]).collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&diff).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&diff).for_each(|(g, d)| *g -= d);
            }
        }
        Op::PairwiseSqDist { z, p, dim } => {
            let (vz, vp) = (val(nodes, *z), val(nodes, *p));
            let k = vp.len() / dim;
            if let Some(gz) = slot(nodes, grads, *z) {
                for (r, (gzr, zr)) in gz.chunks_mut(*dim).zip(vz.chunks(*dim)).enumerate() {
                    for (j, pr) in vp.chunks(*dim).enumerate() {
                        let d = 2.0 * grad[r * k + j];
                        if d != 0.0 {
                            for t in 0..*dim {
                                gzr[t] += d * (zr[t] - pr[t]);
                            }
                        }
                    }
                }
            }
            if let Some(gp) = slot(nodes, grads, *p) {
                for (r, zr) in vz.chunks(*dim).enumerate() {
                    for (j, (gpr, pr)) in gp.chunks_mut(*dim).zip(vp.chunks(*dim)).enumerate() {
                        let d = 2.0 * grad[r * k + j];
                        if d != 0.0 {
                            for t in 0..*dim {
                                gpr[t] -= d * (zr[t] - pr[t]);
                            }
                        }
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
            classes,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let scale = grad[0] / labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::MaskedGap {
            features,
            masks,
            selection,
            spatial,
            channels,
        } => {
            if let Some(gf) = slot(nodes, grads, *features) {
                let per_mask = spatial * channels;
                let scale = 1.0 / *spatial as f64;
                for (b, gfb) in gf.chunks_mut(per_mask).enumerate() {
                    for (k, &m) in selection.iter().enumerate() {
                        let dz = &grad[(b * selection.len() + k) * channels..][..*channels];
                        let mk = &masks[m * per_mask..(m + 1) * per_mask];
                        for (gp, mp) in gfb.chunks_mut(*channels).zip(mk.chunks(*channels)) {
                            for d in 0..*channels {
                                gp[d] += dz[d] * mp[d] * scale;
                            }
                        }
                    }
                }
            }
        }
    }
}
