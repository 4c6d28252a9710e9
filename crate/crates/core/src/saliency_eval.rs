//! Recognition and localization metrics for class activation maps.
//!
//! Pixel masks are flat row-major `&[bool]` slices of length `H·W`; CAMs are
//! `[H, W]` tensors with values in [0, 1]. Images are `[H, W, C]`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{self, Tensor};

/// Anything that maps a batch of images to class probabilities.
pub trait Classifier: Sync {
    fn probabilities_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>>;

    /// Pixel value that stands for removed information.
    fn fill(&self) -> f64 {
        0.0
    }
}

impl Classifier for Model {
    fn probabilities_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits_batch(images)?.iter().map(|l| tensor::softmax(l)).collect())
    }

    fn fill(&self) -> f64 {
        self.backbone.config().input_mean
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predicted: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predicted pixels vs {} truth pixels", predicted.len(), truth.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LocalizationMetrics {
    pub dice: f64,
    pub iou: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl LocalizationMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
        LocalizationMetrics {
            // same value as 2TP / (FP + 2TP + FN), bit-identical to the iou identity
            dice: 2.0 * iou / (1.0 + iou),
            iou,
            ppv: ratio(c.tp, c.tp + c.fp),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            degenerate,
        }
    }
}

pub fn localization_metrics(predicted: &[bool], truth: &[bool]) -> Result<LocalizationMetrics> {
    Ok(LocalizationMetrics::from_counts(&confusion(predicted, truth)?))
}

/// Number of pixels kept by a top-`percent` threshold over `n` pixels.
pub fn top_count(n: usize, top_percent: f64) -> usize {
    let exact = top_percent * n as f64 / 100.0;
    // Guard against 0.1 + 0.2 style round-off pushing an integer over.
    let k = if (exact - exact.round()).abs() < 1e-9 { exact.round() } else { exact.ceil() };
    (k as usize).min(n)
}

/// Pixel indices sorted by descending value, ties in ascending index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Keeps exactly `⌈top_percent/100 · H·W⌉` pixels with the largest values.
pub fn binarize_cam(values: &[f64], top_percent: f64) -> Result<Vec<bool>> {
    if !(top_percent > 0.0 && top_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("top_percent must be in (0, 100], got {top_percent}")));
    }
    let mut mask = vec![false; values.len()];
    for &i in descending_order(values).iter().take(top_count(values.len(), top_percent)) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Sets every channel of pixels outside `keep` to `fill`.
pub fn apply_pixel_mask(image: &Tensor, keep: &[bool], fill: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] * s[1] != keep.len() {
        return Err(Error::shape("apply_pixel_mask", format!("image {s:?} vs {} mask pixels", keep.len())));
    }
    let c = s[2];
    let mut out = image.clone();
    for (px, &k) in out.data_mut().chunks_mut(c).zip(keep) {
        if !k {
            px.iter_mut().for_each(|v| *v = fill);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DropIncrease {
    #[serde(rename = "AD")]
    pub ad: f64,
    #[serde(rename = "AI")]
    pub ai: f64,
    /// Cases with `Y = 0`, which contribute nothing to AD.
    pub degenerate: usize,
}

/// AD and AI from `(Y, O)` confidence pairs, both averaged over `N`.
pub fn drop_increase(pairs: &[(f64, f64)]) -> DropIncrease {
    if pairs.is_empty() {
        return DropIncrease::default();
    }
    let n = pairs.len() as f64;
    let mut drop = 0.0;
    let mut increases = 0usize;
    let mut degenerate = 0;
    for &(y, o) in pairs {
        if y > 0.0 {
            drop += (y - o).max(0.0) / y;
        } else {
            degenerate += 1;
        }
        if y < o {
            increases += 1;
        }
    }
    DropIncrease {
        ad: 100.0 * drop / n,
        ai: 100.0 * increases as f64 / n,
        degenerate,
    }
}

/// `(Y, O)` for one image: confidence of the class predicted on the
/// original versus on the image reduced to its top-percent CAM pixels.
pub fn confidence_pair(model: &dyn Classifier, image: &Tensor, cam: &[f64], top_percent: f64) -> Result<(f64, f64)> {
    let explained = apply_pixel_mask(image, &binarize_cam(cam, top_percent)?, model.fill())?;
    let probs = model.probabilities_batch(&[image.clone(), explained])?;
    let c = tensor::argmax(&probs[0]);
    Ok((probs[0][c], probs[1][c]))
}

pub fn average_drop_increase(
    model: &dyn Classifier,
    images: &[Tensor],
    cams: &[Tensor],
    top_percent: f64,
) -> Result<DropIncrease> {
    if images.len() != cams.len() {
        return Err(Error::shape("average_drop_increase", format!("{} images, {} cams", images.len(), cams.len())));
    }
    let pairs = images
        .par_iter()
        .zip(cams)
        .map(|(x, cam)| confidence_pair(model, x, cam.data(), top_percent))
        .collect::<Result<Vec<_>>>()?;
    Ok(drop_increase(&pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveResult {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
}

impl CurveResult {
    pub fn new(fractions: Vec<f64>, probabilities: Vec<f64>) -> Self {
        let auc = trapezoid(&fractions, &probabilities);
        CurveResult { fractions, probabilities, auc }
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// Deletion and insertion curves of the `label` confidence.
///
/// Deletion removes pixels of `image` in descending CAM order, replacing
/// them with the classifier's fill value; insertion restores them, in the
/// same order, into an image of that fill.
pub fn deletion_insertion(
    model: &dyn Classifier,
    image: &Tensor,
    cam: &[f64],
    label: usize,
    step_percent: f64,
) -> Result<(CurveResult, CurveResult)> {
    let steps = (100.0 / step_percent).round();
    if !(step_percent > 0.0 && step_percent <= 100.0) || (steps * step_percent - 100.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("step_percent {step_percent} must divide 100")));
    }
    let steps = steps as usize;
    let s = image.shape();
    if s.len() != 3 || s[0] * s[1] != cam.len() {
        return Err(Error::shape("deletion_insertion", format!("image {s:?} vs {} cam pixels", cam.len())));
    }
    let n = cam.len();
    let order = descending_order(cam);
    let fractions: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut batch = Vec::with_capacity(2 * (steps + 1));
    for k in 0..=steps {
        let mut kept = vec![true; n];
        for &i in &order[..top_count(n, k as f64 * step_percent)] {
            kept[i] = false;
        }
        batch.push(apply_pixel_mask(image, &kept, model.fill())?);
        kept.iter_mut().for_each(|b| *b = !*b);
        batch.push(apply_pixel_mask(image, &kept, model.fill())?);
    }
    let probs = model.probabilities_batch(&batch)?;
    let read = |offset: usize| -> Result<Vec<f64>> {
        probs
            .iter()
            .skip(offset)
            .step_by(2)
            .map(|p| {
                p.get(label)
                    .copied()
                    .ok_or(Error::LabelOutOfRange { label, classes: p.len() })
            })
            .collect()
    };
    Ok((
        CurveResult::new(fractions.clone(), read(0)?),
        CurveResult::new(fractions, read(1)?),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub dice: f64,
    pub iou: f64,
    pub ppv: f64,
    pub sensitivity: f64,
}

/// Mean localization metrics of each CAM against its truth mask at each
/// top-percent threshold.
pub fn threshold_sweep(cams: &[Tensor], truths: &[Vec<bool>], thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if cams.len() != truths.len() || cams.is_empty() {
        return Err(Error::shape("threshold_sweep", format!("{} cams, {} truths", cams.len(), truths.len())));
    }
    let n = cams.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            let mut row = SweepRow { threshold: t, dice: 0.0, iou: 0.0, ppv: 0.0, sensitivity: 0.0 };
            for (cam, truth) in cams.iter().zip(truths) {
                let m = localization_metrics(&binarize_cam(cam.data(), t)?, truth)?;
                row.dice += m.dice / n;
                row.iou += m.iou / n;
                row.ppv += m.ppv / n;
                row.sensitivity += m.sensitivity / n;
            }
            Ok(row)
        })
        .collect()
}

pub fn sweep_thresholds() -> Vec<f64> {
    (1..=99).map(f64::from).collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,dice,iou,ppv,sensitivity\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.threshold, r.dice, r.iou, r.ppv, r.sensitivity));
    }
    out
}

/// Row-wise mean curves as `fraction,deletion_prob,insertion_prob`.
pub fn curves_csv(deletion: &[CurveResult], insertion: &[CurveResult]) -> String {
    let mut out = String::from("fraction,deletion_prob,insertion_prob\n");
    let Some(first) = deletion.first() else { return out };
    let mean = |curves: &[CurveResult], k: usize| curves.iter().map(|c| c.probabilities[k]).sum::<f64>() / curves.len() as f64;
    for (k, f) in first.fractions.iter().enumerate() {
        out.push_str(&format!("{f},{},{}\n", mean(deletion, k), mean(insertion, k)));
    }
    out
}

/// Window origins along one axis: every `stride`, plus one flush with the
/// far edge.
fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Sliding-window occlusion map for the class predicted on `image`.
///
/// Windows are replaced by the classifier's fill value. Each pixel gets the
/// mean confidence drop over the windows covering it;
/// the result is min-max normalized (all zero when constant).
pub fn occlusion_baseline(model: &dyn Classifier, image: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("occlusion_baseline", format!("image shape {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if patch == 0 || stride == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} and stride {stride} must be positive and fit a {h}x{w} image"
        )));
    }
    let windows: Vec<(usize, usize)> = window_starts(h, patch, stride)
        .into_iter()
        .flat_map(|r| window_starts(w, patch, stride).into_iter().map(move |c| (r, c)))
        .collect();
    let mut batch = vec![image.clone()];
    for &(r0, c0) in &windows {
        let mut keep = vec![true; h * w];
        for r in r0..r0 + patch {
            keep[r * w + c0..r * w + c0 + patch].iter_mut().for_each(|k| *k = false);
        }
        batch.push(apply_pixel_mask(image, &keep, model.fill())?);
    }
    let probs = model.probabilities_batch(&batch)?;
    let c = tensor::argmax(&probs[0]);
    let base = probs[0][c];
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0usize; h * w];
    for (&(r0, c0), p) in windows.iter().zip(&probs[1..]) {
        let drop = base - p[c];
        for r in r0..r0 + patch {
            for col in c0..c0 + patch {
                sum[r * w + col] += drop;
                count[r * w + col] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    Tensor::new(vec![h, w], normalize(&mean))
}

/// Min-max normalization to [0, 1]; constant input maps to zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Uniform random CAM, the chance floor for localization.
pub fn random_cam(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::STREAM_EVAL);
    Tensor::new(vec![h, w], (0..h * w).map(|_| r.gen::<f64>()).collect()).expect("consistent shape")
}

/// Scalar summary for one saliency method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub accuracy: f64,
    #[serde(rename = "AD")]
    pub ad: f64,
    #[serde(rename = "AI")]
    pub ai: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub dice: f64,
    pub iou: f64,
    pub ppv: f64,
    pub sensitivity: f64,
}

/// Per-image results of evaluating one CAM.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEvaluation {
    pub confidence: (f64, f64),
    pub deletion: CurveResult,
    pub insertion: CurveResult,
    pub localization: LocalizationMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub top_percent: f64,
    pub step_percent: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { top_percent: 20.0, step_percent: 2.0 }
    }
}

pub fn evaluate_cam(
    model: &dyn Classifier,
    image: &Tensor,
    label: usize,
    cam: &Tensor,
    truth: &[bool],
    settings: &EvalSettings,
) -> Result<ImageEvaluation> {
    let confidence = confidence_pair(model, image, cam.data(), settings.top_percent)?;
    let (deletion, insertion) = deletion_insertion(model, image, cam.data(), label, settings.step_percent)?;
    let localization = localization_metrics(&binarize_cam(cam.data(), settings.top_percent)?, truth)?;
    Ok(ImageEvaluation { confidence, deletion, insertion, localization })
}

pub fn summarize(accuracy: f64, evals: &[ImageEvaluation]) -> MethodMetrics {
    let n = evals.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ImageEvaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    let di = drop_increase(&evals.iter().map(|e| e.confidence).collect::<Vec<_>>());
    MethodMetrics {
        accuracy,
        ad: di.ad,
        ai: di.ai,
        deletion_auc: mean(&|e| e.deletion.auc),
        insertion_auc: mean(&|e| e.insertion.auc),
        dice: mean(&|e| e.localization.dice),
        iou: mean(&|e| e.localization.iou),
        ppv: mean(&|e| e.localization.ppv),
        sensitivity: mean(&|e| e.localization.sensitivity),
    }
}

/// Saliency methods compared by [`evaluate_dataset`], in output order.
pub const METHODS: [&str; 3] = ["mdm", "occlusion", "random"];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub truth: Vec<bool>,
    /// One CAM and one evaluation per entry of [`METHODS`].
    pub cams: Vec<Tensor>,
    pub evaluations: Vec<ImageEvaluation>,
    /// Wall time of the MDM optimization for this image.
    pub mdm_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Accuracy on the whole split.
    pub accuracy: f64,
    pub images: Vec<ImageRecord>,
    pub top_percent: f64,
}

impl EvalReport {
    fn column(&self, method: usize) -> Vec<ImageEvaluation> {
        self.images.iter().map(|r| r.evaluations[method].clone()).collect()
    }

    pub fn summary(&self, method: usize) -> MethodMetrics {
        summarize(self.accuracy, &self.column(method))
    }

    /// `{"mdm": {...}, "occlusion": {...}, "random": {...}}`
    pub fn metrics_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = METHODS
            .iter()
            .enumerate()
            .map(|(i, m)| (m.to_string(), serde_json::to_value(self.summary(i)).expect("plain numbers")))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn curves_csv(&self, method: usize) -> String {
        let col = self.column(method);
        let del: Vec<CurveResult> = col.iter().map(|e| e.deletion.clone()).collect();
        let ins: Vec<CurveResult> = col.iter().map(|e| e.insertion.clone()).collect();
        curves_csv(&del, &ins)
    }

    /// Share of images whose insertion AUC exceeds their deletion AUC.
    pub fn insertion_win_rate(&self, method: usize) -> f64 {
        let col = self.column(method);
        col.iter().filter(|e| e.insertion.auc > e.deletion.auc).count() as f64 / col.len().max(1) as f64
    }

    /// Mean localization metrics of one method at thresholds 1..=99.
    pub fn sweep(&self, method: usize) -> Result<Vec<SweepRow>> {
        let cams: Vec<Tensor> = self.images.iter().map(|r| r.cams[method].clone()).collect();
        let truths: Vec<Vec<bool>> = self.images.iter().map(|r| r.truth.clone()).collect();
        threshold_sweep(&cams, &truths, &sweep_thresholds())
    }

    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("id,label,predicted,method,iou,dice,deletion_auc,insertion_auc,Y,O\n");
        for r in &self.images {
            for (m, e) in METHODS.iter().zip(&r.evaluations) {
                out.push_str(&format!(
                    "{},{},{},{m},{},{},{},{},{},{}\n",
                    r.id, r.label, r.predicted, e.localization.iou, e.localization.dice, e.deletion.auc, e.insertion.auc,
                    e.confidence.0, e.confidence.1
                ));
            }
        }
        out
    }
}

/// CAMs of every method for one image, in [`METHODS`] order, plus the MDM
/// wall time.
pub fn method_cams(
    model: &Model,
    image: &Tensor,
    mdm: &crate::mdm::MdmConfig,
    patch: usize,
    stride: usize,
    seed: u64,
) -> Result<(Vec<Tensor>, f64)> {
    let start = std::time::Instant::now();
    let (cam, _, _) = crate::mdm::explain_input(model, image, mdm)?;
    let seconds = start.elapsed().as_secs_f64();
    let [h, w, _] = model.input_shape();
    Ok((vec![cam.values, occlusion_baseline(model, image, patch, stride)?, random_cam(h, w, seed)], seconds))
}

/// Scores the MDM, occlusion and random CAMs of every image that has a
/// ground-truth mask. Images are processed in parallel.
pub fn evaluate_dataset(
    model: &Model,
    data: &crate::dataset::LabeledImages,
    mdm: &crate::mdm::MdmConfig,
    eval: &crate::config::EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    eval.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("the evaluation split is empty".into()));
    }
    let accuracy = model.accuracy(&data.images, &data.labels)?;
    let settings = eval.settings();
    let limit = eval.max_images.unwrap_or(usize::MAX);
    let chosen: Vec<usize> = (0..data.len()).filter(|&i| data.masks[i].is_some()).take(limit).collect();
    if chosen.is_empty() {
        return Err(Error::Data("no evaluation image has a ground-truth mask".into()));
    }
    let images = chosen
        .par_iter()
        .map(|&i| {
            let (x, y) = (&data.images[i], data.labels[i]);
            let truth = data.masks[i].as_ref().expect("filtered above");
            let (cams, mdm_seconds) =
                method_cams(model, x, mdm, eval.occlusion_patch, eval.occlusion_stride, rng::mix(&[seed, i as u64]))?;
            let evaluations = cams
                .iter()
                .map(|c| evaluate_cam(model, x, y, c, truth, &settings))
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageRecord {
                id: data.ids[i].clone(),
                label: y,
                predicted: model.predict(x)?.class,
                truth: truth.clone(),
                cams,
                evaluations,
                mdm_seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { accuracy, images, top_percent: eval.top_percent })
}
