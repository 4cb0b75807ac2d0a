//! Evaluation metrics and held-out reports.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::avatar::Avatar;
use crate::error::{Error, Result};
use crate::losses::{feature_loss, FeatureExtractor, FEATURE_WIDTHS};
use crate::parallel;
use crate::scene::SyntheticSequence;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Seed of the frozen extractor behind [`feature_distance`]. Distinct from
/// the training default so the metric is not the training loss itself.
pub const METRIC_FEATURE_SEED: u64 = 0x00e7_a1f0;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    crate::error::ensure_shape(op, a.shape(), b.shape())
}

/// `(channels, height, width)` of a `[C, H, W]` or `[1, C, H, W]` image.
fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::ShapeMismatch {
            op: "image",
            expected: vec![1, 3, 0, 0],
            actual: s.to_vec(),
        }),
    }
}

/// Rec. 601 luma of a `[-1, 1]` RGB (or single-channel) image, remapped to `[0, 1]`.
pub fn luma01(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = image_dims(t)?;
    let d = t.data();
    let p = h * w;
    let y = match c {
        1 => d.iter().map(|v| 0.5 * (v + 1.0)).collect(),
        3 => (0..p)
            .map(|i| 0.5 * (0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i] + 1.0))
            .collect(),
        _ => return Err(Error::invalid(format!("luma needs 1 or 3 channels, got {c}"))),
    };
    Ok((y, h, w))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity on `[0, 1]` luma with an 11×11 Gaussian
/// window (σ = 1.5), valid positions only.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (ya, h, w) = luma01(a)?;
    let (yb, _, _) = luma01(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let f = |x: &[f64]| filter_valid(x, h, w, &g);
    let mu_a = f(&ya);
    let mu_b = f(&yb);
    let aa: Vec<f64> = ya.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = yb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();
    let (saa, sbb, sab) = (f(&aa), f(&bb), f(&ab));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

fn metric_extractor() -> &'static FeatureExtractor {
    static EXTRACTOR: OnceLock<FeatureExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(|| FeatureExtractor::new(METRIC_FEATURE_SEED))
}

/// Deterministic perceptual-distance surrogate: unit-weighted L1 between
/// frozen random-feature pyramids.
pub fn feature_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("feature_distance", a, b)?;
    let (c, h, w) = image_dims(a)?;
    let a = a.clone().reshape(&[1, c, h, w])?;
    let b = b.clone().reshape(&[1, c, h, w])?;
    feature_loss(metric_extractor(), &a, &b, &[1.0; FEATURE_WIDTHS.len()])
}

/// Mean absolute error over pixels where `mask > 0.5`, all channels.
/// Returns 0 for an empty mask.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    check_same("masked_l1", pred, target)?;
    let (c, h, w) = image_dims(pred)?;
    let (mc, mh, mw) = image_dims(mask)?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "masked_l1 mask",
            expected: vec![1, 1, h, w],
            actual: mask.shape().to_vec(),
        });
    }
    let p = h * w;
    let m = mask.data();
    let (mut sum, mut count) = (0.0, 0usize);
    for ch in 0..c {
        for i in (0..p).filter(|&i| m[i] > 0.5) {
            sum += (pred.data()[ch * p + i] - target.data()[ch * p + i]).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Intersection and union counts of two masks thresholded at 0.5, restricted
/// to pixels where `region` holds.
pub fn mask_overlap(pred: &[f64], target: &[f64], region: impl Fn(usize) -> bool) -> (usize, usize) {
    let (mut inter, mut union) = (0, 0);
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        if !region(i) {
            continue;
        }
        let (p, t) = (p > 0.5, t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    (inter, union)
}

/// IoU at threshold 0.5; two empty masks score 1.
pub fn mask_iou(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mask_iou", pred, target)?;
    let (i, u) = mask_overlap(pred.data(), target.data(), |_| true);
    Ok(ratio(i, u))
}

fn ratio(i: usize, u: usize) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub name: String,
    pub lpips_like: f64,
    pub param_count: u64,
}

/// Relative perceptual improvement over `reference`, scaled by the
/// log-ratio of parameter counts. Lies in `(-inf, 1]`.
pub fn ripfip(x: &MethodStats, reference: &MethodStats) -> Result<f64> {
    if !(reference.lpips_like > 0.0) {
        return Err(Error::invalid("reference perceptual distance must be positive"));
    }
    if x.param_count == 0 || reference.param_count == 0 {
        return Err(Error::invalid("parameter counts must be >= 1"));
    }
    if x.lpips_like < 0.0 {
        return Err(Error::invalid("perceptual distance must be non-negative"));
    }
    let gain = (reference.lpips_like - x.lpips_like) / reference.lpips_like;
    let (pr, px) = (reference.param_count as f64, x.param_count as f64);
    let scale = if pr == px { 0.0 } else { (pr / px).ln() / pr.ln() };
    Ok(gain * scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ssim: f64,
    pub feature_distance: f64,
    pub masked_l1: f64,
    pub mask_iou: f64,
    /// Overlap counts inside the band outside proxy coverage.
    pub band_intersection: usize,
    pub band_union: usize,
    /// Not computed here; columns reserved for externally merged values.
    pub flip: Option<f64>,
    pub mfid: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ssim: f64,
    pub feature_distance: f64,
    pub masked_l1: f64,
    pub mask_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_type: String,
    pub identity: String,
    pub config_hash: String,
    pub frames: Vec<usize>,
    pub per_frame: Vec<FrameMetrics>,
    /// Means of the per-frame columns.
    pub aggregate: Aggregate,
    /// IoU over all pixels outside proxy coverage, pooled across frames.
    pub band_iou: f64,
}

impl EvalReport {
    pub fn from_frames(
        model_type: &str,
        identity: &str,
        config_hash: &str,
        per_frame: Vec<FrameMetrics>,
    ) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            ssim: mean(|m| m.ssim),
            feature_distance: mean(|m| m.feature_distance),
            masked_l1: mean(|m| m.masked_l1),
            mask_iou: mean(|m| m.mask_iou),
        };
        let inter = per_frame.iter().map(|m| m.band_intersection).sum();
        let union = per_frame.iter().map(|m| m.band_union).sum();
        EvalReport {
            model_type: model_type.to_string(),
            identity: identity.to_string(),
            config_hash: config_hash.to_string(),
            frames: per_frame.iter().map(|m| m.frame).collect(),
            per_frame,
            aggregate,
            band_iou: ratio(inter, union),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::format("report", e.to_string());
        w.write_record([
            "frame",
            "ssim",
            "feature_distance",
            "masked_l1",
            "mask_iou",
            "band_intersection",
            "band_union",
            "flip",
            "mfid",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.per_frame {
            w.write_record([
                m.frame.to_string(),
                m.ssim.to_string(),
                m.feature_distance.to_string(),
                m.masked_l1.to_string(),
                m.mask_iou.to_string(),
                m.band_intersection.to_string(),
                m.band_union.to_string(),
                opt(m.flip),
                opt(m.mfid),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("report", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Write `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let json = stem.with_extension("json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

/// Metrics of one prediction against ground truth. `coverage` is the proxy
/// coverage of the frame (1 = covered).
pub fn frame_metrics(
    frame: usize,
    pred: &Tensor,
    pred_mask: &Tensor,
    target: &Tensor,
    target_mask: &Tensor,
    coverage: &[u8],
) -> Result<FrameMetrics> {
    let (c, h, w) = image_dims(target)?;
    let pred = pred.clone().reshape(&[c, h, w])?;
    let target = &target.clone().reshape(&[c, h, w])?;
    let pm = pred_mask.clone().reshape(&[1, h, w])?;
    let tm = target_mask.clone().reshape(&[1, h, w])?;
    if coverage.len() != h * w {
        return Err(Error::DimensionMismatch(format!(
            "coverage has {} entries for a {w}x{h} frame",
            coverage.len()
        )));
    }
    let (bi, bu) = mask_overlap(pm.data(), tm.data(), |i| coverage[i] == 0);
    Ok(FrameMetrics {
        frame,
        ssim: ssim(&pred, target)?,
        feature_distance: feature_distance(&pred, target)?,
        masked_l1: masked_l1(&pred, target, &tm)?,
        mask_iou: mask_iou(&pm, &tm)?,
        band_intersection: bi,
        band_union: bu,
        flip: None,
        mfid: None,
    })
}

/// Render every listed frame of `sequence` with `identity` and score it
/// against ground truth.
pub fn evaluate(avatar: &Avatar, identity: &str, sequence: &SyntheticSequence, frames: &[usize]) -> Result<EvalReport> {
    avatar.texture(identity)?;
    if let Some(&bad) = frames.iter().find(|&&f| f >= sequence.frames.len()) {
        return Err(Error::invalid(format!("frame {bad} out of range")));
    }
    let m = avatar.renderer.config.size_multiple();
    let res = sequence.config.resolution;
    if !res.is_multiple_of(m) {
        return Err(Error::DimensionMismatch(format!(
            "data resolution {res} is not a multiple of the renderer's {m}"
        )));
    }
    let per_frame = parallel::map_range(frames.len(), |k| {
        let f = frames[k];
        let frame = &sequence.frames[f];
        let raster = sequence.proxy_raster(f)?;
        let out = avatar.render_raster(identity, &raster, &frame.background)?;
        frame_metrics(f, &out.image, &out.mask, &frame.image, &frame.mask, &raster.coverage())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_frames(&avatar.model_type, identity, &avatar.config_hash, per_frame))
}
