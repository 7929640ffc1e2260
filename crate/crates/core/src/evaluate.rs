//! Single-class detection metrics: greedy IoU matching, precision/recall at a
//! confidence threshold, 101-point interpolated AP, mAP over IoU 0.50:0.95,
//! PR curves and horizontal center error.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{read_labels, NormBox};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: NormBox,
    pub confidence: f64,
}

/// Ground truth and predictions of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub gts: Vec<NormBox>,
    pub preds: Vec<Prediction>,
}

/// IoU of `(x0, y0, x1, y1)` boxes; 0 when either has no area.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

/// IoU of normalized boxes after clipping both to the unit square.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let clip = |c: [f64; 4]| c.map(|v| v.clamp(0.0, 1.0));
    iou_corners(clip(a.corners()), clip(b.corners()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Matched gt index per prediction, `None` for false positives.
    pub pred_match: Vec<Option<usize>>,
    /// IoU with the matched gt, 0 for false positives.
    pub pred_iou: Vec<f64>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pred_match.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.pred_match.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Predictions by descending confidence, input order on ties.
fn confidence_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy one-to-one matching: predictions in descending confidence each take
/// the unmatched gt of highest IoU (lowest index on ties) if it reaches
/// `iou_threshold`.
pub fn match_detections(preds: &[Prediction], gts: &[NormBox], iou_threshold: f64) -> MatchResult {
    let mut res = MatchResult {
        pred_match: vec![None; preds.len()],
        pred_iou: vec![0.0; preds.len()],
        gt_matched: vec![false; gts.len()],
    };
    for i in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if res.gt_matched[j] {
                continue;
            }
            let v = iou(&preds[i].bbox, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            res.gt_matched[j] = true;
            res.pred_match[i] = Some(j);
            res.pred_iou[i] = v;
        }
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    /// 1.0 with `precision_undefined` when there are no predictions.
    pub precision: f64,
    pub precision_undefined: bool,
    /// 0.0 with `recall_undefined` when there is no ground truth.
    pub recall: f64,
    pub recall_undefined: bool,
}

impl PrecisionRecall {
    fn from_counts(tp: usize, fp: usize, fn_count: usize) -> Self {
        let precision_undefined = tp + fp == 0;
        let recall_undefined = tp + fn_count == 0;
        PrecisionRecall {
            tp,
            fp,
            fn_count,
            precision: if precision_undefined {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            },
            precision_undefined,
            recall: if recall_undefined {
                0.0
            } else {
                tp as f64 / (tp + fn_count) as f64
            },
            recall_undefined,
        }
    }
}

fn kept(preds: &[Prediction], conf_threshold: f64) -> Vec<Prediction> {
    preds
        .iter()
        .filter(|p| p.confidence >= conf_threshold)
        .copied()
        .collect()
}

/// Micro-averaged over all images, matching only predictions at or above
/// `conf_threshold`.
pub fn precision_recall(images: &[ImageEval], conf_threshold: f64, iou_threshold: f64) -> PrecisionRecall {
    let (mut tp, mut fp, mut fn_count) = (0, 0, 0);
    for img in images {
        let m = match_detections(&kept(&img.preds, conf_threshold), &img.gts, iou_threshold);
        tp += m.tp();
        fp += m.fp();
        fn_count += m.fn_count();
    }
    PrecisionRecall::from_counts(tp, fp, fn_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub confidence: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One sample per distinct confidence, in descending order. Each sample is the
/// precision/recall of keeping every prediction with at least that confidence.
/// Recall is reported as 0 when there is no ground truth.
pub fn pr_curve(images: &[ImageEval], iou_threshold: f64) -> Vec<PrSample> {
    // Greedy matching in confidence order never revisits earlier decisions, so
    // a single full matching gives the outcome of every threshold cut.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0;
    for img in images {
        let m = match_detections(&img.preds, &img.gts, iou_threshold);
        total_gt += img.gts.len();
        ranked.extend(
            img.preds
                .iter()
                .zip(&m.pred_match)
                .map(|(p, mm)| (p.confidence, mm.is_some())),
        );
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let c = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == c {
            tp += usize::from(ranked[i].1);
            seen += 1;
            i += 1;
        }
        out.push(PrSample {
            confidence: c,
            recall: if total_gt == 0 {
                0.0
            } else {
                tp as f64 / total_gt as f64
            },
            precision: tp as f64 / seen as f64,
        });
    }
    out
}

/// 101-point interpolated AP; `None` without ground truth.
pub fn average_precision(images: &[ImageEval], iou_threshold: f64) -> Option<f64> {
    if images.iter().all(|i| i.gts.is_empty()) {
        return None;
    }
    Some(interpolated_ap(&pr_curve(images, iou_threshold)))
}

/// Mean over recall levels `0, 0.01, ..., 1` of the best precision reached at
/// that recall or beyond (0 when never reached).
pub fn interpolated_ap(curve: &[PrSample]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|s| s.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        // recall is non-decreasing along the curve
        let k = curve.partition_point(|s| s.recall < level);
        if k < curve.len() {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub iou_threshold: f64,
    pub ap: Option<f64>,
}

/// AP at each COCO threshold and their mean; the mean is `None` when AP is
/// undefined (no ground truth).
pub fn map_50_95(images: &[ImageEval]) -> (Vec<ApEntry>, Option<f64>) {
    map_50_95_with(Execution::Sequential, images)
}

pub fn map_50_95_with(exec: Execution, images: &[ImageEval]) -> (Vec<ApEntry>, Option<f64>) {
    let thresholds = coco_iou_thresholds();
    let entries: Vec<ApEntry> = par::map(exec, &thresholds, |&t| ApEntry {
        iou_threshold: t,
        ap: average_precision(images, t),
    });
    let aps: Option<Vec<f64>> = entries.iter().map(|e| e.ap).collect();
    let mean = aps.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    (entries, mean)
}

/// Mean center error over true positives, in pixels; horizontal only unless
/// `euclidean`. `None` when there are no true positives.
pub fn horizontal_mae(images: &[ImageEval], conf_threshold: f64, iou_threshold: f64, euclidean: bool) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for img in images {
        let preds = kept(&img.preds, conf_threshold);
        let m = match_detections(&preds, &img.gts, iou_threshold);
        for (p, mm) in preds.iter().zip(&m.pred_match) {
            if let Some(j) = mm {
                let g = &img.gts[*j];
                let du = (p.bbox.cx - g.cx) * f64::from(img.width);
                let dv = (p.bbox.cy - g.cy) * f64::from(img.height);
                sum += if euclidean { du.hypot(dv) } else { du.abs() };
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Greedy non-maximum suppression: drops predictions overlapping a
/// higher-confidence kept one by more than `iou_threshold`.
pub fn nms(preds: &[Prediction], iou_threshold: f64) -> Vec<Prediction> {
    let mut keep: Vec<Prediction> = Vec::new();
    for i in confidence_order(preds) {
        if keep.iter().all(|k| iou(&k.bbox, &preds[i].bbox) <= iou_threshold) {
            keep.push(preds[i]);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub euclidean_mae: bool,
    /// Apply NMS at this IoU before evaluating.
    pub nms_iou: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            euclidean_mae: false,
            nms_iou: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub counts: PrecisionRecall,
    pub ap: Vec<ApEntry>,
    pub map_50_95: Option<f64>,
    pub map_undefined: bool,
    pub mae_px: Option<f64>,
    pub mae_undefined: bool,
    pub mae_euclidean: bool,
    pub pr_curve: Vec<PrSample>,
}

pub fn evaluate(images: &[ImageEval], cfg: &EvalConfig) -> EvalReport {
    let filtered;
    let images = match cfg.nms_iou {
        Some(t) => {
            filtered = images
                .iter()
                .map(|i| ImageEval {
                    preds: nms(&i.preds, t),
                    ..i.clone()
                })
                .collect::<Vec<_>>();
            &filtered[..]
        }
        None => images,
    };
    let (ap, map) = map_50_95_with(Execution::default(), images);
    let mae = horizontal_mae(images, cfg.conf_threshold, cfg.iou_threshold, cfg.euclidean_mae);
    EvalReport {
        images: images.len(),
        ground_truth: images.iter().map(|i| i.gts.len()).sum(),
        predictions: images.iter().map(|i| i.preds.len()).sum(),
        conf_threshold: cfg.conf_threshold,
        iou_threshold: cfg.iou_threshold,
        counts: precision_recall(images, cfg.conf_threshold, cfg.iou_threshold),
        ap,
        map_50_95: map,
        map_undefined: map.is_none(),
        mae_px: mae,
        mae_undefined: mae.is_none(),
        mae_euclidean: cfg.euclidean_mae,
        pr_curve: pr_curve(images, cfg.iou_threshold),
    }
}

/// Prediction rows `class cx cy w h confidence`.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(path, i + 1, e.to_string())))
            .collect::<Result<_>>()?;
        if v.len() != 6 {
            return Err(Error::parse(path, i + 1, format!("expected 6 fields, got {}", v.len())));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::parse(path, i + 1, "non-finite value"));
        }
        out.push(Prediction {
            bbox: NormBox::new(v[1], v[2], v[3], v[4]),
            confidence: v[5],
        });
    }
    Ok(out)
}

pub fn format_prediction_line(p: &Prediction) -> String {
    format!(
        "0 {:.6} {:.6} {:.6} {:.6} {:.6}",
        p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h, p.confidence
    )
}

fn txt_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs `<gt_dir>/<id>.txt` label files with `<pred_dir>/<id>.txt`
/// predictions. Orphan prediction files become images without ground truth.
/// Images are ordered by id.
pub fn load_eval_dirs(gt_dir: &Path, pred_dir: &Path, width: u32, height: u32) -> Result<Vec<ImageEval>> {
    let gts = txt_stems(gt_dir)?;
    let preds = txt_stems(pred_dir)?;
    let mut ids: Vec<&String> = gts.keys().chain(preds.keys()).collect();
    ids.sort();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let g = match gts.get(id) {
            Some(p) => read_labels(p)?.into_iter().map(|(_, b)| b).collect(),
            None => {
                tracing::warn!(image = %id, "prediction file without ground truth, counted as false positives");
                Vec::new()
            }
        };
        let p = match preds.get(id) {
            Some(p) => read_predictions(p)?,
            None => Vec::new(),
        };
        out.push(ImageEval {
            image_id: id.clone(),
            width,
            height,
            gts: g,
            preds: p,
        });
    }
    Ok(out)
}

pub fn write_pr_csv(path: &Path, curve: &[PrSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    for s in curve {
        w.serialize(s).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
