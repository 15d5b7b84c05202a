//! Axis-aligned IoU, per-class average precision and mAP.

use serde::{Deserialize, Serialize};

use crate::head::Detection;
use crate::scene::{Box3, LabeledBox};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let inter = a.intersection_volume(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.volume() + b.volume() - inter)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PrCurve,
}

/// A scored box tagged with the scene it was predicted in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneDetection {
    pub scene: usize,
    pub bbox: Box3,
    pub score: f64,
}

/// Area under the monotone precision envelope (all-point interpolation).
pub fn interpolated_ap(curve: &PrCurve) -> f64 {
    let n = curve.recall.len();
    let mut envelope = curve.precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..n {
        ap += (curve.recall[i] - prev) * envelope[i];
        prev = curve.recall[i];
    }
    ap
}

/// AP of one class pooled over scenes. Detections are ranked by descending
/// score (ties keep input order); each takes the highest-IoU unmatched
/// ground truth of its scene with IoU ≥ `iou_threshold`, otherwise it is a
/// false positive.
pub fn average_precision_pooled(detections: &[SceneDetection], gts: &[Vec<Box3>], iou_threshold: f64) -> ApResult {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve = PrCurve::default();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(scene_gts) = gts.get(d.scene) {
            for (g, gt) in scene_gts.iter().enumerate() {
                if used[d.scene][g] {
                    continue;
                }
                let iou = iou3d(&d.bbox, gt);
                if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        if let Some((g, _)) = best {
            used[d.scene][g] = true;
            tp += 1;
        }
        curve.recall.push(if total == 0 { 0.0 } else { tp as f64 / total as f64 });
        curve.precision.push(tp as f64 / (rank + 1) as f64);
    }
    let ap = if total == 0 { 0.0 } else { interpolated_ap(&curve) };
    ApResult { ap, curve }
}

/// Single-scene form of [`average_precision_pooled`].
pub fn average_precision(detections: &[(f64, Box3)], gts: &[Box3], iou_threshold: f64) -> ApResult {
    let dets: Vec<SceneDetection> = detections
        .iter()
        .map(|&(score, bbox)| SceneDetection { scene: 0, bbox, score })
        .collect();
    average_precision_pooled(&dets, &[gts.to_vec()], iou_threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    /// AP per threshold, aligned with [`EvalResult::thresholds`].
    pub ap: Vec<f64>,
    pub curves: Vec<PrCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// Mean AP per threshold over classes with at least one ground truth.
    pub map: Vec<f64>,
    pub per_class: Vec<ClassEval>,
}

impl EvalResult {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.map[i])
    }

    pub fn to_json(&self) -> crate::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Per-class AP pooled over scenes at each threshold.
pub fn evaluate(detections: &[Vec<Detection>], gts: &[Vec<LabeledBox>], thresholds: &[f64]) -> EvalResult {
    let classes = detections
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .max()
        .map_or(0, |m| m + 1);
    let mut per_class = Vec::new();
    for c in 0..classes {
        let class_gts: Vec<Vec<Box3>> = gts
            .iter()
            .map(|s| s.iter().filter(|g| g.class_id == c).map(|g| g.bbox).collect())
            .collect();
        let gt_count = class_gts.iter().map(Vec::len).sum();
        if gt_count == 0 {
            continue;
        }
        let dets: Vec<SceneDetection> = detections
            .iter()
            .enumerate()
            .flat_map(|(scene, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| SceneDetection {
                    scene,
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        let results: Vec<ApResult> = thresholds
            .iter()
            .map(|&t| average_precision_pooled(&dets, &class_gts, t))
            .collect();
        per_class.push(ClassEval {
            class_id: c,
            gt_count,
            ap: results.iter().map(|r| r.ap).collect(),
            curves: results.into_iter().map(|r| r.curve).collect(),
        });
    }
    let map = (0..thresholds.len())
        .map(|t| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap[t]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    EvalResult {
        thresholds: thresholds.to_vec(),
        map,
        per_class,
    }
}
