//! Evaluation: detection IoU and per-angle pose MAE.
//!
//! Predictions are matched to ground truth greedily by confidence. Mean IoU
//! is taken over all ground-truth objects, a missed object counting as 0.
//! Pose MAE is averaged over matched pairs only; misses and spurious
//! detections are reported as counts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gridcodec::{iou, Annotation, BoxActivation, Detection, PosePayload};
use crate::losses::LossWeights;
use crate::rotgeom::{angular_error, matrix_from_pose_vectors, matrix_to_euler, nearest_rotation, EulerAngles, EULER_CONVENTION};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// One-to-one greedy matching.
///
/// Predictions are visited by descending confidence (ties by index); each
/// takes the unmatched ground truth it overlaps most, provided that IoU is at
/// least `iou_threshold`.
pub fn match_detections(preds: &[Detection], gts: &Annotation, iou_threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.objects.len()];
    let mut m = Matching::default();
    for p in order {
        let best = gts
            .objects
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, o)| (g, iou(&preds[p].bbox, &o.bbox()).unwrap_or(0.0)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                m.pairs.push(MatchedPair { pred: p, gt: g, iou: v });
            }
            _ => m.unmatched_preds.push(p),
        }
    }
    m.unmatched_preds.sort_unstable();
    m.unmatched_gts = taken.iter().enumerate().filter(|(_, t)| !**t).map(|(g, _)| g).collect();
    m
}

/// Euler angles of a predicted pose; vector predictions are first projected
/// onto the nearest proper rotation.
pub fn predicted_angles(pose: &PosePayload) -> Result<EulerAngles> {
    match pose {
        PosePayload::Euler(e) => Ok(e.normalized()),
        PosePayload::Vectors(v) => Ok(matrix_to_euler(&nearest_rotation(&matrix_from_pose_vectors(v))?)),
    }
}

/// Mean absolute yaw, pitch and roll error over `(prediction, truth)` pairs.
pub fn pose_mae(pairs: &[(PosePayload, EulerAngles)]) -> Result<[f64; 3]> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("pose MAE over zero matched pairs".into()));
    }
    let mut sum = [0.0; 3];
    for (pred, truth) in pairs {
        let e = angular_error(&predicted_angles(pred)?, &truth.normalized());
        for (s, v) in sum.iter_mut().zip(e) {
            *s += v;
        }
    }
    Ok(sum.map(|s| s / pairs.len() as f64))
}

/// Mean IoU over ground-truth objects; unmatched objects contribute 0.
pub fn detection_iou_score(preds: &[Detection], gts: &Annotation, iou_threshold: f64) -> Result<f64> {
    if gts.objects.is_empty() {
        return Err(Error::UndefinedMetric("mean IoU over zero ground-truth objects".into()));
    }
    let m = match_detections(preds, gts, iou_threshold);
    Ok(m.pairs.iter().map(|p| p.iou).sum::<f64>() / gts.objects.len() as f64)
}

/// Configuration recorded next to every reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDecisions {
    pub match_iou_threshold: f64,
    pub iou_aggregation: String,
    pub loss_weights: LossWeights,
    pub np: usize,
    pub box_activation: BoxActivation,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub euler_convention: String,
}

impl EvalDecisions {
    pub fn new(loss_weights: LossWeights, np: usize, box_activation: BoxActivation, conf_threshold: f64, nms_threshold: f64) -> Self {
        Self {
            match_iou_threshold: DEFAULT_MATCH_IOU,
            iou_aggregation: "mean over ground-truth objects, misses count as 0".into(),
            loss_weights,
            np,
            box_activation,
            conf_threshold,
            nms_threshold,
            euler_convention: EULER_CONVENTION.into(),
        }
    }
}

/// Detections of one image, after NMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when there are no ground-truth objects.
    pub mean_iou: Option<f64>,
    /// Absent when nothing was matched.
    pub mae_yaw: Option<f64>,
    pub mae_pitch: Option<f64>,
    pub mae_roll: Option<f64>,
    pub mae_avg: Option<f64>,
    pub matched_count: usize,
    pub missed_count: usize,
    pub spurious_count: usize,
    pub gt_count: usize,
    pub image_count: usize,
    pub decisions: EvalDecisions,
}

/// Aggregates IoU and pose MAE over a dataset. Predictions and annotations
/// must list the same image ids in the same order.
pub fn evaluate(preds: &[ImagePredictions], anns: &[Annotation], decisions: &EvalDecisions) -> Result<EvalReport> {
    if preds.len() != anns.len() {
        return Err(invalid(format!("{} prediction sets for {} annotated images", preds.len(), anns.len())));
    }
    let thr = decisions.match_iou_threshold;
    let mut iou_sum = 0.0;
    let mut gt_count = 0;
    let mut matched = 0;
    let mut missed = 0;
    let mut spurious = 0;
    let mut pose_pairs = Vec::new();
    for (p, a) in preds.iter().zip(anns) {
        if p.image_id != a.image_id {
            return Err(invalid(format!("image id mismatch: {:?} vs {:?}", p.image_id, a.image_id)));
        }
        let m = match_detections(&p.detections, a, thr);
        gt_count += a.objects.len();
        matched += m.pairs.len();
        missed += m.unmatched_gts.len();
        spurious += m.unmatched_preds.len();
        for pair in &m.pairs {
            iou_sum += pair.iou;
            pose_pairs.push((p.detections[pair.pred].pose, a.objects[pair.gt].pose));
        }
    }
    let mae = match pose_mae(&pose_pairs) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        mean_iou: (gt_count > 0).then(|| iou_sum / gt_count as f64),
        mae_yaw: mae.map(|m| m[0]),
        mae_pitch: mae.map(|m| m[1]),
        mae_roll: mae.map(|m| m[2]),
        mae_avg: mae.map(|m| (m[0] + m[1] + m[2]) / 3.0),
        matched_count: matched,
        missed_count: missed,
        spurious_count: spurious,
        gt_count,
        image_count: anns.len(),
        decisions: decisions.clone(),
    })
}
