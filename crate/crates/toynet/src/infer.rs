//! Inference and evaluation of a trained model.

use mtpose_core::evalproto::{evaluate, EvalDecisions, EvalReport, ImagePredictions};
use mtpose_core::gridcodec::{activate, decode, nms, Annotation, Detection};
use mtpose_core::losses::LossWeights;

use crate::error::Result;
use crate::model::Model;
use crate::synth::{Image, Sample};

/// Objectness is averaged over every non-ignored anchor, so positives sit
/// well below 0.5 for most of training; 0.25 is the detector family's usual cut.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
const BATCH: usize = 32;

/// Thresholded, NMS-filtered detections per image.
pub fn predict(m: &Model, images: &[&Image], conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(BATCH) {
        let act = activate(&m.forward(chunk)?, m.grid())?;
        out.extend(decode(&act, m.grid(), conf_threshold)?.into_iter().map(|d| nms(&d, nms_iou)));
    }
    Ok(out)
}

pub fn evaluate_images(
    m: &Model,
    images: &[&Image],
    annotations: &[Annotation],
    weights: &LossWeights,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<EvalReport> {
    let dets = predict(m, images, conf_threshold, nms_iou)?;
    let preds: Vec<ImagePredictions> = annotations
        .iter()
        .zip(dets)
        .map(|(a, detections)| ImagePredictions { image_id: a.image_id.clone(), detections })
        .collect();
    let spec = m.grid();
    let decisions = EvalDecisions::new(*weights, spec.np, spec.box_activation, conf_threshold, nms_iou);
    Ok(evaluate(&preds, annotations, &decisions)?)
}

pub fn evaluate_model(m: &Model, samples: &[Sample], weights: &LossWeights, conf_threshold: f64, nms_iou: f64) -> Result<EvalReport> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    evaluate_images(m, &images, &anns, weights, conf_threshold, nms_iou)
}
