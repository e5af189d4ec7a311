//! Joint detection + pose output grid.
//!
//! A prediction at one scale is a tensor of shape `(bs, 3*(5+cls+np), K, K)`.
//! Each of the three anchors owns a contiguous block of `5 + cls + np`
//! channels laid out as `tx, ty, tw, th, objectness, class scores..., pose...`.
//! Pose channels hold either the nine entries of the three rotation columns
//! (`np = 9`) or yaw, pitch and roll scaled to roughly [-1, 1] (`np = 3`).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{BoxTargets, Objectness, PositiveTarget};
use crate::rotgeom::{euler_to_matrix, pose_vectors_from_matrix, EulerAngles, PoseVectors};

pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const OBJ: usize = 4;

pub const ANCHORS_PER_CELL: usize = 3;

/// Anchor priors `(w, h)` normalized to the image size.
pub const DEFAULT_ANCHORS: [[f64; 2]; 3] = [[0.1, 0.14], [0.27, 0.36], [0.6, 0.78]];

/// Unassigned anchors overlapping a ground truth by more than this are ignored.
pub const IGNORE_IOU: f64 = 0.5;

const YAW_SCALE: f64 = 180.0;
const TILT_SCALE: f64 = 90.0;

/// How the center offsets are squashed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoxActivation {
    /// Sigmoid on offsets, objectness and classes.
    #[default]
    #[serde(rename = "sigmoid-conf")]
    Sigmoid,
    /// `tanh` on offsets (remapped through `(t + 1) / 2`), sigmoid elsewhere.
    #[serde(rename = "tanh-normalized")]
    Tanh,
}

/// Shape and interpretation of one output scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub k: usize,
    #[serde(default = "default_anchors")]
    pub anchors: [[f64; 2]; 3],
    #[serde(default = "default_cls")]
    pub cls: usize,
    #[serde(default = "default_np")]
    pub np: usize,
    #[serde(default)]
    pub box_activation: BoxActivation,
}

fn default_anchors() -> [[f64; 2]; 3] {
    DEFAULT_ANCHORS
}

fn default_cls() -> usize {
    1
}

fn default_np() -> usize {
    9
}

impl GridSpec {
    /// Spec with default anchors and sigmoid activation.
    pub fn new(k: usize, cls: usize, np: usize) -> Result<Self> {
        let spec = Self { k, anchors: DEFAULT_ANCHORS, cls, np, box_activation: BoxActivation::Sigmoid };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_activation(mut self, act: BoxActivation) -> Self {
        self.box_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        channels_for(self.cls, self.np)?;
        if self.k == 0 {
            return Err(invalid("grid size must be at least 1"));
        }
        if self.anchors.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("anchor sizes must be positive"));
        }
        Ok(())
    }

    pub fn per_anchor(&self) -> usize {
        5 + self.cls + self.np
    }

    pub fn channels(&self) -> usize {
        ANCHORS_PER_CELL * self.per_anchor()
    }

    /// Absolute channel of field `field` (see [`TX`]..[`OBJ`], then classes, then pose) of `anchor`.
    pub fn channel(&self, anchor: usize, field: usize) -> usize {
        anchor * self.per_anchor() + field
    }

    pub fn pose_field(&self, p: usize) -> usize {
        5 + self.cls + p
    }
}

/// Channel count `3 * (5 + cls + np)`.
pub fn channels_for(cls: usize, np: usize) -> Result<usize> {
    if cls < 1 {
        return Err(invalid("at least one class is required"));
    }
    if np != 3 && np != 9 {
        return Err(invalid(format!("np must be 3 or 9, got {np}")));
    }
    Ok(ANCHORS_PER_CELL * (5 + cls + np))
}

/// Dense `(batch, channels, K, K)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    shape: [usize; 4],
    data: Vec<f64>,
    activated: bool,
}

impl GridTensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()], activated: false }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>, activated: bool) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(invalid(format!("{} values do not fill shape {shape:?}", data.len())));
        }
        if shape[2] != shape[3] {
            return Err(invalid("grid tensors must be square"));
        }
        Ok(Self { shape, data, activated })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_activated(&self) -> bool {
        self.activated
    }

    pub fn index(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, ch, k, _] = self.shape;
        ((b * ch + c) * k + i) * k + j
    }

    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(b, c, i, j)]
    }

    fn check_spec(&self, spec: &GridSpec) -> Result<()> {
        spec.validate()?;
        let [_, c, k, _] = self.shape;
        if c != spec.channels() || k != spec.k {
            return Err(invalid(format!(
                "tensor shape {:?} does not match spec (channels {}, K {})",
                self.shape,
                spec.channels(),
                spec.k
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Applies the output activations: squashed offsets, sigmoid objectness and
/// classes; sizes and pose channels stay raw.
pub fn activate(raw: &GridTensor, spec: &GridSpec) -> Result<GridTensor> {
    if raw.activated {
        return Err(Error::State("tensor is already activated".into()));
    }
    raw.check_spec(spec)?;
    let mut out = raw.clone();
    out.activated = true;
    let [batch, _, k, _] = raw.shape;
    let plane = k * k;
    for b in 0..batch {
        for a in 0..ANCHORS_PER_CELL {
            for field in 0..5 + spec.cls {
                let f: fn(f64) -> f64 = match field {
                    TW | TH => continue,
                    TX | TY if spec.box_activation == BoxActivation::Tanh => f64::tanh,
                    _ => sigmoid,
                };
                let start = raw.index(b, spec.channel(a, field), 0, 0);
                out.data[start..start + plane].iter_mut().for_each(|v| *v = f(*v));
            }
        }
    }
    Ok(out)
}

/// Chains a gradient with respect to activated values back to the raw logits.
pub fn activation_backward(act: &GridTensor, spec: &GridSpec, grad_act: &[f64]) -> Result<Vec<f64>> {
    if !act.activated {
        return Err(Error::State("activation_backward needs the activated tensor".into()));
    }
    act.check_spec(spec)?;
    if grad_act.len() != act.data.len() {
        return Err(invalid("gradient length differs from tensor length"));
    }
    let mut grad = grad_act.to_vec();
    let [batch, _, k, _] = act.shape;
    let plane = k * k;
    for b in 0..batch {
        for a in 0..ANCHORS_PER_CELL {
            for field in 0..5 + spec.cls {
                let tanh = matches!(field, TX | TY) && spec.box_activation == BoxActivation::Tanh;
                if matches!(field, TW | TH) {
                    continue;
                }
                let start = act.index(b, spec.channel(a, field), 0, 0);
                for idx in start..start + plane {
                    let y = act.data[idx];
                    grad[idx] *= if tanh { 1.0 - y * y } else { y * (1.0 - y) };
                }
            }
        }
    }
    Ok(grad)
}

/// Box as center and size, normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: (x0 + x1) * 0.5, cy: (y0 + y1) * 0.5, w: x1 - x0, h: y1 - y0 }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w * 0.5, self.cy - self.h * 0.5, self.cx + self.w * 0.5, self.cy + self.h * 0.5]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(invalid(format!("box sizes must be positive: {bx:?}")));
        }
    }
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from the same corner arithmetic so identical boxes give exactly 1.
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    (inter / (area_a + area_b - inter)).min(1.0)
}

/// IoU of two `(w, h)` shapes sharing a center.
fn shape_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// Decoded pose of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PosePayload {
    Vectors(PoseVectors),
    Euler(EulerAngles),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: usize,
    pub class_score: f64,
    pub pose: PosePayload,
}

/// Decodes every image of an activated tensor.
pub fn decode(act: &GridTensor, spec: &GridSpec, conf_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    (0..act.shape[0]).map(|b| decode_image(act, spec, b, conf_threshold)).collect()
}

/// Decodes image `b`: every (cell, anchor) whose objectness reaches `conf_threshold`.
pub fn decode_image(act: &GridTensor, spec: &GridSpec, b: usize, conf_threshold: f64) -> Result<Vec<Detection>> {
    if !act.activated {
        return Err(Error::State("decode expects an activated tensor".into()));
    }
    act.check_spec(spec)?;
    if b >= act.shape[0] {
        return Err(invalid(format!("batch index {b} out of range")));
    }
    let k = spec.k as f64;
    let mut out = Vec::new();
    for i in 0..spec.k {
        for j in 0..spec.k {
            for a in 0..ANCHORS_PER_CELL {
                let at = |field: usize| act.get(b, spec.channel(a, field), i, j);
                let conf = at(OBJ);
                if !(conf >= conf_threshold) {
                    continue;
                }
                let (tx, ty) = match spec.box_activation {
                    BoxActivation::Sigmoid => (at(TX), at(TY)),
                    BoxActivation::Tanh => ((at(TX) + 1.0) * 0.5, (at(TY) + 1.0) * 0.5),
                };
                let [aw, ah] = spec.anchors[a];
                let bbox = BBox::new((j as f64 + tx) / k, (i as f64 + ty) / k, aw * at(TW).exp(), ah * at(TH).exp());
                let (class_id, class_score) = (0..spec.cls)
                    .map(|c| (c, at(5 + c)))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                let pose_raw: Vec<f64> = (0..spec.np).map(|p| at(spec.pose_field(p))).collect();
                out.push(Detection { bbox, confidence: conf, class_id, class_score, pose: pose_from_outputs(&pose_raw)? });
            }
        }
    }
    Ok(out)
}

/// Interprets raw pose channels: nine column entries, or three normalized angles.
pub fn pose_from_outputs(raw: &[f64]) -> Result<PosePayload> {
    match raw.len() {
        9 => Ok(PosePayload::Vectors(PoseVectors::from_flat(raw)?)),
        3 => Ok(PosePayload::Euler(
            EulerAngles::new(
                raw[0] * YAW_SCALE,
                (raw[1] * TILT_SCALE).clamp(-90.0, 90.0),
                raw[2] * TILT_SCALE,
            )
            .normalized(),
        )),
        n => Err(invalid(format!("np must be 3 or 9, got {n}"))),
    }
}

/// Regression target for a ground-truth pose.
pub fn pose_target(pose: &EulerAngles, np: usize) -> Result<Vec<f64>> {
    let p = pose.normalized();
    match np {
        9 => Ok(pose_vectors_from_matrix(&euler_to_matrix(p)?).to_flat().to_vec()),
        3 => Ok(vec![p.yaw / YAW_SCALE, p.pitch / TILT_SCALE, p.roll / TILT_SCALE]),
        n => Err(invalid(format!("np must be 3 or 9, got {n}"))),
    }
}

/// One annotated object: box `[cx, cy, w, h]` and head pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedObject {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub pose: EulerAngles,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub class_id: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl AnnotatedObject {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// Ground truth of one image; one line of the annotation JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: String,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn validate(&self, cls: usize) -> Result<()> {
        for (n, o) in self.objects.iter().enumerate() {
            let [cx, cy, w, h] = o.bbox;
            if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                return Err(invalid(format!("{}: object {n} has its center outside the image", self.image_id)));
            }
            if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                return Err(invalid(format!("{}: object {n} has a non-positive size", self.image_id)));
            }
            if !o.pose.is_finite() {
                return Err(invalid(format!("{}: object {n} has a non-finite pose", self.image_id)));
            }
            if o.class_id >= cls {
                return Err(invalid(format!("{}: object {n} has class {} >= {cls}", self.image_id, o.class_id)));
            }
        }
        Ok(())
    }
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("annotation line {}: {e}", n + 1)))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(mut writer: W, anns: &[Annotation]) -> Result<()> {
    for a in anns {
        serde_json::to_writer(&mut writer, a)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Builds single-image training targets.
///
/// Each object goes to the cell holding its center and the free anchor with
/// the best shape IoU. Objects are placed largest first, so when two compete
/// for a (cell, anchor) the larger one wins and the other falls back to its
/// next-best anchor. Other anchors of the cell overlapping an object by more
/// than [`IGNORE_IOU`] are ignored.
pub fn encode_targets(ann: &Annotation, spec: &GridSpec) -> Result<BoxTargets> {
    spec.validate()?;
    ann.validate(spec.cls)?;
    let k = spec.k;
    let mut t = BoxTargets::empty(1, k);

    let mut order: Vec<usize> = (0..ann.objects.len()).collect();
    order.sort_by(|&a, &b| ann.objects[b].bbox().area().total_cmp(&ann.objects[a].bbox().area()).then(a.cmp(&b)));

    let cell_of = |v: f64| ((v * k as f64).floor() as usize).min(k - 1);
    let mut placed = Vec::with_capacity(order.len());
    for &n in &order {
        let obj = &ann.objects[n];
        let bx = obj.bbox();
        let (row, col) = (cell_of(bx.cy), cell_of(bx.cx));
        let mut ranked: Vec<usize> = (0..ANCHORS_PER_CELL).collect();
        ranked.sort_by(|&a, &b| {
            shape_iou([bx.w, bx.h], spec.anchors[b]).total_cmp(&shape_iou([bx.w, bx.h], spec.anchors[a])).then(a.cmp(&b))
        });
        let anchor = ranked
            .into_iter()
            .find(|&a| t.objectness[t.slot(0, a, row, col)] != Objectness::Positive)
            .ok_or_else(|| invalid(format!("{}: more than 3 objects share cell ({row}, {col})", ann.image_id)))?;
        let slot = t.slot(0, anchor, row, col);
        t.objectness[slot] = Objectness::Positive;
        let [aw, ah] = spec.anchors[anchor];
        t.positives.push(PositiveTarget {
            batch: 0,
            anchor,
            row,
            col,
            offset: [bx.cx * k as f64 - col as f64, bx.cy * k as f64 - row as f64],
            log_size: [(bx.w / aw).ln(), (bx.h / ah).ln()],
            class_id: obj.class_id,
            pose: pose_target(&obj.pose, spec.np)?,
        });
        placed.push((bx, row, col));
    }

    for (bx, row, col) in placed {
        for a in 0..ANCHORS_PER_CELL {
            let slot = t.slot(0, a, row, col);
            if t.objectness[slot] == Objectness::Negative && shape_iou([bx.w, bx.h], spec.anchors[a]) > IGNORE_IOU {
                t.objectness[slot] = Objectness::Ignore;
            }
        }
    }
    Ok(t)
}

/// Raw logits that activate and decode exactly onto `targets`.
///
/// Positives get objectness logit `+20`, everything else `-20`; class logits
/// are `±20`; offsets go through the inverse of the box activation.
pub fn perfect_logits(targets: &BoxTargets, spec: &GridSpec) -> Result<GridTensor> {
    spec.validate()?;
    if targets.k != spec.k {
        return Err(invalid("targets and spec disagree on K"));
    }
    let mut raw = GridTensor::zeros([targets.batch, spec.channels(), spec.k, spec.k]);
    for b in 0..targets.batch {
        for a in 0..ANCHORS_PER_CELL {
            for i in 0..spec.k {
                for j in 0..spec.k {
                    let idx = raw.index(b, spec.channel(a, OBJ), i, j);
                    raw.data[idx] = -20.0;
                }
            }
        }
    }
    const EDGE: f64 = 1e-12;
    for p in &targets.positives {
        let mut set = |field: usize, v: f64| {
            let idx = raw.index(p.batch, spec.channel(p.anchor, field), p.row, p.col);
            raw.data[idx] = v;
        };
        for (axis, field) in [TX, TY].into_iter().enumerate() {
            let o = p.offset[axis].clamp(EDGE, 1.0 - EDGE);
            set(field, match spec.box_activation {
                BoxActivation::Sigmoid => logit(o),
                BoxActivation::Tanh => (2.0 * o - 1.0).atanh(),
            });
        }
        set(TW, p.log_size[0]);
        set(TH, p.log_size[1]);
        set(OBJ, 20.0);
        for c in 0..spec.cls {
            set(5 + c, if c == p.class_id { 20.0 } else { -20.0 });
        }
        for (n, v) in p.pose.iter().enumerate() {
            set(spec.pose_field(n), *v);
        }
    }
    Ok(raw)
}

/// Greedy non-maximum suppression within each class.
///
/// Detections are visited by descending confidence (ties: lower input index
/// first); one is kept iff its IoU with every kept detection of the same
/// class is below `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<&Detection> = Vec::new();
    for n in order {
        let d = &dets[n];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Concatenates per-scale detections and runs a single NMS pass.
pub fn merge_scales(per_scale: Vec<Vec<Detection>>, iou_threshold: f64) -> Vec<Detection> {
    let all: Vec<Detection> = per_scale.into_iter().flatten().collect();
    nms(&all, iou_threshold)
}
