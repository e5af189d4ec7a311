//! Multitask objective: detection box loss, vector pose loss with an
//! orthogonality penalty, and their weighted sum.
//!
//! Detection terms follow the usual single-stage detector recipe: squared
//! error on cell offsets and log-scale sizes, binary cross-entropy on
//! objectness and classes. Offset, size and class terms are averaged over
//! positive anchors, objectness over every non-ignored anchor. With no
//! positives the positive-only terms are zero.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gridcodec::{BoxActivation, GridSpec, GridTensor, OBJ, TH, TW, TX, TY};
use crate::rotgeom::{dot, PoseVectors, Vec3};

/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` inside cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_xy: f64,
    pub lambda_wh: f64,
    pub lambda_cls: f64,
    pub lambda_obj: f64,
    /// Share of the detection loss in the total; the pose loss gets `1 - alpha`.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_xy: 1.0, lambda_wh: 1.0, lambda_cls: 1.0, lambda_obj: 1.0, alpha: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_xy, self.lambda_wh, self.lambda_cls, self.lambda_obj];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-anchor objectness target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objectness {
    Negative,
    Positive,
    Ignore,
}

/// Regression targets of one positive anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveTarget {
    pub batch: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    /// Center offset inside the cell, both in [0, 1].
    pub offset: [f64; 2],
    /// `ln(w / anchor_w)`, `ln(h / anchor_h)`.
    pub log_size: [f64; 2],
    pub class_id: usize,
    /// Nine rotation-column entries or three normalized angles.
    pub pose: Vec<f64>,
}

/// Training targets for a whole batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTargets {
    pub batch: usize,
    pub k: usize,
    /// Indexed `((b * 3 + anchor) * k + row) * k + col`.
    pub objectness: Vec<Objectness>,
    pub positives: Vec<PositiveTarget>,
}

impl BoxTargets {
    pub fn empty(batch: usize, k: usize) -> Self {
        Self { batch, k, objectness: vec![Objectness::Negative; batch * 3 * k * k], positives: Vec::new() }
    }

    pub fn slot(&self, b: usize, anchor: usize, row: usize, col: usize) -> usize {
        ((b * 3 + anchor) * self.k + row) * self.k + col
    }

    /// Concatenates single-image (or smaller batch) targets along the batch axis.
    pub fn stack(parts: &[BoxTargets]) -> Result<Self> {
        let k = parts.first().map(|p| p.k).ok_or_else(|| invalid("cannot stack zero targets"))?;
        let mut out = BoxTargets { batch: 0, k, objectness: Vec::new(), positives: Vec::new() };
        for p in parts {
            if p.k != k {
                return Err(invalid("targets with different grid sizes"));
            }
            out.objectness.extend_from_slice(&p.objectness);
            out.positives.extend(p.positives.iter().cloned().map(|mut t| {
                t.batch += out.batch;
                t
            }));
            out.batch += p.batch;
        }
        Ok(out)
    }

    fn validate(&self, spec: &GridSpec, act: &GridTensor) -> Result<()> {
        let [b, c, h, w] = act.shape();
        if b != self.batch || h != self.k || w != self.k || c != spec.channels() || spec.k != self.k {
            return Err(invalid(format!(
                "targets (batch {}, k {}) do not match tensor shape {:?}",
                self.batch,
                self.k,
                act.shape()
            )));
        }
        if self.objectness.len() != b * 3 * h * w {
            return Err(invalid("objectness mask has the wrong length"));
        }
        for p in &self.positives {
            if p.batch >= b || p.anchor >= 3 || p.row >= h || p.col >= w {
                return Err(invalid("positive target outside the grid"));
            }
            if p.class_id >= spec.cls {
                return Err(invalid(format!("class id {} out of range", p.class_id)));
            }
            if p.pose.len() != spec.np {
                return Err(invalid("pose target length differs from np"));
            }
            if !(0.0..=1.0).contains(&p.offset[0]) || !(0.0..=1.0).contains(&p.offset[1]) {
                return Err(invalid("cell offsets must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Every component of the objective for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_xy: f64,
    pub l_wh: f64,
    pub l_cls: f64,
    pub l_obj: f64,
    pub l_bbox: f64,
    pub l_vmse_x: f64,
    pub l_vmse_y: f64,
    pub l_vmse_z: f64,
    pub l_ortho: f64,
    pub l_pose: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Largest violation of the weighted-sum identities.
    pub fn consistency_error(&self, w: &LossWeights) -> f64 {
        let bbox = w.lambda_xy * self.l_xy
            + w.lambda_wh * self.l_wh
            + w.lambda_cls * self.l_cls
            + w.lambda_obj * self.l_obj;
        let pose = self.l_vmse_x + self.l_vmse_y + self.l_vmse_z + self.l_ortho;
        let total = total_loss(self.l_bbox, self.l_pose, w.alpha);
        [(bbox - self.l_bbox).abs(), (pose - self.l_pose).abs(), (total - self.total).abs()]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_xy, self.l_wh, self.l_cls, self.l_obj, self.l_bbox, self.l_vmse_x, self.l_vmse_y,
            self.l_vmse_z, self.l_ortho, self.l_pose, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Sum of squared differences over the three components.
pub fn vector_mse(pred: &Vec3, truth: &Vec3) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Sum of squared dot products over the three unordered pairs.
pub fn ortho_loss(p: &PoseVectors) -> f64 {
    let d12 = dot(&p.v1, &p.v2);
    let d13 = dot(&p.v1, &p.v3);
    let d23 = dot(&p.v2, &p.v3);
    d12 * d12 + d13 * d13 + d23 * d23
}

/// Vector MSE of each column plus the orthogonality penalty on `pred`.
pub fn pose_loss(pred: &PoseVectors, truth: &PoseVectors) -> f64 {
    vector_mse(&pred.v1, &truth.v1)
        + vector_mse(&pred.v2, &truth.v2)
        + vector_mse(&pred.v3, &truth.v3)
        + ortho_loss(pred)
}

/// Gradient of [`pose_loss`] with respect to `pred`.
pub fn pose_loss_grad(pred: &PoseVectors, truth: &PoseVectors) -> PoseVectors {
    let v = pred.vectors();
    let t = truth.vectors();
    let d = [[0.0, dot(v[0], v[1]), dot(v[0], v[2])], [0.0, 0.0, dot(v[1], v[2])], [0.0; 3]];
    let pair = |i: usize, j: usize| if i < j { d[i][j] } else { d[j][i] };
    let grad = |i: usize| -> Vec3 {
        std::array::from_fn(|c| {
            let mut g = 2.0 * (v[i][c] - t[i][c]);
            for j in (0..3).filter(|&j| j != i) {
                g += 2.0 * pair(i, j) * v[j][c];
            }
            g
        })
    };
    PoseVectors { v1: grad(0), v2: grad(1), v3: grad(2) }
}

/// `alpha * l_bbox + (1 - alpha) * l_pose`.
pub fn total_loss(l_bbox: f64, l_pose: f64, alpha: f64) -> f64 {
    alpha * l_bbox + (1.0 - alpha) * l_pose
}

/// Binary cross-entropy with clamped probability, and its derivative in `p`.
fn bce(p: f64, y: f64) -> (f64, f64) {
    let q = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
    let loss = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
    let dp = if p == q { -y / q + (1.0 - y) / (1.0 - q) } else { 0.0 };
    (loss, dp)
}

/// Detection terms only; the pose fields of the result are zero.
pub fn bbox_loss(
    act: &GridTensor,
    spec: &GridSpec,
    targets: &BoxTargets,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut l = evaluate(act, spec, targets, w, None, false)?;
    l.total = total_loss(l.l_bbox, 0.0, w.alpha);
    Ok(l)
}

/// Full objective on an activated prediction tensor.
pub fn multitask_loss(
    act: &GridTensor,
    spec: &GridSpec,
    targets: &BoxTargets,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    evaluate(act, spec, targets, w, None, true)
}

/// Full objective and its gradient with respect to the activated tensor.
///
/// Chain through [`crate::gridcodec::activation_backward`] to reach the raw logits.
pub fn multitask_loss_grad(
    act: &GridTensor,
    spec: &GridSpec,
    targets: &BoxTargets,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; act.data().len()];
    let l = evaluate(act, spec, targets, w, Some(&mut grad), true)?;
    Ok((l, grad))
}

fn evaluate(
    act: &GridTensor,
    spec: &GridSpec,
    targets: &BoxTargets,
    w: &LossWeights,
    mut grad: Option<&mut [f64]>,
    with_pose: bool,
) -> Result<LossBreakdown> {
    spec.validate()?;
    w.validate()?;
    if !act.is_activated() {
        return Err(Error::State("losses expect an activated tensor".into()));
    }
    targets.validate(spec, act)?;
    let [batch, _, k, _] = act.shape();
    let x = act.data();

    let mut out = LossBreakdown::default();

    // Objectness over every non-ignored anchor.
    let counted = targets.objectness.iter().filter(|o| **o != Objectness::Ignore).count();
    if counted > 0 {
        let norm = 1.0 / counted as f64;
        for b in 0..batch {
            for a in 0..3 {
                for i in 0..k {
                    for j in 0..k {
                        let y = match targets.objectness[targets.slot(b, a, i, j)] {
                            Objectness::Ignore => continue,
                            Objectness::Positive => 1.0,
                            Objectness::Negative => 0.0,
                        };
                        let idx = act.index(b, spec.channel(a, OBJ), i, j);
                        let (l, dp) = bce(x[idx], y);
                        out.l_obj += l * norm;
                        if let Some(g) = grad.as_deref_mut() {
                            g[idx] += w.lambda_obj * w.alpha * dp * norm;
                        }
                    }
                }
            }
        }
    }

    let npos = targets.positives.len();
    if npos > 0 {
        let norm = 1.0 / npos as f64;
        let bbox_scale = w.alpha * norm;
        let pose_scale = (1.0 - w.alpha) * norm;
        let mut pose_parts = [0.0; 4];
        for p in &targets.positives {
            let at = |c: usize| act.index(p.batch, spec.channel(p.anchor, c), p.row, p.col);

            for (axis, ch) in [TX, TY].into_iter().enumerate() {
                let idx = at(ch);
                let (offset, d_offset) = match spec.box_activation {
                    BoxActivation::Sigmoid => (x[idx], 1.0),
                    BoxActivation::Tanh => ((x[idx] + 1.0) * 0.5, 0.5),
                };
                let diff = offset - p.offset[axis];
                out.l_xy += diff * diff * norm;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += w.lambda_xy * bbox_scale * 2.0 * diff * d_offset;
                }
            }

            for (axis, ch) in [TW, TH].into_iter().enumerate() {
                let idx = at(ch);
                let diff = x[idx] - p.log_size[axis];
                out.l_wh += diff * diff * norm;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += w.lambda_wh * bbox_scale * 2.0 * diff;
                }
            }

            for c in 0..spec.cls {
                let idx = at(5 + c);
                let y = if c == p.class_id { 1.0 } else { 0.0 };
                let (l, dp) = bce(x[idx], y);
                out.l_cls += l * norm;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += w.lambda_cls * bbox_scale * dp;
                }
            }

            if !with_pose {
                continue;
            }
            let base = 5 + spec.cls;
            let pred: Vec<f64> = (0..spec.np).map(|c| x[at(base + c)]).collect();
            let mut pose_grad = vec![0.0; spec.np];
            if spec.np == 9 {
                let pv = PoseVectors::from_flat(&pred)?;
                let tv = PoseVectors::from_flat(&p.pose)?;
                pose_parts[0] += vector_mse(&pv.v1, &tv.v1) * norm;
                pose_parts[1] += vector_mse(&pv.v2, &tv.v2) * norm;
                pose_parts[2] += vector_mse(&pv.v3, &tv.v3) * norm;
                pose_parts[3] += ortho_loss(&pv) * norm;
                pose_grad.copy_from_slice(&pose_loss_grad(&pv, &tv).to_flat());
            } else {
                // Euler variant: squared error on each normalized angle, no orthogonality term.
                for c in 0..3 {
                    let diff = pred[c] - p.pose[c];
                    pose_parts[c] += diff * diff * norm;
                    pose_grad[c] = 2.0 * diff;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (c, gv) in pose_grad.iter().enumerate() {
                    g[at(base + c)] += pose_scale * gv;
                }
            }
        }
        [out.l_vmse_x, out.l_vmse_y, out.l_vmse_z, out.l_ortho] = pose_parts;
    }

    out.l_bbox = w.lambda_xy * out.l_xy + w.lambda_wh * out.l_wh + w.lambda_cls * out.l_cls + w.lambda_obj * out.l_obj;
    out.l_pose = out.l_vmse_x + out.l_vmse_y + out.l_vmse_z + out.l_ortho;
    out.total = total_loss(out.l_bbox, out.l_pose, w.alpha);
    if !out.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {out:?}")));
    }
    Ok(out)
}

/// Compares `analytic` with a central-difference gradient of `f` at `point`.
///
/// Returns the largest `|a - n| / max(1e-8, |a| + |n|)` over coordinates.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(invalid("gradient and point lengths differ"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value probing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
