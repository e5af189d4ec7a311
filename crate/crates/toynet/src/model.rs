//! The multitask network.
//!
//! ```text
//! image ─► backbone (4 strided 3×3 conv + SiLU) ─► features ─┬─► det conv 3×3 + SiLU ─► det 1×1 ─► box logits ─┐
//!                                                            │                                        │         │
//!                                                            └──────────── concat ◄────────────────────┘         │
//!                                                                            │                                   │
//!                                                    pose conv 3×3 + SiLU ─► pose conv 3×3 ─► pose outputs ──────┴─► grid tensor
//! ```
//!
//! The pose branch aggregates the backbone features with the detection
//! head's raw (pre-sigmoid) logits through two convolutions.

use mtpose_core::gridcodec::{GridSpec, GridTensor, ANCHORS_PER_CELL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_backward, conv_forward, silu, silu_backward, ConvCache, ConvShape, FeatureMap};
use crate::synth::Image;

/// Trainable groups, frozen as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Backbone,
    DetectHead,
    PoseHead,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Backbone, Part::DetectHead, Part::PoseHead];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square RGB input in pixels.
    pub input_size: usize,
    pub grid: GridSpec,
    pub backbone_widths: [usize; 4],
    pub backbone_strides: [usize; 4],
    pub detect_width: usize,
    pub aggregation_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 56,
            grid: GridSpec::new(7, 1, 9).expect("default grid spec"),
            backbone_widths: [16, 32, 48, 64],
            backbone_strides: [2, 2, 2, 1],
            detect_width: 64,
            aggregation_width: 64,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let mut size = self.input_size;
        for &s in &self.backbone_strides {
            if s == 0 || size % s != 0 {
                return Err(Error::InvalidArgument(format!(
                    "input size {} is not divisible by the stride chain {:?}",
                    self.input_size, self.backbone_strides
                )));
            }
            size /= s;
        }
        if size != self.grid.k {
            return Err(Error::InvalidArgument(format!(
                "stride chain {:?} maps {} px to a {size}x{size} grid, expected K = {}",
                self.backbone_strides, self.input_size, self.grid.k
            )));
        }
        if self.backbone_widths.iter().chain([&self.detect_width, &self.aggregation_width]).any(|w| *w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn det_channels(&self) -> usize {
        ANCHORS_PER_CELL * (5 + self.grid.cls)
    }

    fn pose_channels(&self) -> usize {
        ANCHORS_PER_CELL * self.grid.np
    }

    /// Layer names, parts and shapes in forward order.
    pub fn layer_plan(&self) -> Vec<(String, Part, ConvShape)> {
        let mut plan = Vec::new();
        let mut cin = 3;
        for (n, (&w, &s)) in self.backbone_widths.iter().zip(&self.backbone_strides).enumerate() {
            plan.push((format!("backbone.{n}"), Part::Backbone, ConvShape { cin, cout: w, kernel: 3, stride: s }));
            cin = w;
        }
        let feat = cin;
        plan.push(("detect.0".into(), Part::DetectHead, ConvShape { cin: feat, cout: self.detect_width, kernel: 3, stride: 1 }));
        plan.push((
            "detect.1".into(),
            Part::DetectHead,
            ConvShape { cin: self.detect_width, cout: self.det_channels(), kernel: 1, stride: 1 },
        ));
        plan.push((
            "aggregate.0".into(),
            Part::PoseHead,
            ConvShape { cin: feat + self.det_channels(), cout: self.aggregation_width, kernel: 3, stride: 1 },
        ));
        plan.push((
            "aggregate.1".into(),
            Part::PoseHead,
            ConvShape { cin: self.aggregation_width, cout: self.pose_channels(), kernel: 3, stride: 1 },
        ));
        plan
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub part: Part,
    pub shape: ConvShape,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

const HIDDEN_GAIN: f64 = 2.0;
/// Output layers start near zero so initial logits and pose outputs are small.
const OUTPUT_GAIN: f64 = 0.1;
/// Pixels are mapped to `(p - PIXEL_MEAN) / PIXEL_SCALE` before the first layer.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 0.25;

const BACKBONE: usize = 4;
const DET0: usize = 4;
const DET1: usize = 5;
const AGG0: usize = 6;
const AGG1: usize = 7;

/// Builds a model with fan-in-scaled uniform weights and zero biases.
///
/// Weight variance is `gain / fan_in`, with `HIDDEN_GAIN` for hidden layers
/// and `OUTPUT_GAIN` for the two output layers.
pub fn init_network(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = cfg
        .layer_plan()
        .into_iter()
        .enumerate()
        .map(|(n, (name, part, shape))| {
            let gain = if n == DET1 || n == AGG1 { OUTPUT_GAIN } else { HIDDEN_GAIN };
            let bound = (3.0 * gain / shape.fan_in() as f64).sqrt();
            let weight = (0..shape.weight_len()).map(|_| rng.gen_range(-bound..bound)).collect();
            Layer { name, part, shape, weight, bias: vec![0.0; shape.cout] }
        })
        .collect();
    Ok(Model { config: cfg.clone(), layers })
}

/// Parameter gradients, one `(weight, bias)` pair per layer; empty for skipped layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    /// Pre-activations of the SiLU layers, indexed like `convs`.
    pre: Vec<Option<FeatureMap>>,
    batch: usize,
}

impl Model {
    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Model> {
        let mut m = init_network(cfg)?;
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        Ok(m)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters flattened in layer order (weight then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weight.len());
            l.weight.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    fn input_map(&self, images: &[&Image]) -> Result<FeatureMap> {
        let s = self.config.input_size;
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut x = FeatureMap::zeros(3, images.len(), s, s);
        for (b, img) in images.iter().enumerate() {
            if img.size != s {
                return Err(Error::InvalidArgument(format!("image is {0}x{0}, model expects {s}x{s}", img.size)));
            }
            for c in 0..3 {
                let dst = &mut x.data[(c * images.len() + b) * s * s..][..s * s];
                for (d, v) in dst.iter_mut().zip(&img.pixels[c * s * s..(c + 1) * s * s]) {
                    *d = (f64::from(*v) - PIXEL_MEAN) / PIXEL_SCALE;
                }
            }
        }
        Ok(x)
    }

    /// Raw (not activated) grid tensor for a batch.
    pub fn forward(&self, images: &[&Image]) -> Result<GridTensor> {
        Ok(self.run(images, false)?.0)
    }

    pub fn forward_cached(&self, images: &[&Image]) -> Result<(GridTensor, ForwardCache)> {
        let (out, cache) = self.run(images, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn run(&self, images: &[&Image], keep: bool) -> Result<(GridTensor, Option<ForwardCache>)> {
        let mut x = self.input_map(images)?;
        let mut convs = Vec::new();
        let mut pre = Vec::new();
        let conv = |x: &FeatureMap, n: usize, act: bool, convs: &mut Vec<ConvCache>, pre: &mut Vec<Option<FeatureMap>>| {
            let l = &self.layers[n];
            let (mut y, cache) = conv_forward(x, &l.shape, &l.weight, &l.bias, keep);
            if let Some(c) = cache {
                convs.push(c);
                pre.push(if act { Some(y.clone()) } else { None });
            }
            if act {
                silu(&mut y);
            }
            y
        };
        for n in 0..BACKBONE {
            x = conv(&x, n, true, &mut convs, &mut pre);
        }
        let feat = x;
        let hidden = conv(&feat, DET0, true, &mut convs, &mut pre);
        let det = conv(&hidden, DET1, false, &mut convs, &mut pre);
        let cat = FeatureMap::concat(&[&feat, &det]);
        let agg = conv(&cat, AGG0, true, &mut convs, &mut pre);
        let pose = conv(&agg, AGG1, false, &mut convs, &mut pre);
        let out = self.assemble(&det, &pose)?;
        let cache = keep.then(|| ForwardCache { convs, pre, batch: images.len() });
        Ok((out, cache))
    }

    /// Interleaves detection and pose channels per anchor into `(B, C, K, K)`.
    fn assemble(&self, det: &FeatureMap, pose: &FeatureMap) -> Result<GridTensor> {
        let spec = &self.config.grid;
        let (b, k) = (det.batch, spec.k);
        let kk = k * k;
        let mut out = GridTensor::zeros([b, spec.channels(), k, k]);
        let det_per = 5 + spec.cls;
        let data = out.data_mut();
        for bi in 0..b {
            for a in 0..ANCHORS_PER_CELL {
                for f in 0..spec.per_anchor() {
                    let (src, c) = if f < det_per { (det, a * det_per + f) } else { (pose, a * spec.np + f - det_per) };
                    let from = &src.data[(c * b + bi) * kk..][..kk];
                    let to = ((bi * spec.channels()) + spec.channel(a, f)) * kk;
                    data[to..to + kk].copy_from_slice(from);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of `assemble` for gradients.
    fn split_grad(&self, grad: &[f64], batch: usize) -> (FeatureMap, FeatureMap) {
        let spec = &self.config.grid;
        let k = spec.k;
        let kk = k * k;
        let det_per = 5 + spec.cls;
        let mut det = FeatureMap::zeros(ANCHORS_PER_CELL * det_per, batch, k, k);
        let mut pose = FeatureMap::zeros(ANCHORS_PER_CELL * spec.np, batch, k, k);
        for bi in 0..batch {
            for a in 0..ANCHORS_PER_CELL {
                for f in 0..spec.per_anchor() {
                    let (dst, c) =
                        if f < det_per { (&mut det, a * det_per + f) } else { (&mut pose, a * spec.np + f - det_per) };
                    let from = ((bi * spec.channels()) + spec.channel(a, f)) * kk;
                    dst.data[(c * batch + bi) * kk..][..kk].copy_from_slice(&grad[from..from + kk]);
                }
            }
        }
        (det, pose)
    }

    /// Backpropagates a gradient with respect to the raw output tensor.
    ///
    /// Layers in `skip` get no parameter gradient; input gradients are still
    /// propagated through them when something below needs them.
    pub fn backward(&self, cache: &ForwardCache, grad_raw: &[f64], skip: &[Part]) -> Result<Grads> {
        let b = cache.batch;
        let spec = &self.config.grid;
        if grad_raw.len() != b * spec.channels() * spec.k * spec.k {
            return Err(Error::InvalidArgument("output gradient has the wrong length".into()));
        }
        let trains = |p: Part| !skip.contains(&p);
        let mut grads = Grads { layers: vec![(Vec::new(), Vec::new()); self.layers.len()] };
        let (mut d_det, d_pose) = self.split_grad(grad_raw, b);

        let step = |n: usize, dy: &mut FeatureMap, need_input: bool, grads: &mut Grads| -> Option<FeatureMap> {
            let l = &self.layers[n];
            if let Some(z) = &cache.pre[n] {
                silu_backward(dy, z);
            }
            let (dx, dw, db) = conv_backward(dy, &l.shape, &l.weight, &cache.convs[n], need_input);
            if trains(l.part) {
                grads.layers[n] = (dw, db);
            }
            dx
        };

        let need_backbone = trains(Part::Backbone);
        let need_det = need_backbone || trains(Part::DetectHead);

        // Pose branch: its input is concat(features, detection logits).
        let mut d_pose = d_pose;
        let mut d_agg = step(AGG1, &mut d_pose, true, &mut grads).expect("input grad");
        let d_cat = step(AGG0, &mut d_agg, need_det, &mut grads);
        let feat_ch = self.layers[DET0].shape.cin;
        let mut d_feat = FeatureMap::zeros(feat_ch, b, spec.k, spec.k);
        if let Some(d_cat) = d_cat {
            let split = feat_ch * d_feat.plane();
            d_feat.data.copy_from_slice(&d_cat.data[..split]);
            for (d, g) in d_det.data.iter_mut().zip(&d_cat.data[split..]) {
                *d += g;
            }
        }

        if need_det {
            let mut d_hidden = step(DET1, &mut d_det, true, &mut grads).expect("input grad");
            if let Some(d) = step(DET0, &mut d_hidden, need_backbone, &mut grads) {
                for (a, g) in d_feat.data.iter_mut().zip(&d.data) {
                    *a += g;
                }
            }
        }

        if need_backbone {
            let mut dy = d_feat;
            for n in (0..BACKBONE).rev() {
                match step(n, &mut dy, n > 0, &mut grads) {
                    Some(dx) => dy = dx,
                    None => break,
                }
            }
        }
        Ok(grads)
    }

    /// Plain gradient descent on every layer whose gradient is present.
    pub fn apply(&mut self, grads: &Grads, lr: f64) {
        for (l, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in l.weight.iter_mut().zip(dw) {
                *p -= lr * g;
            }
            for (p, g) in l.bias.iter_mut().zip(db) {
                *p -= lr * g;
            }
        }
    }
}
