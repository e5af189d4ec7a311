//! Tensor-level subcommands: loss, encode, decode, nms.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mtpose_core::evalproto::ImagePredictions;
use mtpose_core::gridcodec::{
    self, activate, encode_targets, perfect_logits, read_annotations, Annotation, BoxActivation, GridSpec, GridTensor,
};
use mtpose_core::losses::{multitask_loss, BoxTargets, LossWeights};
use mtpose_core::tensorfile::{self, DType, Header};
use mtpose_toynet::infer::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use serde_json::json;

use crate::config::resolve_grid;
use crate::{fmt, usage, GridFlags};

#[derive(Args)]
pub struct LossArgs {
    /// Prediction tensor (raw or activated).
    #[arg(long)]
    pred: PathBuf,
    /// Annotation JSON lines, one per batch entry.
    #[arg(long)]
    ann: PathBuf,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    ann: PathBuf,
    /// Output tensor of raw logits.
    #[arg(long)]
    out: PathBuf,
    /// Grid side.
    #[arg(long, default_value_t = 7)]
    k: usize,
    /// Pose outputs per anchor: 9 for pose vectors, 3 for Euler angles.
    #[arg(long, default_value_t = 9)]
    np: usize,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Prediction tensor (raw or activated).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f64,
    /// Apply NMS at this IoU threshold.
    #[arg(long)]
    nms: Option<f64>,
    /// Write full-precision JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
pub struct NmsArgs {
    /// Detection JSON lines as written by `decode`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn grid_spec(flags: &GridFlags, k: usize, np: usize) -> Result<(GridSpec, LossWeights)> {
    let act = serde_json::to_value(BoxActivation::from(flags.box_activation))?;
    let doc = json!({ "grid": { "k": k, "np": np, "cls": flags.cls, "box_activation": act } });
    resolve_grid(doc, flags.config.as_deref())
}

/// Grid spec for an existing tensor: `K` and `np` come from its shape.
fn spec_for_tensor(flags: &GridFlags, t: &GridTensor) -> Result<(GridSpec, LossWeights)> {
    let [_, c, k, k2] = t.shape();
    if k != k2 {
        return Err(anyhow::anyhow!("grid tensor is not square: {:?}", t.shape()));
    }
    let (mut spec, w) = grid_spec(flags, k, 9)?;
    let per_anchor = c / 3;
    if c % 3 != 0 || per_anchor < 5 + spec.cls + 1 {
        return Err(anyhow::anyhow!("{c} channels do not fit 3 anchors with {} classes", spec.cls));
    }
    spec.np = per_anchor - 5 - spec.cls;
    spec.k = k;
    spec.validate()?;
    Ok((spec, w))
}

fn read_tensor(path: &Path) -> Result<(GridTensor, Option<Vec<String>>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (h, data) = tensorfile::read(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let shape: [usize; 4] =
        h.shape.as_slice().try_into().map_err(|_| anyhow::anyhow!("grid tensors are 4-D, got {:?}", h.shape))?;
    let ids = match h.meta.as_ref().and_then(|m| m.get("image_ids")) {
        Some(v) => Some(serde_json::from_value(v.clone()).context("image_ids in tensor meta")?),
        None => None,
    };
    Ok((GridTensor::from_vec(shape, data, h.activated)?, ids))
}

fn read_anns(path: &Path) -> Result<Vec<Annotation>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_annotations(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn activated(t: GridTensor, spec: &GridSpec) -> Result<GridTensor> {
    Ok(if t.is_activated() { t } else { activate(&t, spec)? })
}

fn encode_batch(anns: &[Annotation], spec: &GridSpec) -> Result<BoxTargets> {
    let parts = anns
        .iter()
        .map(|a| encode_targets(a, spec).with_context(|| format!("encoding {}", a.image_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoxTargets::stack(&parts)?)
}

pub fn loss(a: &LossArgs) -> Result<()> {
    let (t, _) = read_tensor(&a.pred)?;
    let (spec, w) = spec_for_tensor(&a.grid, &t)?;
    let anns = read_anns(&a.ann)?;
    if anns.len() != t.shape()[0] {
        return Err(anyhow::anyhow!("{} annotations for a batch of {}", anns.len(), t.shape()[0]));
    }
    let act = activated(t, &spec)?;
    let l = multitask_loss(&act, &spec, &encode_batch(&anns, &spec)?, &w)?;
    if !l.is_finite() {
        return Err(anyhow::anyhow!("non-finite loss: {l:?}"));
    }
    out!("{}", fmt::json(&serde_json::to_value(l)?));
    Ok(())
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let (spec, _) = grid_spec(&a.grid, a.k, a.np)?;
    let anns = read_anns(&a.ann)?;
    if anns.is_empty() {
        return Err(anyhow::anyhow!("no annotations in {}", a.ann.display()));
    }
    let targets = encode_batch(&anns, &spec)?;
    let raw = perfect_logits(&targets, &spec)?;
    let mut h = Header::new(raw.shape().to_vec(), DType::F32, false);
    let ids: Vec<&str> = anns.iter().map(|a| a.image_id.as_str()).collect();
    h.meta = Some(json!({ "image_ids": ids, "grid": spec }));
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    tensorfile::write(&mut w, &h, raw.data())?;
    w.flush()?;
    let positives = targets.positives.len();
    out!("images {}", anns.len());
    out!("positives {positives}");
    out!("shape {}", raw.shape().map(|d| d.to_string()).join(" "));
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    check_threshold("--conf", a.conf)?;
    if let Some(t) = a.nms {
        check_threshold("--nms", t)?;
    }
    let (t, ids) = read_tensor(&a.input)?;
    let (spec, _) = spec_for_tensor(&a.grid, &t)?;
    let batch = t.shape()[0];
    let ids = ids.unwrap_or_else(|| (0..batch).map(|i| i.to_string()).collect());
    if ids.len() != batch {
        return Err(anyhow::anyhow!("{} image ids for a batch of {batch}", ids.len()));
    }
    let act = activated(t, &spec)?;
    let preds: Vec<ImagePredictions> = gridcodec::decode(&act, &spec, a.conf)?
        .into_iter()
        .zip(ids)
        .map(|(d, image_id)| {
            let detections = match a.nms {
                Some(t) => gridcodec::nms(&d, t),
                None => d,
            };
            ImagePredictions { image_id, detections }
        })
        .collect();
    emit(&preds, a.out.as_deref())
}

pub fn nms(a: &NmsArgs) -> Result<()> {
    check_threshold("--iou", a.iou)?;
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ImagePredictions =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", a.input.display(), n + 1))?;
        out.push(ImagePredictions { image_id: p.image_id, detections: gridcodec::nms(&p.detections, a.iou) });
    }
    emit(&out, a.out.as_deref())
}

fn check_threshold(flag: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(usage(format!("{flag} must lie in [0, 1], got {v}")))
    }
}

/// Rounded JSON lines on stdout, or full precision into `out`.
fn emit(preds: &[ImagePredictions], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            for p in preds {
                serde_json::to_writer(&mut w, p)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            let n: usize = preds.iter().map(|p| p.detections.len()).sum();
            out!("images {}", preds.len());
            out!("detections {n}");
        }
        None => {
            for p in preds {
                out!("{}", fmt::json(&serde_json::to_value(p)?));
            }
        }
    }
    Ok(())
}
