//! Dataset generation, training and evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use mtpose_core::evalproto::EvalReport;
use mtpose_core::gridcodec::BoxActivation;
use mtpose_toynet::infer::evaluate_model;
use mtpose_toynet::synth::gen_synthetic_sized;
use mtpose_toynet::train::train_with;
use mtpose_toynet::weights::{load_weights_with_meta, save_weights_with_meta};
use mtpose_toynet::{read_dataset, write_dataset, Sample};
use serde_json::{json, Value};

use crate::config::{merge, resolve, resolve_eval};
use crate::fmt::sig;
use crate::{usage, Activation};

pub const WEIGHTS_FILE: &str = "weights.mtt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of images.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = mtpose_toynet::synth::IMAGE_SIZE)]
    size: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config; keys present in it override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset directory; when given, the report is written too.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory for weights, history, config and report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Pose outputs per anchor: 9 for pose vectors, 3 for Euler angles.
    #[arg(long)]
    np: Option<usize>,
    #[arg(long, value_enum)]
    box_activation: Option<Activation>,
    /// Share of the detection loss in the total.
    #[arg(long)]
    alpha: Option<f64>,
    /// Confidence threshold for the report.
    #[arg(long)]
    conf: Option<f64>,
    /// NMS IoU threshold for the report.
    #[arg(long)]
    nms: Option<f64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    /// Progress line to stderr every this many steps; 0 silences it.
    #[arg(long, default_value_t = 250)]
    log_every: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run config; its `loss_weights` and `eval` sections override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the value stored with the weights.
    #[arg(long)]
    conf: Option<f64>,
    /// Defaults to the value stored with the weights.
    #[arg(long)]
    nms: Option<f64>,
    /// Write the full-precision report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(dir: &Path) -> Result<Vec<Sample>> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_json_file(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_report(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), sig);
    out!("mean_iou {}", opt(r.mean_iou));
    out!("mae_yaw {}", opt(r.mae_yaw));
    out!("mae_pitch {}", opt(r.mae_pitch));
    out!("mae_roll {}", opt(r.mae_roll));
    out!("mae_avg {}", opt(r.mae_avg));
    out!("matched {}", r.matched_count);
    out!("missed {}", r.missed_count);
    out!("spurious {}", r.spurious_count);
    out!("images {}", r.image_count);
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let samples = gen_synthetic_sized(a.n, a.seed, a.size).map_err(|e| usage(e.to_string()))?;
    write_dataset(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    out!("images {}", samples.len());
    out!("objects {}", samples.iter().map(|s| s.annotation.objects.len()).sum::<usize>());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut flags = json!({});
    let mut set = |v: Value| merge(&mut flags, v);
    if let Some(s) = a.seed {
        set(json!({ "seed": s }));
    }
    if let Some(np) = a.np {
        set(json!({ "grid": { "np": np } }));
    }
    if let Some(act) = a.box_activation {
        set(json!({ "grid": { "box_activation": BoxActivation::from(act) } }));
    }
    if let Some(alpha) = a.alpha {
        set(json!({ "loss_weights": { "alpha": alpha } }));
    }
    if let Some(c) = a.conf {
        set(json!({ "eval": { "conf_threshold": c } }));
    }
    if let Some(n) = a.nms {
        set(json!({ "eval": { "nms_threshold": n } }));
    }
    for (key, p) in [("train_data", &a.data), ("eval_data", &a.eval_data), ("out_dir", &a.out)] {
        if let Some(p) = p {
            set(json!({ "paths": { key: p } }));
        }
    }
    let cfg = resolve(flags, a.config.as_deref())?;
    if a.print_config {
        out!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let train_dir = cfg.paths.train_data.as_deref().ok_or_else(|| usage("no training data (--data or paths.train_data)"))?;
    let out = cfg.paths.out_dir.as_deref().ok_or_else(|| usage("no output directory (--out or paths.out_dir)"))?;
    let data = load(train_dir)?;
    let held_out = cfg.paths.eval_data.as_deref().map(load).transpose()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json_file(&out.join(CONFIG_FILE), &cfg)?;

    let model_cfg = cfg.model_config();
    let start = Instant::now();
    let mut window = 0.0;
    let (model, history) = train_with(&model_cfg, &cfg.schedule, &data, &cfg.loss_weights, |r| {
        if a.log_every == 0 {
            return;
        }
        window += r.loss.total;
        if (r.step + 1) % a.log_every == 0 {
            eprintln!(
                "step {} phase {} epoch {} loss {} ({:.0}s)",
                r.step + 1,
                r.phase + 1,
                r.epoch + 1,
                sig(window / a.log_every as f64),
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;

    let meta = json!({ "loss_weights": cfg.loss_weights, "eval": cfg.eval });
    let path = out.join(WEIGHTS_FILE);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    save_weights_with_meta(&mut w, &model, Some(meta))?;
    w.flush()?;
    let path = out.join(HISTORY_FILE);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    history.write_jsonl(&mut w)?;
    w.flush()?;

    out!("steps {}", history.steps.len());
    if let Some(last) = history.steps.last() {
        out!("final_loss {}", sig(last.loss.total));
    }
    if let Some(samples) = held_out {
        let r = evaluate_model(&model, &samples, &cfg.loss_weights, cfg.eval.conf_threshold, cfg.eval.nms_threshold)?;
        write_json_file(&out.join(REPORT_FILE), &r)?;
        print_report(&r);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let file = File::open(&a.weights).with_context(|| format!("opening {}", a.weights.display()))?;
    let (model, meta) =
        load_weights_with_meta(BufReader::new(file)).with_context(|| format!("reading {}", a.weights.display()))?;
    let mut flags = json!({});
    if let Some(m) = meta {
        for key in ["loss_weights", "eval"] {
            if let Some(v) = m.get(key) {
                merge(&mut flags, json!({ key: v }));
            }
        }
    }
    if let Some(c) = a.conf {
        merge(&mut flags, json!({ "eval": { "conf_threshold": c } }));
    }
    if let Some(n) = a.nms {
        merge(&mut flags, json!({ "eval": { "nms_threshold": n } }));
    }
    let (weights, settings) = resolve_eval(flags, a.config.as_deref())?;
    let samples = load(&a.data)?;
    let r = evaluate_model(&model, &samples, &weights, settings.conf_threshold, settings.nms_threshold)?;
    if let Some(out) = &a.out {
        write_json_file(out, &r)?;
    }
    print_report(&r);
    Ok(())
}
