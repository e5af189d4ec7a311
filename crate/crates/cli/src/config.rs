//! Run configuration: defaults, then command-line flags, then the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mtpose_core::gridcodec::GridSpec;
use mtpose_core::losses::LossWeights;
use mtpose_toynet::infer::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use mtpose_toynet::{ModelConfig, PhaseSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::usage;

/// Network shape; the grid and the seed live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub backbone_widths: [usize; 4],
    pub backbone_strides: [usize; 4],
    pub detect_width: usize,
    pub aggregation_width: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
}

impl EvalSettings {
    fn validate(&self) -> Result<()> {
        if [self.conf_threshold, self.nms_threshold].iter().all(|t| (0.0..=1.0).contains(t)) {
            Ok(())
        } else {
            Err(usage("eval thresholds must lie in [0, 1]"))
        }
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { conf_threshold: DEFAULT_CONF_THRESHOLD, nms_threshold: DEFAULT_NMS_IOU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub loss_weights: LossWeights,
    pub model: Architecture,
    pub schedule: PhaseSchedule,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: m.seed,
            grid: m.grid,
            loss_weights: LossWeights::default(),
            model: Architecture {
                input_size: m.input_size,
                backbone_widths: m.backbone_widths,
                backbone_strides: m.backbone_strides,
                detect_width: m.detect_width,
                aggregation_width: m.aggregation_width,
            },
            schedule: PhaseSchedule::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.model.input_size,
            grid: self.grid.clone(),
            backbone_widths: self.model.backbone_widths,
            backbone_strides: self.model.backbone_strides,
            detect_width: self.model.detect_width,
            aggregation_width: self.model.aggregation_width,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = || -> mtpose_toynet::Result<()> {
            self.model_config().validate()?;
            self.loss_weights.validate()?;
            self.schedule.validate()?;
            Ok(())
        };
        checks().map_err(|e| usage(format!("invalid configuration: {e}")))?;
        self.eval.validate()
    }
}

/// Recursively overlays `over` on `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Layers `file` over `flags` (a partially overridden default document).
pub fn resolve(flags: Value, file: Option<&Path>) -> Result<RunConfig> {
    let cfg = layer(flags, file)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`resolve`], checking only the grid and the loss weights.
pub fn resolve_grid(flags: Value, file: Option<&Path>) -> Result<(GridSpec, LossWeights)> {
    let cfg = layer(flags, file)?;
    cfg.grid.validate().map_err(|e| usage(format!("invalid grid: {e}")))?;
    cfg.loss_weights.validate().map_err(|e| usage(format!("invalid loss weights: {e}")))?;
    Ok((cfg.grid, cfg.loss_weights))
}

/// Loss weights and thresholds, validated on their own.
pub fn resolve_eval(flags: Value, file: Option<&Path>) -> Result<(LossWeights, EvalSettings)> {
    let cfg = layer(flags, file)?;
    cfg.loss_weights.validate().map_err(|e| usage(format!("invalid loss weights: {e}")))?;
    cfg.eval.validate()?;
    Ok((cfg.loss_weights, cfg.eval))
}

fn layer(flags: Value, file: Option<&Path>) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    merge(&mut doc, flags);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(usage(format!("{}: the config must be a JSON object", path.display())));
        }
        merge(&mut doc, over);
    }
    serde_json::from_value(doc).map_err(|e| usage(format!("invalid configuration: {e}")))
}
