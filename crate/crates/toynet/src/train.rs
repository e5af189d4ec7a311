//! Backpropagation, gradient descent and the three-phase schedule.

use std::io::{BufRead, Write};

use mtpose_core::gridcodec::{activate, activation_backward, encode_targets};
use mtpose_core::losses::{multitask_loss, multitask_loss_grad, BoxTargets, LossBreakdown, LossWeights};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_network, Grads, Model, ModelConfig, Part};
use crate::synth::{Image, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub frozen: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl Default for PhaseSchedule {
    /// Detection head alone, then detection with backbone, then everything.
    ///
    /// Sized for 2,000 synthetic images: plain gradient descent needs about
    /// 70 epochs here to push objectness of positives past the default
    /// confidence threshold.
    fn default() -> Self {
        Self {
            phases: vec![
                Phase { epochs: 5, batch_size: 8, learning_rate: 3e-2, frozen: vec![Part::Backbone, Part::PoseHead] },
                Phase { epochs: 5, batch_size: 8, learning_rate: 1e-2, frozen: vec![Part::PoseHead] },
                Phase { epochs: 60, batch_size: 8, learning_rate: 7e-3, frozen: vec![] },
            ],
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.len() != 3 {
            return Err(Error::InvalidArgument(format!("schedule needs 3 phases, got {}", self.phases.len())));
        }
        for (n, p) in self.phases.iter().enumerate() {
            if p.batch_size == 0 {
                return Err(Error::InvalidArgument(format!("phase {}: batch size must be positive", n + 1)));
            }
            if !p.learning_rate.is_finite() || p.learning_rate < 0.0 {
                return Err(Error::InvalidArgument(format!("phase {}: learning rate must be finite and >= 0", n + 1)));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.phases.iter().map(|p| p.epochs * n.div_ceil(p.batch_size)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Zero-based.
    pub phase: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.steps {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                steps.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { steps })
    }

    /// Mean total loss over `window` steps starting at `start`.
    pub fn mean_total(&self, start: usize, window: usize) -> Option<f64> {
        let s = self.steps.get(start..(start + window).min(self.steps.len()))?;
        (!s.is_empty()).then(|| s.iter().map(|r| r.loss.total).sum::<f64>() / s.len() as f64)
    }
}

/// Loss and parameter gradients for one batch; parts in `frozen` get none.
pub fn loss_and_grad(
    m: &Model,
    images: &[&Image],
    targets: &BoxTargets,
    w: &LossWeights,
    frozen: &[Part],
) -> Result<(LossBreakdown, Grads)> {
    let spec = m.grid();
    let (raw, cache) = m.forward_cached(images)?;
    let act = activate(&raw, spec)?;
    let (loss, grad_act) = multitask_loss_grad(&act, spec, targets, w)?;
    let grad_raw = activation_backward(&act, spec, &grad_act)?;
    let grads = m.backward(&cache, &grad_raw, frozen)?;
    Ok((loss, grads))
}

/// Total loss of a batch without gradients.
pub fn batch_loss(m: &Model, images: &[&Image], targets: &BoxTargets, w: &LossWeights) -> Result<LossBreakdown> {
    let act = activate(&m.forward(images)?, m.grid())?;
    Ok(multitask_loss(&act, m.grid(), targets, w)?)
}

/// One gradient-descent step. The model is left untouched when the loss is
/// not finite.
pub fn train_step(
    m: &mut Model,
    images: &[&Image],
    targets: &BoxTargets,
    w: &LossWeights,
    lr: f64,
    frozen: &[Part],
) -> Result<LossBreakdown> {
    if Part::ALL.iter().all(|p| frozen.contains(p)) {
        let loss = batch_loss(m, images, targets, w)?;
        return check_finite(loss);
    }
    let (loss, grads) = loss_and_grad(m, images, targets, w, frozen)?;
    let loss = check_finite(loss)?;
    if grads.layers.iter().flat_map(|(a, b)| a.iter().chain(b)).any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    m.apply(&grads, lr);
    Ok(loss)
}

fn check_finite(loss: LossBreakdown) -> Result<LossBreakdown> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss: total {}", loss.total)))
    }
}

/// Encodes every annotation against the model's grid.
pub fn encode_all(samples: &[Sample], cfg: &ModelConfig) -> Result<Vec<BoxTargets>> {
    samples
        .iter()
        .map(|s| encode_targets(&s.annotation, &cfg.grid).map_err(|e| Error::from(e).context(format!("image {}", s.annotation.image_id))))
        .collect()
}

fn shuffle_seed(seed: u64, phase: usize, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((phase as u64) << 32 | epoch as u64)
}

pub fn train(cfg: &ModelConfig, schedule: &PhaseSchedule, data: &[Sample], w: &LossWeights) -> Result<(Model, TrainHistory)> {
    train_with(cfg, schedule, data, w, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<F: FnMut(&StepRecord)>(
    cfg: &ModelConfig,
    schedule: &PhaseSchedule,
    data: &[Sample],
    w: &LossWeights,
    mut on_step: F,
) -> Result<(Model, TrainHistory)> {
    schedule.validate()?;
    w.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let mut m = init_network(cfg)?;
    let targets = encode_all(data, cfg)?;
    let mut history = TrainHistory::default();
    for (p, phase) in schedule.phases.iter().enumerate() {
        for epoch in 0..phase.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, p, epoch)));
            for batch in order.chunks(phase.batch_size) {
                let images: Vec<&Image> = batch.iter().map(|&i| &data[i].image).collect();
                let parts: Vec<BoxTargets> = batch.iter().map(|&i| targets[i].clone()).collect();
                let step = history.steps.len();
                let loss = train_step(&mut m, &images, &BoxTargets::stack(&parts)?, w, phase.learning_rate, &phase.frozen)
                    .map_err(|e| e.context(format!("phase {}, epoch {}, step {step}", p + 1, epoch + 1)))?;
                let record = StepRecord { step, phase: p, epoch, learning_rate: phase.learning_rate, loss };
                on_step(&record);
                history.steps.push(record);
            }
        }
    }
    Ok((m, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_synthetic_sized;
    use mtpose_core::gridcodec::GridSpec;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            grid: GridSpec::new(4, 1, 9).unwrap(),
            backbone_widths: [4, 6, 6, 8],
            backbone_strides: [2, 2, 2, 1],
            detect_width: 6,
            aggregation_width: 6,
            seed: 5,
        }
    }

    fn tiny_schedule() -> PhaseSchedule {
        PhaseSchedule {
            phases: vec![
                Phase { epochs: 1, batch_size: 4, learning_rate: 1e-2, frozen: vec![Part::Backbone, Part::PoseHead] },
                Phase { epochs: 1, batch_size: 4, learning_rate: 1e-3, frozen: vec![Part::PoseHead] },
                Phase { epochs: 1, batch_size: 4, learning_rate: 1e-3, frozen: vec![] },
            ],
        }
    }

    fn batch(n: usize, seed: u64) -> (Vec<Sample>, BoxTargets) {
        let data = gen_synthetic_sized(n, seed, 32).unwrap();
        let t = encode_all(&data, &tiny_cfg()).unwrap();
        (data, BoxTargets::stack(&t).unwrap())
    }

    #[test]
    fn zero_rate_or_all_frozen_is_a_no_op() {
        let (data, t) = batch(2, 1);
        let imgs: Vec<&Image> = data.iter().map(|s| &s.image).collect();
        let m0 = init_network(&tiny_cfg()).unwrap();
        let mut m = m0.clone();
        train_step(&mut m, &imgs, &t, &LossWeights::default(), 0.0, &[]).unwrap();
        assert_eq!(m, m0);
        train_step(&mut m, &imgs, &t, &LossWeights::default(), 10.0, &Part::ALL).unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn frozen_parts_are_bitwise_unchanged() {
        let (data, t) = batch(2, 2);
        let imgs: Vec<&Image> = data.iter().map(|s| &s.image).collect();
        let m0 = init_network(&tiny_cfg()).unwrap();
        let mut m = m0.clone();
        train_step(&mut m, &imgs, &t, &LossWeights::default(), 0.1, &[Part::Backbone]).unwrap();
        for (a, b) in m.layers.iter().zip(&m0.layers) {
            assert_eq!(a == b, a.part == Part::Backbone, "{}", a.name);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(PhaseSchedule::default().validate().is_ok());
        let mut s = PhaseSchedule::default();
        s.phases.pop();
        assert!(s.validate().is_err());
        let mut s = PhaseSchedule::default();
        s.phases[1].batch_size = 0;
        assert!(s.validate().is_err());
        assert_eq!(PhaseSchedule::default().total_steps(2000), 70 * 250);
    }

    #[test]
    fn training_is_deterministic_and_respects_phase_freezes() {
        let data = gen_synthetic_sized(10, 3, 32).unwrap();
        let cfg = tiny_cfg();
        let (m1, h1) = train(&cfg, &tiny_schedule(), &data, &LossWeights::default()).unwrap();
        let (m2, h2) = train(&cfg, &tiny_schedule(), &data, &LossWeights::default()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert_eq!(h1.steps.len(), 9);
        assert!(h1.steps.windows(2).all(|w| w[0].step + 1 == w[1].step && w[0].phase <= w[1].phase));

        // Re-running phase 1 alone leaves the pose head at its initial values.
        let mut one = tiny_schedule();
        one.phases[1].epochs = 0;
        one.phases[2].epochs = 0;
        let (m, _) = train(&cfg, &one, &data, &LossWeights::default()).unwrap();
        let init = init_network(&cfg).unwrap();
        for (a, b) in m.layers.iter().zip(&init.layers) {
            if a.part != Part::DetectHead {
                assert_eq!(a, b, "{}", a.name);
            }
        }
    }

    #[test]
    fn history_jsonl_roundtrip() {
        let data = gen_synthetic_sized(4, 9, 32).unwrap();
        let (_, h) = train(&tiny_cfg(), &tiny_schedule(), &data, &LossWeights::default()).unwrap();
        let mut buf = Vec::new();
        h.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), h.steps.len());
        assert_eq!(TrainHistory::read_jsonl(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn non_finite_loss_aborts_the_step() {
        let (data, t) = batch(2, 4);
        let imgs: Vec<&Image> = data.iter().map(|s| &s.image).collect();
        let mut m = init_network(&tiny_cfg()).unwrap();
        m.layers[0].bias[0] = f64::NAN;
        let before = m.flat_params();
        let e = train_step(&mut m, &imgs, &t, &LossWeights::default(), 0.1, &[]).unwrap_err();
        let numeric = |e: &Error| matches!(e, Error::Numeric(_) | Error::Core(mtpose_core::Error::Numeric(_)));
        assert!(numeric(&e), "{e}");
        let after = m.flat_params();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        let e = e.context("phase 2, epoch 1, step 7");
        assert_eq!(e.to_string().split(':').next(), Some("phase 2, epoch 1, step 7"));
        assert!(numeric(e.root()));
    }
}
