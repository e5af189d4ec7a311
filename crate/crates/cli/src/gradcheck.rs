//! Analytic gradients against central differences.

use anyhow::Result;
use clap::{Args, ValueEnum};
use mtpose_core::gridcodec::{activate, encode_targets, BoxActivation, GridSpec, GridTensor};
use mtpose_core::losses::{
    grad_check, multitask_loss, multitask_loss_grad, pose_loss, pose_loss_grad, BoxTargets, LossWeights,
};
use mtpose_core::rotgeom::{euler_to_matrix, pose_vectors_from_matrix, EulerAngles, PoseVectors};
use mtpose_toynet::synth::gen_synthetic_sized;
use mtpose_toynet::train::{batch_loss, encode_all, loss_and_grad};
use mtpose_toynet::{init_network, Image, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fmt::sig;
use crate::usage;

const LOSS_STEP: f64 = 1e-6;
const MULTITASK_STEP: f64 = 1e-4;
const LOSS_TOLERANCE: f64 = 1e-6;
/// The network loss sums many terms, so the step trades truncation for round-off.
const MODEL_STEP: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Target {
    /// Pose loss on random prediction/truth pairs.
    PoseLoss,
    /// Full objective on a random activated grid.
    MultitaskLoss,
    /// Parameter gradient of a training step on a width-reduced network.
    TrainStep,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    target: Target,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random points for `pose_loss` and `multitask_loss`.
    #[arg(long, default_value_t = 100)]
    points: usize,
}

fn random_pose(rng: &mut ChaCha8Rng) -> Result<PoseVectors> {
    let a = EulerAngles::new(rng.gen_range(-180.0..180.0), rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0));
    Ok(pose_vectors_from_matrix(&euler_to_matrix(a)?))
}

fn check_pose_loss(seed: u64, points: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let truth = random_pose(&mut rng)?;
        let pred: Vec<f64> = truth.to_flat().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let analytic = pose_loss_grad(&PoseVectors::from_flat(&pred)?, &truth).to_flat();
        let f = |x: &[f64]| pose_loss(&PoseVectors::from_flat(x).expect("nine entries"), &truth);
        worst = worst.max(grad_check(f, &pred, &analytic, LOSS_STEP)?);
    }
    Ok(worst)
}

/// Small grids with rotation-scale pose outputs keep the loss O(1), so
/// round-off in the differences stays well under the bound.
fn check_multitask_loss(seed: u64, points: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let annotations = gen_synthetic_sized(points, seed, 56)?;
    let mut worst: f64 = 0.0;
    for (n, sample) in annotations.iter().enumerate() {
        let np = if n % 2 == 0 { 9 } else { 3 };
        let act_kind = if n % 4 < 2 { BoxActivation::Sigmoid } else { BoxActivation::Tanh };
        let spec = GridSpec::new(2, 1, np)?.with_activation(act_kind);
        let targets = encode_targets(&sample.annotation, &spec)?;
        let shape = [1, spec.channels(), spec.k, spec.k];
        let plane = spec.k * spec.k;
        let raw: Vec<f64> = (0..shape.iter().product())
            .map(|i| {
                let s = if (i / plane) % spec.per_anchor() >= 5 + spec.cls { 1.0 } else { 2.5 };
                rng.gen_range(-s..s)
            })
            .collect();
        let act = activate(&GridTensor::from_vec(shape, raw, false)?, &spec)?;
        let w = LossWeights::default();
        let (_, analytic) = multitask_loss_grad(&act, &spec, &targets, &w)?;
        let f = |x: &[f64]| {
            let t = GridTensor::from_vec(shape, x.to_vec(), true).expect("same shape");
            multitask_loss(&t, &spec, &targets, &w).map_or(f64::NAN, |l| l.total)
        };
        worst = worst.max(grad_check(f, act.data(), &analytic, MULTITASK_STEP)?);
    }
    Ok(worst)
}

fn check_train_step(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        input_size: 32,
        grid: GridSpec::new(4, 1, 9)?,
        backbone_widths: [3, 4, 4, 6],
        backbone_strides: [2, 2, 2, 1],
        detect_width: 4,
        aggregation_width: 4,
        seed,
    };
    let data = gen_synthetic_sized(2, seed, cfg.input_size)?;
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let targets = BoxTargets::stack(&encode_all(&data, &cfg)?)?;
    let w = LossWeights::default();
    let m = init_network(&cfg)?;
    let (_, grads) = loss_and_grad(&m, &images, &targets, &w, &[])?;
    let analytic: Vec<f64> = grads.layers.iter().flat_map(|(a, b)| a.iter().chain(b).copied()).collect();
    let f = |p: &[f64]| {
        let mut probe = m.clone();
        probe.set_flat_params(p).expect("same parameter count");
        batch_loss(&probe, &images, &targets, &w).map_or(f64::NAN, |l| l.total)
    };
    Ok(grad_check(f, &m.flat_params(), &analytic, MODEL_STEP)?)
}

pub fn run(a: &GradcheckArgs) -> Result<()> {
    let (name, err, tol) = match a.target {
        _ if a.points == 0 => return Err(usage("--points must be at least 1")),
        Target::PoseLoss => ("pose_loss", check_pose_loss(a.seed, a.points)?, LOSS_TOLERANCE),
        Target::MultitaskLoss => ("multitask_loss", check_multitask_loss(a.seed, a.points)?, LOSS_TOLERANCE),
        Target::TrainStep => ("train_step", check_train_step(a.seed)?, MODEL_TOLERANCE),
    };
    out!("target {name}");
    out!("max_relative_error {}", sig(err));
    out!("tolerance {}", sig(tol));
    if err < tol {
        out!("status pass");
        Ok(())
    } else {
        out!("status fail");
        Err(anyhow::anyhow!("{name}: max relative error {err:e} is not below {tol:e}"))
    }
}
