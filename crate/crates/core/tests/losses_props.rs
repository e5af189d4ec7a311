mod common;

use common::{random_activated, random_angles, random_annotation};
use mtpose_core::gridcodec::{activate, activation_backward, encode_targets, BoxActivation, GridSpec, GridTensor};
use mtpose_core::losses::*;
use mtpose_core::rotgeom::{dot, euler_to_matrix, pose_vectors_from_matrix, PoseVectors};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vectors() -> impl Strategy<Value = PoseVectors> {
    prop::array::uniform9(-2.0f64..2.0).prop_map(|v| PoseVectors::from_flat(&v).unwrap())
}

fn rotation(seed: u64) -> PoseVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pose_vectors_from_matrix(&euler_to_matrix(random_angles(&mut rng)).unwrap())
}

fn targets(rng: &mut ChaCha8Rng, spec: &GridSpec, batch: usize) -> BoxTargets {
    let parts: Vec<BoxTargets> = (0..batch)
        .map(|b| encode_targets(&random_annotation(rng, &format!("{b}"), spec.cls, 3), spec).unwrap())
        .collect();
    BoxTargets::stack(&parts).unwrap()
}

fn weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        lambda_xy: rng.gen_range(0.0..3.0),
        lambda_wh: rng.gen_range(0.0..3.0),
        lambda_cls: rng.gen_range(0.0..3.0),
        lambda_obj: rng.gen_range(0.0..3.0),
        alpha: rng.gen_range(0.0..=1.0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn pose_loss_is_non_negative(p in vectors(), t in vectors()) {
        prop_assert!(pose_loss(&p, &t) >= 0.0);
        prop_assert!(ortho_loss(&p) >= 0.0);
    }

    #[test]
    fn pose_loss_vanishes_on_matching_rotations(seed in any::<u64>()) {
        let r = rotation(seed);
        prop_assert!(pose_loss(&r, &r) < 1e-12);
    }

    #[test]
    fn pose_loss_positive_when_pred_differs(seed in any::<u64>(), i in 0usize..9, delta in 1e-3f64..1.0) {
        let truth = rotation(seed);
        let mut flat = truth.to_flat();
        flat[i] += delta;
        let pred = PoseVectors::from_flat(&flat).unwrap();
        prop_assert!(pose_loss(&pred, &truth) >= delta * delta);
    }

    #[test]
    fn pose_loss_positive_when_pred_not_orthonormal(p in vectors()) {
        // pred == truth, so only the orthogonality term can be non-zero.
        let dots = [dot(&p.v1, &p.v2), dot(&p.v1, &p.v3), dot(&p.v2, &p.v3)];
        let expected: f64 = dots.iter().map(|d| d * d).sum();
        prop_assert!((pose_loss(&p, &p) - expected).abs() <= 1e-12 * (1.0 + expected));
        if dots.iter().any(|d| d.abs() > 1e-6) {
            prop_assert!(pose_loss(&p, &p) > 0.0);
        }
    }

    #[test]
    fn ortho_loss_zero_iff_pairwise_orthogonal(seed in any::<u64>(), s in prop::array::uniform3(0.1f64..3.0)) {
        // Scaled rotation columns stay orthogonal at any lengths.
        let r = rotation(seed);
        let scaled = PoseVectors { v1: r.v1.map(|x| x * s[0]), v2: r.v2.map(|x| x * s[1]), v3: r.v3.map(|x| x * s[2]) };
        prop_assert!(ortho_loss(&scaled) < 1e-12);
        // Tilting one column toward another breaks it.
        let tilted = PoseVectors { v1: std::array::from_fn(|c| r.v1[c] + 0.1 * r.v2[c]), ..r };
        prop_assert!(ortho_loss(&tilted) > 1e-4);
    }

    #[test]
    fn ortho_loss_is_permutation_invariant(p in vectors()) {
        let base = ortho_loss(&p);
        let v = [p.v1, p.v2, p.v3];
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let q = PoseVectors { v1: v[perm[0]], v2: v[perm[1]], v3: v[perm[2]] };
            prop_assert!((ortho_loss(&q) - base).abs() <= 1e-12 * (1.0 + base));
        }
    }

    #[test]
    fn total_loss_is_affine(b1 in 0.0f64..10.0, b2 in 0.0f64..10.0, p1 in 0.0f64..10.0, p2 in 0.0f64..10.0, alpha in 0.0f64..=1.0) {
        let f = |b, p| total_loss(b, p, alpha);
        let tol = 1e-12 * (1.0 + b1 + b2 + p1 + p2);
        prop_assert!((f(b1 + b2, p1) - f(b1, p1) - alpha * b2).abs() <= tol);
        prop_assert!((f(b1, p1 + p2) - f(b1, p1) - (1.0 - alpha) * p2).abs() <= tol);
        prop_assert!((f(b1, p1) - (alpha * b1 + (1.0 - alpha) * p1)).abs() <= tol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn breakdown_identities_hold(seed in any::<u64>(), np in prop::sample::select(vec![3usize, 9]), cls in 1usize..3, tanh in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act_kind = if tanh { BoxActivation::Tanh } else { BoxActivation::Sigmoid };
        let spec = GridSpec::new(rng.gen_range(2..8), cls, np).unwrap().with_activation(act_kind);
        let t = targets(&mut rng, &spec, 2);
        let act = random_activated(&mut rng, &spec, 2, 4.0);
        let w = weights(&mut rng);
        let l = multitask_loss(&act, &spec, &t, &w).unwrap();
        prop_assert!(l.is_finite());
        prop_assert!(l.consistency_error(&w) <= 1e-12, "{:?}", l);
        let b = bbox_loss(&act, &spec, &t, &w).unwrap();
        prop_assert!(b.consistency_error(&w) <= 1e-12);
        prop_assert_eq!(b.l_pose, 0.0);
        prop_assert_eq!(b.l_bbox, l.l_bbox);
        let (lg, _) = multitask_loss_grad(&act, &spec, &t, &w).unwrap();
        prop_assert_eq!(lg, l);
    }
}

#[test]
fn pose_grad_passes_grad_check_on_100_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let pred: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let truth = PoseVectors::from_flat(&(0..9).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>()).unwrap();
        let analytic = pose_loss_grad(&PoseVectors::from_flat(&pred).unwrap(), &truth).to_flat();
        let f = |x: &[f64]| pose_loss(&PoseVectors::from_flat(x).unwrap(), &truth);
        worst = worst.max(grad_check(f, &pred, &analytic, 1e-6).unwrap());
    }
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

/// Worst relative error of the multitask gradient, with respect to the
/// activated tensor and, chained through the activations, the raw logits.
///
/// Central differences lose digits to round-off in proportion to the loss
/// value, so the points are kept well conditioned: a 1x1 or 2x2 grid, box
/// logits in [-2.5, 2.5] and pose outputs in [-1, 1] like rotation columns.
/// The step is 1e-4: every term is polynomial or smooth in the activated
/// values there, so truncation stays far below round-off.
fn multitask_grad_errors(seed: u64, spec: &GridSpec) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = targets(&mut rng, spec, 1);
    let w = weights(&mut rng);
    let shape = [1, spec.channels(), spec.k, spec.k];
    let plane = spec.k * spec.k;
    let raw: Vec<f64> = (0..shape.iter().product())
        .map(|i| {
            let pose = (i / plane) % spec.per_anchor() >= 5 + spec.cls;
            let s = if pose { 1.0 } else { 2.5 };
            rng.gen_range(-s..s)
        })
        .collect();
    let raw = GridTensor::from_vec(shape, raw, false).unwrap();
    let act = activate(&raw, spec).unwrap();
    let (_, g_act) = multitask_loss_grad(&act, spec, &t, &w).unwrap();
    let on_act = |x: &[f64]| multitask_loss(&GridTensor::from_vec(shape, x.to_vec(), true).unwrap(), spec, &t, &w).unwrap().total;
    let e_act = grad_check(on_act, act.data(), &g_act, 1e-4).unwrap();
    let g_raw = activation_backward(&act, spec, &g_act).unwrap();
    let on_raw = |x: &[f64]| {
        let a = activate(&GridTensor::from_vec(shape, x.to_vec(), false).unwrap(), spec).unwrap();
        multitask_loss(&a, spec, &t, &w).unwrap().total
    };
    let e_raw = grad_check(on_raw, raw.data(), &g_raw, 1e-4).unwrap();
    (e_act, e_raw)
}

#[test]
fn multitask_grad_passes_grad_check_on_100_points() {
    let mut worst: (f64, f64) = (0.0, 0.0);
    for seed in 0..100u64 {
        let np = if seed % 2 == 0 { 9 } else { 3 };
        let act = if seed % 4 < 2 { BoxActivation::Sigmoid } else { BoxActivation::Tanh };
        let spec = GridSpec::new(1 + (seed % 3 == 0) as usize, 1 + (seed % 5 == 0) as usize, np).unwrap().with_activation(act);
        let (a, r) = multitask_grad_errors(seed, &spec);
        worst = (worst.0.max(a), worst.1.max(r));
    }
    assert!(worst.0 < 1e-6 && worst.1 < 1e-6, "max relative errors {:e} (activated), {:e} (raw)", worst.0, worst.1);
}
