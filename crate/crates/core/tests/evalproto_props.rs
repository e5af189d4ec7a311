mod common;

use common::{random_angles, random_annotation};
use mtpose_core::evalproto::*;
use mtpose_core::gridcodec::{Annotation, BBox, BoxActivation, Detection, PosePayload};
use mtpose_core::losses::LossWeights;
use mtpose_core::rotgeom::{euler_to_matrix, pose_vectors_from_matrix, PoseVectors};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vectors(rng: &mut ChaCha8Rng) -> PoseVectors {
    PoseVectors::from_flat(&(0..9).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>()).unwrap()
}

fn random_payload(rng: &mut ChaCha8Rng) -> PosePayload {
    if rng.gen() {
        PosePayload::Vectors(random_vectors(rng))
    } else {
        PosePayload::Euler(random_angles(rng))
    }
}

/// Jittered copies of the ground truth plus some strays.
fn predictions(rng: &mut ChaCha8Rng, ann: &Annotation) -> Vec<Detection> {
    let mut dets = Vec::new();
    for o in &ann.objects {
        for _ in 0..rng.gen_range(0..3) {
            let b = o.bbox.map(|v| v + rng.gen_range(-0.03..0.03));
            dets.push(Detection {
                bbox: BBox::new(b[0], b[1], b[2].abs().max(0.01), b[3].abs().max(0.01)),
                confidence: rng.gen(),
                class_id: 0,
                class_score: 1.0,
                pose: random_payload(rng),
            });
        }
    }
    for _ in 0..rng.gen_range(0..3) {
        dets.push(Detection {
            bbox: BBox::new(rng.gen(), rng.gen(), rng.gen_range(0.02..0.5), rng.gen_range(0.02..0.5)),
            confidence: rng.gen(),
            class_id: 0,
            class_score: 1.0,
            pose: random_payload(rng),
        });
    }
    dets
}

fn decisions() -> EvalDecisions {
    EvalDecisions::new(LossWeights::default(), 9, BoxActivation::Sigmoid, 0.25, 0.45)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matching_is_one_to_one(seed in any::<u64>(), thr in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ann = random_annotation(&mut rng, "x", 1, 4);
        let preds = predictions(&mut rng, &ann);
        let m = match_detections(&preds, &ann, thr);
        prop_assert!(m.pairs.len() <= preds.len().min(ann.objects.len()));
        prop_assert_eq!(m.pairs.len() + m.unmatched_preds.len(), preds.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_gts.len(), ann.objects.len());
        let mut p: Vec<usize> = m.pairs.iter().map(|x| x.pred).chain(m.unmatched_preds.iter().copied()).collect();
        let mut g: Vec<usize> = m.pairs.iter().map(|x| x.gt).chain(m.unmatched_gts.iter().copied()).collect();
        p.sort_unstable();
        g.sort_unstable();
        prop_assert_eq!(p, (0..preds.len()).collect::<Vec<_>>());
        prop_assert_eq!(g, (0..ann.objects.len()).collect::<Vec<_>>());
        prop_assert!(m.pairs.iter().all(|x| x.iou >= thr && x.iou <= 1.0));
    }

    #[test]
    fn mae_is_bounded(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<_> = (0..n).map(|_| (random_payload(&mut rng), random_angles(&mut rng))).collect();
        for v in pose_mae(&pairs).unwrap() {
            prop_assert!((0.0..=180.0).contains(&v), "{}", v);
        }
    }

    #[test]
    fn report_average_is_mean_of_axes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anns = Vec::new();
        let mut preds = Vec::new();
        for i in 0..rng.gen_range(1..5) {
            let a = random_annotation(&mut rng, &format!("{i}"), 1, 4);
            preds.push(ImagePredictions { image_id: a.image_id.clone(), detections: predictions(&mut rng, &a) });
            anns.push(a);
        }
        let r = evaluate(&preds, &anns, &decisions()).unwrap();
        prop_assert_eq!(r.matched_count + r.missed_count, r.gt_count);
        if let Some(iou) = r.mean_iou {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
        match (r.mae_yaw, r.mae_pitch, r.mae_roll, r.mae_avg) {
            (Some(y), Some(p), Some(ro), Some(avg)) => prop_assert_eq!(avg, (y + p + ro) / 3.0),
            (None, None, None, None) => prop_assert_eq!(r.matched_count, 0),
            other => prop_assert!(false, "partial MAE fields {:?}", other),
        }
    }

    #[test]
    fn vector_mae_ignores_positive_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_angles(&mut rng);
        let mut pred = pose_vectors_from_matrix(&euler_to_matrix(random_angles(&mut rng)).unwrap()).to_flat();
        for v in pred.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let base = PoseVectors::from_flat(&pred).unwrap();
        let scaled = PoseVectors::from_flat(&pred.map(|v| v * c)).unwrap();
        let a = pose_mae(&[(PosePayload::Vectors(base), truth)]).unwrap();
        let b = pose_mae(&[(PosePayload::Vectors(scaled), truth)]).unwrap();
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x - y).abs() <= 1e-7, "{:?} vs {:?}", a, b);
        }
    }
}
