mod common;

use common::{random_activated, random_annotation};
use mtpose_core::gridcodec::*;
use mtpose_core::losses::Objectness;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.8, 0.01f64..0.8).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    let det = (bbox(), 0.0f64..1.0, 0usize..2).prop_map(|(bbox, confidence, class_id)| Detection {
        bbox,
        confidence,
        class_id,
        class_score: 0.9,
        pose: PosePayload::Vectors(Default::default()),
    });
    prop::collection::vec(det, 0..max)
}

fn check_inverse(ann: &Annotation, spec: &GridSpec) -> Result<(), TestCaseError> {
    let targets = encode_targets(ann, spec).unwrap();
    prop_assert_eq!(targets.positives.len(), ann.objects.len());
    let act = activate(&perfect_logits(&targets, spec).unwrap(), spec).unwrap();
    let dets = decode(&act, spec, 0.5).unwrap().remove(0);
    prop_assert_eq!(dets.len(), ann.objects.len());
    for obj in &ann.objects {
        // Each object finds a decoded box within 1e-6 in every coordinate.
        let hit = dets.iter().find(|d| d.bbox.to_array().iter().zip(obj.bbox).all(|(a, b)| (a - b).abs() <= 1e-6));
        prop_assert!(hit.is_some(), "{:?} not recovered from {:?}", obj, dets);
        prop_assert_eq!(hit.unwrap().class_id, obj.class_id);
    }
    // Pose channels carry the regression target bit for bit.
    for p in &targets.positives {
        prop_assert_eq!(targets.objectness[targets.slot(0, p.anchor, p.row, p.col)], Objectness::Positive);
        let got: Vec<f64> = (0..spec.np).map(|n| act.get(0, spec.channel(p.anchor, spec.pose_field(n)), p.row, p.col)).collect();
        prop_assert_eq!(&got, &p.pose);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_inverse(seed in any::<u64>(), tanh in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ann = random_annotation(&mut rng, "a", 2, 3);
        let act_kind = if tanh { BoxActivation::Tanh } else { BoxActivation::Sigmoid };
        for k in [7, 13] {
            for np in [3, 9] {
                check_inverse(&ann, &GridSpec::new(k, 2, np).unwrap().with_activation(act_kind))?;
            }
        }
    }

    #[test]
    fn decode_count_and_confidence(seed in any::<u64>(), thr in 0.0f64..1.0, k in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::new(k, 1, if rng.gen() { 9 } else { 3 }).unwrap();
        let act = random_activated(&mut rng, &spec, 2, 6.0);
        for dets in decode(&act, &spec, thr).unwrap() {
            prop_assert!(dets.len() <= 3 * k * k);
            prop_assert!(dets.iter().all(|d| d.confidence >= thr));
        }
    }

    #[test]
    fn sigmoid_and_tanh_decode_alike(seed in any::<u64>(), k in 1usize..8, np in prop::sample::select(vec![3usize, 9])) {
        // tanh(x / 2) = 2 sigmoid(x) - 1, so halving the offset logits maps one
        // parameterization onto the other.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sig = GridSpec::new(k, 1, np).unwrap();
        let tanh = sig.clone().with_activation(BoxActivation::Tanh);
        let shape = [1, sig.channels(), k, k];
        let raw: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut halved = raw.clone();
        for a in 0..3 {
            for field in [0, 1] {
                let start = sig.channel(a, field) * k * k;
                halved[start..start + k * k].iter_mut().for_each(|v| *v *= 0.5);
            }
        }
        let a = decode(&activate(&GridTensor::from_vec(shape, raw, false).unwrap(), &sig).unwrap(), &sig, 0.3).unwrap().remove(0);
        let b = decode(&activate(&GridTensor::from_vec(shape, halved, false).unwrap(), &tanh).unwrap(), &tanh, 0.3).unwrap().remove(0);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.confidence, y.confidence);
            prop_assert_eq!(x.pose, y.pose);
            for (p, q) in x.bbox.to_array().iter().zip(y.bbox.to_array()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn nms_subset_bound_idempotent(dets in detections(40), thr in 0.05f64..0.95) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for d in &kept {
            prop_assert!(dets.contains(d));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.bbox, &b.bbox).unwrap() < thr);
                }
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_below_one_for_distinct_boxes(a in bbox(), field in 0usize..4, delta in 1e-6f64..0.1) {
        let mut v = a.to_array();
        v[field] += delta;
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        prop_assert!(iou(&a, &b).unwrap() < 1.0);
    }
}

#[test]
fn iou_worked_example() {
    let v = iou(&BBox::from_corners(0.0, 0.0, 2.0, 2.0), &BBox::from_corners(1.0, 1.0, 3.0, 3.0)).unwrap();
    assert_eq!(v, 1.0 / 7.0);
}

#[test]
fn channel_counts() {
    for (cls, np, want) in [(1, 3, 27), (1, 9, 45), (2, 9, 48)] {
        assert_eq!(channels_for(cls, np).unwrap(), want);
        assert_eq!(GridSpec::new(7, cls, np).unwrap().channels(), 3 * (5 + cls + np));
    }
}
