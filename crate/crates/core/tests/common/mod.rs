#![allow(dead_code)]

use mtpose_core::gridcodec::{activate, AnnotatedObject, Annotation, GridSpec, GridTensor};
use mtpose_core::rotgeom::EulerAngles;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_angles(rng: &mut ChaCha8Rng) -> EulerAngles {
    EulerAngles::new(rng.gen_range(-179.0..179.0), rng.gen_range(-89.0..89.0), rng.gen_range(-179.0..179.0))
}

/// Up to `max_objects` boxes anywhere in the image, sizes from tiny to most of the frame.
pub fn random_annotation(rng: &mut ChaCha8Rng, id: &str, cls: usize, max_objects: usize) -> Annotation {
    let n = rng.gen_range(0..=max_objects);
    let objects = (0..n)
        .map(|_| AnnotatedObject {
            bbox: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.02..0.9), rng.gen_range(0.02..0.9)],
            pose: random_angles(rng),
            class_id: rng.gen_range(0..cls),
        })
        .collect();
    Annotation { image_id: id.into(), objects }
}

/// Activated tensor from uniform raw logits in `[-spread, spread]`.
pub fn random_activated(rng: &mut ChaCha8Rng, spec: &GridSpec, batch: usize, spread: f64) -> GridTensor {
    let shape = [batch, spec.channels(), spec.k, spec.k];
    let raw: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-spread..spread)).collect();
    activate(&GridTensor::from_vec(shape, raw, false).unwrap(), spec).unwrap()
}
