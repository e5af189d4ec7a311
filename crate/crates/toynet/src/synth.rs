//! Synthetic marker images.
//!
//! Each image holds one to three filled triangles on a noisy gray
//! background. A marker's pose is readable from the picture:
//!
//! - yaw is the direction the tip points (x right, y up, full circle);
//! - pitch sets the red level of the body;
//! - roll sets the green level of the body.
//!
//! The tip region is painted in a fixed blue so the pointing direction is
//! unambiguous. Annotation boxes are the exact vertex bounds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mtpose_core::gridcodec::{read_annotations, write_annotations, AnnotatedObject, Annotation};
use mtpose_core::rotgeom::EulerAngles;
use mtpose_core::tensorfile::{self, DType, Header};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 56;
pub const YAW_RANGE: f64 = 179.0;
pub const PITCH_RANGE: f64 = 60.0;
pub const ROLL_RANGE: f64 = 60.0;
const RADIUS: (f64, f64) = (6.0, 13.0);
const BASE_SPREAD_DEG: f64 = 135.0;
const TIP_COLOR: [f32; 3] = [0.1, 0.1, 0.95];
const SUPERSAMPLE: usize = 4;

/// Square RGB image, channel-major `(3, size, size)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.size + y) * self.size + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotation: Annotation,
}

/// A marker in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub center: [f64; 2],
    pub radius: f64,
    pub pose: EulerAngles,
}

impl Marker {
    /// Tip first, then the two base corners.
    pub fn vertices(&self) -> [[f64; 2]; 3] {
        let t = self.pose.yaw.to_radians();
        let at = |a: f64| [self.center[0] + self.radius * a.cos(), self.center[1] - self.radius * a.sin()];
        let spread = BASE_SPREAD_DEG.to_radians();
        [at(t), at(t + spread), at(t - spread)]
    }

    /// `[x0, y0, x1, y1]` in pixels.
    pub fn bounds(&self) -> [f64; 4] {
        let v = self.vertices();
        let xs = v.map(|p| p[0]);
        let ys = v.map(|p| p[1]);
        let min = |a: [f64; 3]| a.into_iter().fold(f64::INFINITY, f64::min);
        let max = |a: [f64; 3]| a.into_iter().fold(f64::NEG_INFINITY, f64::max);
        [min(xs), min(ys), max(xs), max(ys)]
    }

    pub fn body_color(&self) -> [f32; 3] {
        [
            (0.55 + 0.4 * self.pose.pitch / 90.0) as f32,
            (0.55 + 0.4 * self.pose.roll / 90.0) as f32,
            0.45,
        ]
    }

    fn annotation(&self, size: usize) -> AnnotatedObject {
        let [x0, y0, x1, y1] = self.bounds();
        let s = size as f64;
        AnnotatedObject {
            bbox: [(x0 + x1) / (2.0 * s), (y0 + y1) / (2.0 * s), (x1 - x0) / s, (y1 - y0) / s],
            pose: self.pose,
            class_id: 0,
        }
    }
}

/// Barycentric coordinates of `p`; `None` outside the triangle.
fn barycentric(v: &[[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let d = (v[1][1] - v[2][1]) * (v[0][0] - v[2][0]) + (v[2][0] - v[1][0]) * (v[0][1] - v[2][1]);
    let a = ((v[1][1] - v[2][1]) * (p[0] - v[2][0]) + (v[2][0] - v[1][0]) * (p[1] - v[2][1])) / d;
    let b = ((v[2][1] - v[0][1]) * (p[0] - v[2][0]) + (v[0][0] - v[2][0]) * (p[1] - v[2][1])) / d;
    let c = 1.0 - a - b;
    (a >= 0.0 && b >= 0.0 && c >= 0.0).then_some([a, b, c])
}

/// Paints a marker with `SUPERSAMPLE²` samples per pixel.
pub fn draw_marker(img: &mut Image, m: &Marker) {
    let v = m.vertices();
    let [x0, y0, x1, y1] = m.bounds();
    let size = img.size;
    let body = m.body_color();
    let lo = |v: f64| (v.floor().max(0.0)) as usize;
    let hi = |v: f64| (v.ceil() as usize).min(size);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in lo(y0)..hi(y1) {
        for x in lo(x0)..hi(x1) {
            let mut acc = [0f32; 3];
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    ];
                    if let Some(w) = barycentric(&v, p) {
                        let c = if w[0] > 0.5 { TIP_COLOR } else { body };
                        acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f32 / n;
            for (c, a) in acc.iter().enumerate() {
                let px = &mut img.pixels[(c * size + y) * size + x];
                *px = *px * (1.0 - cover) + a / n;
            }
        }
    }
}

fn sample_markers(rng: &mut ChaCha8Rng, size: usize) -> Vec<Marker> {
    let count = rng.gen_range(1..=3);
    let mut out: Vec<Marker> = Vec::with_capacity(count);
    let s = size as f64;
    for _ in 0..count {
        for _attempt in 0..100 {
            let radius = rng.gen_range(RADIUS.0..RADIUS.1);
            let center = [rng.gen_range(radius + 1.0..s - radius - 1.0), rng.gen_range(radius + 1.0..s - radius - 1.0)];
            let clear = out.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d > o.radius + radius + 2.0
            });
            if clear {
                let pose = EulerAngles::new(
                    rng.gen_range(-YAW_RANGE..=YAW_RANGE),
                    rng.gen_range(-PITCH_RANGE..=PITCH_RANGE),
                    rng.gen_range(-ROLL_RANGE..=ROLL_RANGE),
                );
                out.push(Marker { center, radius, pose });
                break;
            }
        }
    }
    out
}

/// Renders one image from a dedicated generator.
pub fn render(rng: &mut ChaCha8Rng, size: usize) -> (Image, Vec<Marker>) {
    let gray: f32 = rng.gen_range(0.1..0.3);
    let pixels = (0..3 * size * size).map(|_| gray + rng.gen_range(-0.02f32..0.02)).collect();
    let mut img = Image { size, pixels };
    let markers = sample_markers(rng, size);
    for m in &markers {
        draw_marker(&mut img, m);
    }
    (img, markers)
}

/// `n` images of `IMAGE_SIZE` pixels, bit-identical for equal seeds.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_synthetic_sized(n, seed, IMAGE_SIZE)
}

pub fn gen_synthetic_sized(n: usize, seed: u64, size: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if (size as f64) < 2.0 * RADIUS.1 + 4.0 {
        return Err(Error::InvalidArgument(format!("image size {size} is too small for the markers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let (image, markers) = render(&mut rng, size);
            let annotation = Annotation {
                image_id: format!("s{seed}-{i:05}"),
                objects: markers.iter().map(|m| m.annotation(size)).collect(),
            };
            Sample { image, annotation }
        })
        .collect())
}

/// Writes images as one `(N, 3, S, S)` f32 tensor with the image ids in `meta`.
pub fn write_images<W: Write>(w: W, samples: &[Sample]) -> Result<()> {
    let size = samples.first().map_or(0, |s| s.image.size);
    if samples.iter().any(|s| s.image.size != size) {
        return Err(Error::InvalidArgument("images differ in size".into()));
    }
    let mut header = Header::new(vec![samples.len(), 3, size, size], DType::F32, false);
    let ids: Vec<&str> = samples.iter().map(|s| s.annotation.image_id.as_str()).collect();
    header.meta = Some(serde_json::json!({ "image_ids": ids }));
    let data: Vec<f64> = samples.iter().flat_map(|s| s.image.pixels.iter().map(|v| f64::from(*v))).collect();
    tensorfile::write(w, &header, &data)?;
    Ok(())
}

/// Reads images written by [`write_images`], returning `(image_id, image)` pairs.
pub fn read_images<R: Read>(r: R) -> Result<Vec<(String, Image)>> {
    let (h, data) = tensorfile::read(r)?;
    let [n, c, s, s2] = h.shape[..] else {
        return Err(Error::Format(format!("image tensors are 4-D, got {:?}", h.shape)));
    };
    if c != 3 || s != s2 {
        return Err(Error::Format(format!("expected (N, 3, S, S), got {:?}", h.shape)));
    }
    let ids: Vec<String> = match h.meta.as_ref().and_then(|m| m.get("image_ids")) {
        Some(v) => serde_json::from_value(v.clone())?,
        None => (0..n).map(|i| i.to_string()).collect(),
    };
    if ids.len() != n {
        return Err(Error::Format(format!("{} image ids for {n} images", ids.len())));
    }
    Ok(ids
        .into_iter()
        .zip(data.chunks_exact(3 * s * s))
        .map(|(id, px)| (id, Image { size: s, pixels: px.iter().map(|v| *v as f32).collect() }))
        .collect())
}

pub const IMAGES_FILE: &str = "images.mtt";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Writes a dataset directory: [`IMAGES_FILE`] and [`ANNOTATIONS_FILE`].
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
    write_images(&mut w, samples)?;
    w.flush()?;
    let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    let mut w = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    write_annotations(&mut w, &anns)?;
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory; image ids must line up with the annotations.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let open = |name: &str| {
        File::open(dir.join(name)).map_err(|e| Error::from(e).context(format!("opening {}", dir.join(name).display())))
    };
    let images = read_images(BufReader::new(open(IMAGES_FILE)?))?;
    let anns = read_annotations(BufReader::new(open(ANNOTATIONS_FILE)?))?;
    if images.len() != anns.len() {
        return Err(Error::Format(format!("{} images but {} annotations", images.len(), anns.len())));
    }
    images
        .into_iter()
        .zip(anns)
        .map(|((id, image), annotation)| {
            if id != annotation.image_id {
                return Err(Error::Format(format!("image {id:?} paired with annotation {:?}", annotation.image_id)));
            }
            Ok(Sample { image, annotation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = gen_synthetic(20, 7).unwrap();
        let b = gen_synthetic(20, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(20, 8).unwrap());
    }

    #[test]
    fn angles_and_counts_in_range() {
        for s in gen_synthetic(300, 1).unwrap() {
            assert!((1..=3).contains(&s.annotation.objects.len()));
            for o in &s.annotation.objects {
                assert!((-90.0..=90.0).contains(&o.pose.pitch));
                assert!(o.pose.yaw.abs() <= 180.0 && o.pose.roll.abs() <= 90.0);
            }
            s.annotation.validate(1).unwrap();
            assert!(s.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn rendered_box_matches_annotation() {
        // Oracle: paint each marker alone on a black canvas and take the
        // bounding box of every touched pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (_, markers) = render(&mut rng, IMAGE_SIZE);
            for m in &markers {
                let mut canvas = Image { size: IMAGE_SIZE, pixels: vec![0.0; 3 * IMAGE_SIZE * IMAGE_SIZE] };
                draw_marker(&mut canvas, m);
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        if (0..3).any(|c| canvas.get(c, y, x) > 0.0) {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                let ann = m.annotation(IMAGE_SIZE).bbox.map(|v| v * IMAGE_SIZE as f64);
                let annotated = [ann[0] - ann[2] / 2.0, ann[1] - ann[3] / 2.0, ann[0] + ann[2] / 2.0, ann[1] + ann[3] / 2.0];
                let rendered = [x0 as f64, y0 as f64, x1 as f64, y1 as f64];
                for (r, a) in rendered.iter().zip(annotated) {
                    assert!((r - a).abs() <= 1.0, "rendered {rendered:?} vs annotated {annotated:?}");
                }
            }
        }
    }

    #[test]
    fn tip_points_along_yaw() {
        let m = Marker { center: [28.0, 28.0], radius: 10.0, pose: EulerAngles::new(90.0, 0.0, 0.0) };
        let v = m.vertices();
        assert!((v[0][0] - 28.0).abs() < 1e-12 && (v[0][1] - 18.0).abs() < 1e-12);
        let mut img = Image { size: 56, pixels: vec![0.0; 3 * 56 * 56] };
        draw_marker(&mut img, &m);
        assert!(img.get(2, 20, 28) > 0.9, "tip pixel should be blue");
        assert!((img.get(0, 30, 28) - 0.55).abs() < 1e-6, "body red at zero pitch");
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(4, 3).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn image_file_roundtrip() {
        let data = gen_synthetic(3, 2).unwrap();
        let mut buf = Vec::new();
        write_images(&mut buf, &data).unwrap();
        let back = read_images(buf.as_slice()).unwrap();
        for ((id, img), s) in back.iter().zip(&data) {
            assert_eq!(id, &s.annotation.image_id);
            assert_eq!(img, &s.image);
        }
    }
}
