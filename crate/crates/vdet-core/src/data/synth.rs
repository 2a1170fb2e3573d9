//! Deterministic synthetic detection task: solid background plus colored
//! axis-aligned rectangles, class given by the color bucket, exact boxes.

use super::{Annotation, DataError, Dataset, Sample};
use crate::boxes::Box2;
use crate::eval::iou;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Color buckets; the class index picks the bucket.
const PALETTE: [(&str, [f32; 3]); 8] = [
    ("Red", [0.85, 0.10, 0.10]),
    ("Green", [0.10, 0.80, 0.15]),
    ("Blue", [0.15, 0.20, 0.90]),
    ("Yellow", [0.90, 0.85, 0.10]),
    ("Magenta", [0.85, 0.10, 0.80]),
    ("Cyan", [0.10, 0.80, 0.85]),
    ("Orange", [0.90, 0.50, 0.10]),
    ("White", [0.92, 0.92, 0.92]),
];

/// Maximum pairwise overlap between generated rectangles.
pub const MAX_PAIR_IOU: f64 = 0.3;

/// Minimum rectangle side in pixels.
pub const MIN_SIDE: usize = 16;

pub fn synth_class_names(n_classes: usize) -> Vec<String> {
    PALETTE[..n_classes].iter().map(|(n, _)| n.to_string()).collect()
}

/// Generates `n_images` square images of `img_size` pixels. Identical seeds
/// produce bitwise-identical datasets.
pub fn synth_dataset(
    n_images: usize,
    n_classes: usize,
    seed: u64,
    img_size: usize,
) -> Result<Dataset, DataError> {
    if n_images == 0 {
        return Err(DataError::InvalidParam("need at least one image".into()));
    }
    if n_classes == 0 || n_classes > PALETTE.len() {
        return Err(DataError::InvalidParam(format!(
            "n_classes must be in 1..={}, got {n_classes}",
            PALETTE.len()
        )));
    }
    if img_size < 3 * MIN_SIDE {
        return Err(DataError::InvalidParam(format!(
            "img_size {img_size} too small for {MIN_SIDE}px rectangles"
        )));
    }

    let class_names = synth_class_names(n_classes);
    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        samples.push(generate_sample(&mut rng, i, n_classes, img_size));
    }
    Ok(Dataset { samples, class_names })
}

fn generate_sample(rng: &mut ChaCha8Rng, index: usize, n_classes: usize, size: usize) -> Sample {
    let bg: [f32; 3] = [(); 3].map(|_| rng.gen_range(0.05..0.30) as f32);
    let mut data = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        data[c * size * size..(c + 1) * size * size].fill(bg[c]);
    }

    let max_side = (size / 3).max(MIN_SIDE + 1);
    let want = rng.gen_range(1..=5usize);
    let mut boxes: Vec<Box2> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..want {
        let mut placed = None;
        for _try in 0..30 {
            let w = rng.gen_range(MIN_SIDE..=max_side);
            let h = rng.gen_range(MIN_SIDE..=max_side);
            let left = rng.gen_range(1..size - w);
            let top = rng.gen_range(1..size - h);
            let cand = Box2::new(left as f64, top as f64, (left + w) as f64, (top + h) as f64);
            if boxes.iter().all(|b| iou(b, &cand) <= MAX_PAIR_IOU) {
                placed = Some(cand);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let class = rng.gen_range(0..n_classes);
        let (name, base) = PALETTE[class];
        let color: [f32; 3] =
            [0, 1, 2].map(|c| (base[c] + rng.gen_range(-0.05..0.05) as f32).clamp(0.0, 1.0));
        for c in 0..3 {
            for y in bbox.top as usize..bbox.bottom as usize {
                let off = (c * size + y) * size;
                data[off + bbox.left as usize..off + bbox.right as usize].fill(color[c]);
            }
        }
        boxes.push(bbox);
        annotations.push(Annotation {
            class_name: name.to_string(),
            class: Some(class),
            truncated: 0.0,
            occluded: 0,
            bbox,
            dont_care: false,
        });
    }

    Sample {
        image: Tensor::new(&[3, size, size], data),
        annotations,
        id: format!("synth_{index:05}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_is_bitwise_identical() {
        let a = synth_dataset(6, 4, 42, 96).unwrap();
        let b = synth_dataset(6, 4, 42, 96).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.annotations, sb.annotations);
        }
        let c = synth_dataset(6, 4, 43, 96).unwrap();
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn every_box_meets_minimum_area() {
        let ds = synth_dataset(20, 4, 7, 128).unwrap();
        for s in &ds.samples {
            assert!(!s.annotations.is_empty() || true);
            for a in &s.annotations {
                assert!(a.bbox.area() >= (MIN_SIDE * MIN_SIDE) as f64);
                assert!(a.bbox.left >= 0.0 && a.bbox.right <= 128.0);
            }
        }
    }

    #[test]
    fn pairwise_overlap_capped_by_rejection_rule() {
        let ds = synth_dataset(30, 4, 9, 128).unwrap();
        for s in &ds.samples {
            for (i, a) in s.annotations.iter().enumerate() {
                for b in &s.annotations[i + 1..] {
                    let v = iou(&a.bbox, &b.bbox);
                    assert!(v <= MAX_PAIR_IOU + 1e-12, "pairwise overlap {v}");
                }
            }
        }
    }

    #[test]
    fn rectangles_paint_their_own_boxes() {
        let ds = synth_dataset(10, 4, 21, 96).unwrap();
        for s in &ds.samples {
            for a in &s.annotations {
                // boxes may overlap (up to the IoU cap), so the probe pixel
                // belongs to the last-painted box covering it
                let (cx, cy) = a.bbox.center();
                let (x, y) = (cx as usize, cy as usize);
                let owner = s
                    .annotations
                    .iter()
                    .rev()
                    .find(|o| {
                        (x as f64) >= o.bbox.left
                            && (x as f64) < o.bbox.right
                            && (y as f64) >= o.bbox.top
                            && (y as f64) < o.bbox.bottom
                    })
                    .unwrap();
                let hw = 96 * 96;
                let px = [0, 1, 2].map(|c| s.image.data()[c * hw + y * 96 + x]);
                let (_, base) = PALETTE[owner.class.unwrap()];
                for c in 0..3 {
                    assert!((px[c] - base[c]).abs() < 0.2, "probe pixel off palette");
                }
            }
        }
    }
}
