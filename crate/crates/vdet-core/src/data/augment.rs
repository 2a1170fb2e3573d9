//! Training-time augmentation: horizontal flip, per-channel color jitter,
//! and four-image mosaic stitching.

use super::{Annotation, Sample};
use crate::boxes::Box2;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub jitter_gain: (f64, f64),
    pub jitter_bias: f64,
    pub mosaic_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_p: 0.5, jitter_gain: (0.6, 1.4), jitter_bias: 0.1, mosaic_p: 0.5 }
    }
}

/// Mirror around the vertical axis; boxes map as `left' = W - right`.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let d = sample.image.data();
    let mut out = vec![0.0f32; d.len()];
    for c in 0..3 {
        for y in 0..h {
            let row = &d[(c * h + y) * w..][..w];
            let dst = &mut out[(c * h + y) * w..][..w];
            for x in 0..w {
                dst[x] = row[w - 1 - x];
            }
        }
    }
    let annotations = sample
        .annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            Annotation {
                bbox: Box2::new(w as f64 - b.right, b.top, w as f64 - b.left, b.bottom),
                ..a.clone()
            }
        })
        .collect();
    Sample { image: Tensor::new(&[3, h, w], out), annotations, id: sample.id.clone() }
}

/// Per-channel gain and bias, clamped back to `[0, 1]`.
pub fn color_jitter(sample: &Sample, gains: [f64; 3], biases: [f64; 3]) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let hw = h * w;
    let mut out = sample.image.clone();
    for c in 0..3 {
        let (g, b) = (gains[c] as f32, biases[c] as f32);
        for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
            *v = (*v * g + b).clamp(0.0, 1.0);
        }
    }
    Sample { image: out, annotations: sample.annotations.clone(), id: sample.id.clone() }
}

/// Minimum surviving area fraction for a clipped mosaic box.
pub const MOSAIC_MIN_AREA_FRACTION: f64 = 0.2;

/// Stitches four same-size samples around a random center. Each quadrant is
/// copied from the matching region of its source, so boxes keep their pixel
/// correspondence; boxes are clipped to their quadrant and dropped when less
/// than [`MOSAIC_MIN_AREA_FRACTION`] of their area survives.
pub fn mosaic(samples: [&Sample; 4], center: (usize, usize)) -> Sample {
    let (h, w) = (samples[0].height(), samples[0].width());
    for s in &samples {
        assert_eq!((s.height(), s.width()), (h, w), "mosaic inputs must share a size");
    }
    let (cx, cy) = center;
    let mut out = vec![0.0f32; 3 * h * w];
    let mut annotations = Vec::new();
    // quadrant windows: (x0, y0, x1, y1)
    let quads = [(0, 0, cx, cy), (cx, 0, w, cy), (0, cy, cx, h), (cx, cy, w, h)];
    for (src, &(x0, y0, x1, y1)) in samples.iter().zip(&quads) {
        let d = src.image.data();
        for c in 0..3 {
            for y in y0..y1 {
                let off = (c * h + y) * w;
                out[off + x0..off + x1].copy_from_slice(&d[off + x0..off + x1]);
            }
        }
        let window = Box2::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
        for a in &src.annotations {
            let clipped = Box2 {
                left: a.bbox.left.max(window.left),
                top: a.bbox.top.max(window.top),
                right: a.bbox.right.min(window.right),
                bottom: a.bbox.bottom.min(window.bottom),
            };
            if clipped.is_valid()
                && clipped.area() >= MOSAIC_MIN_AREA_FRACTION * a.bbox.area()
            {
                annotations.push(Annotation { bbox: clipped, ..a.clone() });
            }
        }
    }
    Sample {
        image: Tensor::new(&[3, h, w], out),
        annotations,
        id: format!("{}+mosaic", samples[0].id),
    }
}

/// Full augmentation pipeline for one sample. `pool` supplies mosaic
/// partners; with fewer than four available samples the mosaic step falls
/// back to the unstitched image.
pub fn augment(sample: &Sample, pool: &[Sample], cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut s = if rng.gen_range(0.0..1.0) < cfg.flip_p {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };

    let gains = [(); 3].map(|_| rng.gen_range(cfg.jitter_gain.0..cfg.jitter_gain.1));
    let biases = [(); 3].map(|_| rng.gen_range(-cfg.jitter_bias..cfg.jitter_bias));
    s = color_jitter(&s, gains, biases);

    if rng.gen_range(0.0..1.0) < cfg.mosaic_p && pool.len() >= 4 {
        let size = s.width();
        let lo = (0.3 * size as f64) as usize;
        let hi = (0.7 * size as f64) as usize;
        let center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let mut partners = Vec::with_capacity(3);
        for _ in 0..3 {
            partners.push(&pool[rng.gen_range(0..pool.len())]);
        }
        s = mosaic([&s, partners[0], partners[1], partners[2]], center);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_flip_is_identity() {
        let ds = synth_dataset(1, 3, 11, 64).unwrap();
        let flipped = flip_horizontal(&flip_horizontal(&ds.samples[0]));
        assert_eq!(flipped.image, ds.samples[0].image);
        for (a, b) in flipped.annotations.iter().zip(&ds.samples[0].annotations) {
            assert!((a.bbox.left - b.bbox.left).abs() < 1e-9);
            assert!((a.bbox.right - b.bbox.right).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_jitter_is_identity() {
        let ds = synth_dataset(1, 3, 12, 64).unwrap();
        let same = color_jitter(&ds.samples[0], [1.0; 3], [0.0; 3]);
        assert_eq!(same.image, ds.samples[0].image);
    }

    #[test]
    fn mosaic_boxes_stay_inside_and_keep_area() {
        let ds = synth_dataset(8, 4, 13, 96).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let pick: Vec<&Sample> =
                (0..4).map(|i| &ds.samples[(trial + i) % ds.len()]).collect();
            let center = (rng.gen_range(29..=67), rng.gen_range(29..=67));
            let m = mosaic([pick[0], pick[1], pick[2], pick[3]], center);
            for a in &m.annotations {
                assert!(a.bbox.left >= 0.0 && a.bbox.right <= 96.0);
                assert!(a.bbox.top >= 0.0 && a.bbox.bottom <= 96.0);
                assert!(a.bbox.is_valid());
                // find the source annotation it came from and check the clip rule
                let src = pick.iter().flat_map(|s| &s.annotations).find(|o| {
                    o.class == a.class
                        && o.bbox.intersection_area(&a.bbox) > 0.999 * a.bbox.area()
                });
                let src = src.expect("mosaic box must come from a source box");
                assert!(a.bbox.area() >= MOSAIC_MIN_AREA_FRACTION * src.bbox.area() - 1e-9);
            }
        }
    }

    #[test]
    fn mosaic_falls_back_without_enough_samples() {
        let ds = synth_dataset(2, 3, 14, 64).unwrap();
        let cfg = AugmentConfig { mosaic_p: 1.0, flip_p: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = augment(&ds.samples[0], &ds.samples, &cfg, &mut rng);
        // pool of two can never stitch four
        assert!(!out.id.contains("mosaic"));
    }

    #[test]
    fn flip_preserves_box_pixel_correspondence() {
        // synthetic rectangles carry a distinct color: after flipping, the
        // brightest off-background pixels must still fall inside the boxes
        let ds = synth_dataset(4, 4, 15, 64).unwrap();
        for s in &ds.samples {
            let f = flip_horizontal(s);
            let (h, w) = (f.height(), f.width());
            let d = f.image.data();
            // background is the most common value in channel 0
            let bg = {
                let mut counts = std::collections::HashMap::new();
                for &v in &d[..h * w] {
                    *counts.entry(v.to_bits()).or_insert(0usize) += 1;
                }
                f32::from_bits(*counts.iter().max_by_key(|(_, c)| **c).unwrap().0)
            };
            for y in 0..h {
                for x in 0..w {
                    if d[y * w + x] != bg {
                        let inside = f.annotations.iter().any(|a| {
                            (x as f64 + 0.5) >= a.bbox.left
                                && (x as f64 + 0.5) <= a.bbox.right
                                && (y as f64 + 0.5) >= a.bbox.top
                                && (y as f64 + 0.5) <= a.bbox.bottom
                        });
                        assert!(inside, "foreground pixel ({x},{y}) escaped all boxes");
                    }
                }
            }
        }
    }
}
