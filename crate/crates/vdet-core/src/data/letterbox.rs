//! Aspect-preserving resize plus symmetric padding to a square canvas.

use super::Annotation;
use crate::boxes::Box2;
use crate::tensor::Tensor;

/// Forward box mapping `x' = x * scale + pad`; invertible up to clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn apply_box(&self, b: &Box2) -> Box2 {
        Box2 {
            left: b.left * self.scale + self.pad_x as f64,
            top: b.top * self.scale + self.pad_y as f64,
            right: b.right * self.scale + self.pad_x as f64,
            bottom: b.bottom * self.scale + self.pad_y as f64,
        }
        .clipped(self.target as f64, self.target as f64)
    }

    pub fn invert_box(&self, b: &Box2) -> Box2 {
        Box2 {
            left: (b.left - self.pad_x as f64) / self.scale,
            top: (b.top - self.pad_y as f64) / self.scale,
            right: (b.right - self.pad_x as f64) / self.scale,
            bottom: (b.bottom - self.pad_y as f64) / self.scale,
        }
    }
}

/// Bilinear resize of a `[3, H, W]` image with half-pixel centers.
fn resize_bilinear(image: &Tensor<f32>, nh: usize, nw: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if nh == h && nw == w {
        return image.clone();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = vec![0.0f32; 3 * nh * nw];
    let d = image.data();
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| d[(c * h + yy) * w + xx] as f64;
                let v = at(y0, x0) * (1.0 - wx) * (1.0 - wy)
                    + at(y0, x1) * wx * (1.0 - wy)
                    + at(y1, x0) * (1.0 - wx) * wy
                    + at(y1, x1) * wx * wy;
                out[(c * nh + y) * nw + x] = v as f32;
            }
        }
    }
    Tensor::new(&[3, nh, nw], out)
}

/// Resizes so the longer side equals `target`, pads symmetrically with
/// zeros, and maps the annotations through the same transform.
pub fn letterbox(
    image: &Tensor<f32>,
    annotations: &[Annotation],
    target: usize,
) -> (Tensor<f32>, Vec<Annotation>, LetterboxTransform) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    assert!(h >= 1 && w >= 1, "letterbox needs a nonempty image");
    let scale = target as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let resized = resize_bilinear(image, nh, nw);
    let pad_y = (target - nh) / 2;
    let pad_x = (target - nw) / 2;

    let mut canvas = vec![0.0f32; 3 * target * target];
    for c in 0..3 {
        for y in 0..nh {
            let src = &resized.data()[(c * nh + y) * nw..][..nw];
            let dst_off = (c * target + pad_y + y) * target + pad_x;
            canvas[dst_off..dst_off + nw].copy_from_slice(src);
        }
    }

    let tf = LetterboxTransform { scale, pad_x, pad_y, target };
    let anns = annotations
        .iter()
        .map(|a| Annotation { bbox: tf.apply_box(&a.bbox), ..a.clone() })
        .filter(|a| a.bbox.is_valid())
        .collect();
    (Tensor::new(&[3, target, target], canvas), anns, tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wide_frame_geometry() {
        // 1242x375 frame: scale = 640/1242, vertical pad from the rounded height
        let img = Tensor::<f32>::zeros(&[3, 375, 1242]);
        let (out, _, tf) = letterbox(&img, &[], 640);
        assert_eq!(out.shape(), &[3, 640, 640]);
        assert!((tf.scale - 640.0 / 1242.0).abs() < 1e-12);
        let nh = (375.0f64 * 640.0 / 1242.0).round() as usize;
        assert_eq!(nh, 193);
        assert_eq!(tf.pad_y, (640 - nh) / 2);
        assert_eq!(tf.pad_x, 0);
    }

    #[test]
    fn square_input_is_pure_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::rand_uniform(&[3, 100, 100], 0.0, 1.0, &mut rng);
        let (_, _, tf) = letterbox(&img, &[], 64);
        assert_eq!((tf.pad_x, tf.pad_y), (0, 0));
        assert!((tf.scale - 0.64).abs() < 1e-12);
    }

    #[test]
    fn box_roundtrip_within_half_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f32>::zeros(&[3, 375, 1242]);
        let (_, _, tf) = letterbox(&img, &[], 640);
        for _ in 0..100 {
            let l = rng.gen_range(0.0..1100.0);
            let t = rng.gen_range(0.0..300.0);
            let b = Box2::new(l, t, l + rng.gen_range(5.0..140.0), t + rng.gen_range(5.0..70.0));
            let fwd = tf.apply_box(&b);
            let back = tf.invert_box(&fwd);
            for (a, c) in [
                (b.left, back.left),
                (b.top, back.top),
                (b.right, back.right),
                (b.bottom, back.bottom),
            ] {
                assert!((a - c).abs() <= 0.51, "{a} vs {c}");
            }
        }
    }

    #[test]
    fn padded_border_is_zero() {
        let img = Tensor::<f32>::full(&[3, 10, 20], 1.0);
        let (out, _, tf) = letterbox(&img, &[], 64);
        assert!(tf.pad_y > 0);
        for c in 0..3 {
            for x in 0..64 {
                assert_eq!(out.data()[(c * 64) * 64 + x], 0.0);
                assert_eq!(out.data()[(c * 64 + 63) * 64 + x], 0.0);
            }
        }
    }
}
