//! Four-neighbor bilinear interpolation on a single feature plane.
//! Locations outside `[0, h-1] x [0, w-1]` read zero.

use crate::scalar::Scalar;

#[inline]
fn fetch<T: Scalar>(plane: &[T], h: isize, w: isize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h || x >= w {
        T::zero()
    } else {
        plane[(y * w + x) as usize]
    }
}

/// Interpolated value at `(x, y)`.
pub fn sample<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let (hi, wi) = (h as isize, w as isize);
    let x0f = x.floor();
    let y0f = y.floor();
    let (x0, y0) = (x0f.to_f64() as isize, y0f.to_f64() as isize);
    let wx = x - x0f;
    let wy = y - y0f;
    let f00 = fetch(plane, hi, wi, y0, x0);
    let f10 = fetch(plane, hi, wi, y0, x0 + 1);
    let f01 = fetch(plane, hi, wi, y0 + 1, x0);
    let f11 = fetch(plane, hi, wi, y0 + 1, x0 + 1);
    let one = T::one();
    f00 * (one - wx) * (one - wy) + f10 * wx * (one - wy) + f01 * (one - wx) * wy + f11 * wx * wy
}

/// Value plus partial derivatives with respect to `x` and `y`.
pub fn sample_with_grad<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> (T, T, T) {
    let (hi, wi) = (h as isize, w as isize);
    let x0f = x.floor();
    let y0f = y.floor();
    let (x0, y0) = (x0f.to_f64() as isize, y0f.to_f64() as isize);
    let wx = x - x0f;
    let wy = y - y0f;
    let f00 = fetch(plane, hi, wi, y0, x0);
    let f10 = fetch(plane, hi, wi, y0, x0 + 1);
    let f01 = fetch(plane, hi, wi, y0 + 1, x0);
    let f11 = fetch(plane, hi, wi, y0 + 1, x0 + 1);
    let one = T::one();
    let v = f00 * (one - wx) * (one - wy)
        + f10 * wx * (one - wy)
        + f01 * (one - wx) * wy
        + f11 * wx * wy;
    let dx = (f10 - f00) * (one - wy) + (f11 - f01) * wy;
    let dy = (f01 - f00) * (one - wx) + (f11 - f10) * wx;
    (v, dx, dy)
}

/// Scatter `g` back to the four source corners of a sample at `(x, y)`.
pub fn scatter_grad<T: Scalar>(plane: &mut [T], h: usize, w: usize, x: T, y: T, g: T) {
    let (hi, wi) = (h as isize, w as isize);
    let x0f = x.floor();
    let y0f = y.floor();
    let (x0, y0) = (x0f.to_f64() as isize, y0f.to_f64() as isize);
    let wx = x - x0f;
    let wy = y - y0f;
    let one = T::one();
    let mut add = |yy: isize, xx: isize, wgt: T| {
        if yy >= 0 && xx >= 0 && yy < hi && xx < wi {
            plane[(yy * wi + xx) as usize] += g * wgt;
        }
    };
    add(y0, x0, (one - wx) * (one - wy));
    add(y0, x0 + 1, wx * (one - wy));
    add(y0 + 1, x0, (one - wx) * wy);
    add(y0 + 1, x0 + 1, wx * wy);
}
