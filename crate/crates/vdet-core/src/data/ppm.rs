//! Binary PPM (P6, 8-bit) reading and writing.

use super::DataError;
use crate::tensor::Tensor;
use std::path::Path;

/// Encodes a `[3, H, W]` image in `[0, 1]` as binary PPM bytes.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "encode_ppm expects [3,H,W]");
    assert_eq!(shape[0], 3, "encode_ppm expects 3 channels");
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let d = image.data();
    out.reserve(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push((d[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Decodes binary PPM bytes into a `[3, H, W]` image in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String, DataError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Image(format!("missing {what} in ppm header")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token("magic")? != "P6" {
        return Err(DataError::Image("not a binary P6 ppm".into()));
    }
    let w: usize = token("width")?.parse().map_err(|_| DataError::Image("bad width".into()))?;
    let h: usize = token("height")?.parse().map_err(|_| DataError::Image("bad height".into()))?;
    let maxval: usize =
        token("maxval")?.parse().map_err(|_| DataError::Image("bad maxval".into()))?;
    if maxval != 255 {
        return Err(DataError::Image(format!("unsupported maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(DataError::Image(format!(
            "raster truncated: need {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..pos + need];
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = raster[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image))
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_exact_on_quantized_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let quantized = decode_ppm(&encode_ppm(&img)).unwrap();
        let twice = decode_ppm(&encode_ppm(&quantized)).unwrap();
        assert_eq!(quantized, twice);
        for (&a, &b) in img.data().iter().zip(quantized.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_ppm(b"P5\n2 2\n255\nxxxx").is_err());
        assert!(decode_ppm(b"P6\n4 4\n255\nshort").is_err());
    }
}
