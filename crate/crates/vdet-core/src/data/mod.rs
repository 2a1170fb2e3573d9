//! Dataset handling: annotation types, label parsing, image I/O,
//! letterboxing, augmentation, and the synthetic rectangle benchmark.

use crate::boxes::Box2;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub mod augment;
pub mod kitti;
pub mod letterbox;
pub mod ppm;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use kitti::{parse_kitti_labels, serialize_kitti_labels};
pub use letterbox::{letterbox, LetterboxTransform};
pub use synth::synth_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image error: {0}")]
    Image(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Ground-truth object: class, visibility attributes, and pixel box.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub class_name: String,
    /// Index into the model class list; `None` for unknown classes, which
    /// are excluded from training targets.
    pub class: Option<usize>,
    pub truncated: f64,
    pub occluded: u8,
    pub bbox: Box2,
    pub dont_care: bool,
}

impl Annotation {
    /// Regions excluded from training targets and treated as ignore zones
    /// during evaluation.
    pub fn is_ignore(&self) -> bool {
        self.dont_care || self.truncated > 0.8 || self.occluded == 3
    }

    /// Usable as a positive training target.
    pub fn is_target(&self) -> bool {
        self.class.is_some() && !self.is_ignore()
    }
}

/// One image with its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Ordered sample collection with a shared class list.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic shuffle order for one epoch.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    /// Resolves annotation class indices against the dataset class list.
    pub fn resolve_classes(&mut self) {
        for s in &mut self.samples {
            for a in &mut s.annotations {
                a.class = self.class_names.iter().position(|c| *c == a.class_name);
            }
        }
    }

    /// Letterboxes every sample to a square target size.
    pub fn letterboxed(&self, target: usize) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let (img, anns, _) = letterbox::letterbox(&s.image, &s.annotations, target);
                Sample { image: img, annotations: anns, id: s.id.clone() }
            })
            .collect();
        Dataset { samples, class_names: self.class_names.clone() }
    }

    /// Splits off the last `n` samples as a held-out set.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let tail = self.samples.split_off(self.samples.len() - n);
        let held = Dataset { samples: tail, class_names: self.class_names.clone() };
        (self, held)
    }
}

/// Loads a manifest of `image_path<TAB>label_path` lines. Paths are
/// resolved relative to the manifest location.
pub fn load_manifest(path: impl AsRef<Path>, class_names: &[String]) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (img_rel, label_rel) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            msg: "expected image_path<TAB>label_path".into(),
        })?;
        let img_path = base.join(img_rel.trim());
        let label_path = base.join(label_rel.trim());
        let image = ppm::read_ppm(&img_path)?;
        let label_text = std::fs::read_to_string(&label_path)
            .map_err(|e| DataError::Io { path: label_path.clone(), source: e })?;
        let annotations = kitti::parse_kitti_labels(&label_text)?;
        let id = img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        samples.push(Sample { image, annotations, id });
    }
    let mut ds = Dataset { samples, class_names: class_names.to_vec() };
    ds.resolve_classes();
    Ok(ds)
}

/// Per-channel standardization `(x - mean) / std`.
pub fn normalize<T: Scalar>(
    image: &Tensor<T>,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Tensor<T>, DataError> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(DataError::InvalidParam(format!("std components must be positive: {std:?}")));
    }
    let shape = image.shape();
    assert_eq!(shape[0], 3, "normalize expects a [3,H,W] image");
    let hw: usize = shape[1..].iter().product();
    let mut out = image.clone();
    for c in 0..3 {
        let m = T::from_f64(mean[c]);
        let s = T::from_f64(std[c]);
        for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(image: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let shape = image.shape();
    let hw: usize = shape[1..].iter().product();
    let mut out = image.clone();
    for c in 0..3 {
        let m = T::from_f64(mean[c]);
        let s = T::from_f64(std[c]);
        for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
            *v = *v * s + m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_identity_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f32>::rand_uniform(&[3, 4, 5], 0.0, 1.0, &mut rng);
        let same = normalize(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(same, img);

        let mean = [0.3, 0.4, 0.5];
        let std = [0.2, 0.25, 0.3];
        let n = normalize(&img, mean, std).unwrap();
        let back = denormalize(&n, mean, std);
        for (&a, &b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_of_constant_mean_is_zero() {
        let img = Tensor::<f32>::from_fn(&[3, 2, 2], |i| [0.3f32, 0.4, 0.5][i / 4]);
        let n = normalize(&img, [0.3, 0.4, 0.5], [1.0; 3]).unwrap();
        assert!(n.data().iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let img = Tensor::<f32>::zeros(&[3, 2, 2]);
        assert!(normalize(&img, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn shuffle_is_reproducible() {
        let ds = synth::synth_dataset(8, 3, 5, 64).unwrap();
        assert_eq!(ds.shuffled_indices(9), ds.shuffled_indices(9));
        assert_ne!(ds.shuffled_indices(9), ds.shuffled_indices(10));
    }
}
