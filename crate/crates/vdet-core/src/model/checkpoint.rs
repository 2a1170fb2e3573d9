//! Checkpoint serialization.
//!
//! Layout: magic `VDET`, little-endian u16 version, little-endian u64
//! metadata length, a text metadata block (model config plus one
//! name/dtype/shape/offset entry per tensor), then the raw little-endian
//! tensor data in registry order (parameters first, batch-norm running
//! statistics after).

use super::{build_model, Model, ModelConfig};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"VDET";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

fn write_config(out: &mut String, cfg: &ModelConfig) {
    out.push_str("[config]\n");
    let _ = writeln!(out, "num_classes = {}", cfg.num_classes);
    let _ = writeln!(out, "class_names = {}", cfg.class_names.join(","));
    let _ = writeln!(out, "width_mult = {}", cfg.width_mult);
    let _ = writeln!(out, "depth_mult = {}", cfg.depth_mult);
    let _ = writeln!(out, "use_ghost = {}", cfg.use_ghost);
    let _ = writeln!(out, "use_cbam = {}", cfg.use_cbam);
    let _ = writeln!(out, "use_dcn = {}", cfg.use_dcn);
    let _ = writeln!(out, "anchors_per_cell = {}", cfg.anchors_per_cell);
    let _ = writeln!(out, "input_size = {}", cfg.input_size);
}

fn parse_config(lines: &[(String, String)]) -> Result<ModelConfig, CheckpointError> {
    let get = |key: &str| -> Result<&str, CheckpointError> {
        lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format_err(format!("missing config key {key}")))
    };
    let parse_num = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?.parse().map_err(|_| format_err(format!("bad value for {key}")))
    };
    let parse_f = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?.parse().map_err(|_| format_err(format!("bad value for {key}")))
    };
    let parse_b = |key: &str| -> Result<bool, CheckpointError> {
        get(key)?.parse().map_err(|_| format_err(format!("bad value for {key}")))
    };
    Ok(ModelConfig {
        num_classes: parse_num("num_classes")?,
        class_names: get("class_names")?.split(',').map(String::from).collect(),
        width_mult: parse_f("width_mult")?,
        depth_mult: parse_f("depth_mult")?,
        use_ghost: parse_b("use_ghost")?,
        use_cbam: parse_b("use_cbam")?,
        use_dcn: parse_b("use_dcn")?,
        anchors_per_cell: parse_num("anchors_per_cell")?,
        input_size: parse_num("input_size")?,
    })
}

impl<T: Scalar> Model<T> {
    /// Serializes config, parameters, and batch-norm state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let esz = T::DTYPE.size_bytes() as u64;
        let mut entries: Vec<Entry> = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.store.params() {
            entries.push(Entry {
                name: name.to_string(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() as u64 * esz;
        }
        for (name, s) in self.store.bn_states() {
            for (suffix, len) in [("mean", s.mean.len()), ("var", s.var.len())] {
                entries.push(Entry {
                    name: format!("{name}.{suffix}"),
                    dtype: T::DTYPE,
                    shape: vec![len],
                    offset,
                });
                offset += len as u64 * esz;
            }
        }

        let mut meta = String::new();
        write_config(&mut meta, &self.config);
        meta.push_str("[tensors]\n");
        for e in &entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(meta, "{} {} {} {}", e.name, e.dtype.name(), dims.join(","), e.offset);
        }

        let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (_, t) in self.store.params() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for (_, s) in self.store.bn_states() {
            for &v in &s.mean {
                v.write_le(&mut out);
            }
            for &v in &s.var {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Rebuilds a model from checkpoint bytes; every parameter, batch-norm
    /// state, and the config restore bitwise.
    pub fn from_bytes(bytes: &[u8]) -> Result<Model<T>, CheckpointError> {
        if bytes.len() < 14 {
            return Err(CheckpointError::Integrity("file shorter than header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        if bytes.len() < 14 + meta_len {
            return Err(CheckpointError::Integrity("metadata block truncated".into()));
        }
        let meta = std::str::from_utf8(&bytes[14..14 + meta_len])
            .map_err(|_| format_err("metadata is not utf-8"))?;
        let data = &bytes[14 + meta_len..];

        let mut config_lines = Vec::new();
        let mut entries = Vec::new();
        let mut section = "";
        for line in meta.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| format_err(format!("bad config line {line:?}")))?;
                    config_lines.push((k.trim().to_string(), v.trim().to_string()));
                }
                "[tensors]" => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != 4 {
                        return Err(format_err(format!("bad tensor line {line:?}")));
                    }
                    let dtype = Dtype::parse(parts[1])
                        .ok_or_else(|| format_err(format!("unknown dtype {}", parts[1])))?;
                    let shape: Vec<usize> = parts[2]
                        .split(',')
                        .map(|d| d.parse().map_err(|_| format_err("bad shape")))
                        .collect::<Result<_, _>>()?;
                    let offset: u64 =
                        parts[3].parse().map_err(|_| format_err("bad offset"))?;
                    entries.push(Entry { name: parts[0].to_string(), dtype, shape, offset });
                }
                _ => return Err(format_err(format!("unknown metadata section {section:?}"))),
            }
        }

        let config = parse_config(&config_lines)?;
        let mut model: Model<T> =
            build_model(&config, 0).map_err(|e| format_err(format!("config rejected: {e}")))?;

        let esz = T::DTYPE.size_bytes();
        let read_tensor = |e: &Entry| -> Result<Tensor<T>, CheckpointError> {
            if e.dtype != T::DTYPE {
                return Err(format_err(format!(
                    "tensor {} has dtype {}, expected {}",
                    e.name,
                    e.dtype.name(),
                    T::DTYPE.name()
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * esz;
            if end > data.len() {
                return Err(CheckpointError::Integrity(format!(
                    "tensor {} extends past end of file",
                    e.name
                )));
            }
            let vals = (0..n).map(|i| T::read_le(&data[start + i * esz..])).collect();
            Ok(Tensor::new(&e.shape, vals))
        };

        let mut by_name: std::collections::HashMap<&str, &Entry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let param_names: Vec<String> =
            model.store.params().map(|(n, _)| n.to_string()).collect();
        for name in &param_names {
            let e = by_name
                .remove(name.as_str())
                .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
            let t = read_tensor(e)?;
            let slot_id = model
                .store
                .params()
                .position(|(n, _)| n == name)
                .expect("registry name");
            let slot = model.store.param_mut(crate::nn::ParamId(slot_id));
            if slot.shape() != t.shape() {
                return Err(format_err(format!("tensor {name} shape mismatch")));
            }
            *slot = t;
        }
        let bn_names: Vec<(String, usize)> = model
            .store
            .bn_states()
            .map(|(n, s)| (n.to_string(), s.channels()))
            .collect();
        for (i, (name, channels)) in bn_names.iter().enumerate() {
            let mean_e = by_name
                .remove(format!("{name}.mean").as_str())
                .ok_or_else(|| format_err(format!("missing tensor {name}.mean")))?;
            let var_e = by_name
                .remove(format!("{name}.var").as_str())
                .ok_or_else(|| format_err(format!("missing tensor {name}.var")))?;
            let mean = read_tensor(mean_e)?;
            let var = read_tensor(var_e)?;
            if mean.numel() != *channels || var.numel() != *channels {
                return Err(format_err(format!("state {name} channel mismatch")));
            }
            model.store.bn_states_mut()[i].1 =
                crate::kernels::BnState { mean: mean.into_data(), var: var.into_data() };
        }
        if !by_name.is_empty() {
            let stray: Vec<&str> = by_name.keys().copied().collect();
            return Err(format_err(format!("unexpected tensors in file: {stray:?}")));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model<T>, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
