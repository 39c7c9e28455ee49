//! Checkpoint serialization.
//!
//! A checkpoint is a directory holding `manifest.txt` (text key/value
//! lines: format version, config fields, then one line per tensor with
//! name, shape, and byte offset) and `weights.bin` (little-endian 32-bit
//! floats, concatenated in manifest order).
//!
//! A language-model-only checkpoint simply omits the relation head
//! tensors from the manifest; loading one reports that so fine-tuning
//! can initialize a fresh head.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Scalar;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

const RELATION_TENSORS: [&str; 2] = ["relation_weight", "relation_bias"];

pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    pub has_relation_head: bool,
}

/// Write a checkpoint. With `include_relation_head` false the classifier
/// tensors are left out (a language-model-only checkpoint).
pub fn save<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    params: &Parameters<T>,
    include_relation_head: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "format_version {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "layers {}", config.layers).unwrap();
    writeln!(manifest, "heads {}", config.heads).unwrap();
    writeln!(manifest, "dim {}", config.dim).unwrap();
    writeln!(manifest, "ff_dim {}", config.ff_dim).unwrap();
    writeln!(manifest, "context {}", config.context).unwrap();
    writeln!(manifest, "vocab_size {}", config.vocab_size).unwrap();
    writeln!(manifest, "relations {}", config.relations).unwrap();
    writeln!(manifest, "dropout_residual {}", config.dropout_residual).unwrap();
    writeln!(manifest, "dropout_attention {}", config.dropout_attention).unwrap();
    writeln!(manifest, "dropout_classifier {}", config.dropout_classifier).unwrap();

    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params.visit() {
        if !include_relation_head && RELATION_TENSORS.contains(&name.as_str()) {
            continue;
        }
        writeln!(
            manifest,
            "tensor {name} {} {} {}",
            tensor.rows(),
            tensor.cols(),
            blob.len()
        )
        .unwrap();
        for &v in tensor.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, blob).map_err(|e| Error::io(&weights_path, e))?;
    Ok(())
}

fn parse_field<V: std::str::FromStr>(
    fields: &HashMap<&str, &str>,
    key: &str,
    path: &Path,
) -> Result<V> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::Data(format!("{}: missing field {key}", path.display())))?;
    raw.parse().map_err(|_| {
        Error::Data(format!(
            "{}: field {key} has unparseable value {raw:?}",
            path.display()
        ))
    })
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut tensors: Vec<(String, usize, usize, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["tensor", name, rows, cols, offset] => {
                let parse = |v: &str| -> Result<usize> {
                    v.parse().map_err(|_| {
                        Error::Data(format!(
                            "{}: line {}: bad tensor entry",
                            manifest_path.display(),
                            lineno + 1
                        ))
                    })
                };
                tensors.push((name.to_string(), parse(rows)?, parse(cols)?, parse(offset)?));
            }
            [key, value] => {
                fields.insert(key, value);
            }
            _ => {
                return Err(Error::Data(format!(
                    "{}: line {}: malformed manifest line {line:?}",
                    manifest_path.display(),
                    lineno + 1
                )));
            }
        }
    }

    let version: u32 = parse_field(&fields, "format_version", &manifest_path)?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format version {version}",
            manifest_path.display()
        )));
    }
    let config = ModelConfig {
        layers: parse_field(&fields, "layers", &manifest_path)?,
        heads: parse_field(&fields, "heads", &manifest_path)?,
        dim: parse_field(&fields, "dim", &manifest_path)?,
        ff_dim: parse_field(&fields, "ff_dim", &manifest_path)?,
        context: parse_field(&fields, "context", &manifest_path)?,
        vocab_size: parse_field(&fields, "vocab_size", &manifest_path)?,
        relations: parse_field(&fields, "relations", &manifest_path)?,
        dropout_residual: parse_field(&fields, "dropout_residual", &manifest_path)?,
        dropout_attention: parse_field(&fields, "dropout_attention", &manifest_path)?,
        dropout_classifier: parse_field(&fields, "dropout_classifier", &manifest_path)?,
    };
    config.validate()?;

    let mut params = Parameters::<T>::zeros(&config);
    let mut seen: Vec<String> = Vec::new();
    {
        let mut by_name: HashMap<String, &mut crate::tensor::Tensor<T>> =
            params.visit_mut().into_iter().collect();
        for (name, rows, cols, offset) in &tensors {
            let tensor = by_name.get_mut(name).ok_or_else(|| {
                Error::Data(format!(
                    "{}: unknown tensor {name}",
                    manifest_path.display()
                ))
            })?;
            if tensor.rows() != *rows || tensor.cols() != *cols {
                return Err(Error::Data(format!(
                    "{}: tensor {name} has shape {rows}x{cols}, config implies {}x{}",
                    manifest_path.display(),
                    tensor.rows(),
                    tensor.cols()
                )));
            }
            let bytes = rows * cols * 4;
            if offset + bytes > blob.len() {
                return Err(Error::Data(format!(
                    "{}: tensor {name} overruns weights file",
                    weights_path.display()
                )));
            }
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                let at = offset + i * 4;
                let raw = f32::from_le_bytes([
                    blob[at],
                    blob[at + 1],
                    blob[at + 2],
                    blob[at + 3],
                ]);
                *v = T::from_f64(raw as f64);
            }
            seen.push(name.clone());
        }
    }

    let has_relation_head = RELATION_TENSORS.iter().all(|r| seen.iter().any(|s| s == r));
    for (name, _) in params.visit() {
        let required = !RELATION_TENSORS.contains(&name.as_str());
        if required && !seen.contains(&name) {
            return Err(Error::Data(format!(
                "{}: tensor {name} missing from checkpoint",
                manifest_path.display()
            )));
        }
    }

    Ok(Checkpoint {
        config,
        params,
        has_relation_head,
    })
}
