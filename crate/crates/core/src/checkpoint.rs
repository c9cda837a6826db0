//! WSCK checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WSCK"            4 bytes magic
//! version           u32, currently 1
//! header_len        u64
//! header            header_len bytes of UTF-8 JSON
//! payload           f32 values
//! ```
//!
//! The JSON header is `{"spec": …, "meta": {…}, "tensors": {…}}`. `meta` keys
//! are sorted. `tensors` lists `<layer>.weight` then `<layer>.bias` for every
//! layer in model order, each as `{"shape": [...], "offset": bytes, "count": n}`
//! with `offset` measured from the start of the payload. Weights are stored
//! row-major.
//!
//! Parameters live in memory as `f64` and on disk as `f32`; saving rounds to
//! nearest and loading widens exactly, so `load(save(c))` equals `c` after one
//! round of `f32` quantization.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::engine::{Layer, ModelSpec, ParameterSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: BTreeMap<String, String>,
    tensors: IndexMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParameterSet) -> Result<Self> {
        params.validate(&spec)?;
        Ok(Self {
            spec,
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Canonical file contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate(&self.spec)?;
        let mut tensors = IndexMap::new();
        let mut offset = 0;
        for (name, layer) in self.params.iter() {
            let w = layer.weight.len();
            tensors.insert(
                format!("{name}.weight"),
                TensorEntry {
                    shape: layer.weight.shape().to_vec(),
                    offset,
                    count: w,
                },
            );
            offset += 4 * w;
            tensors.insert(
                format!("{name}.bias"),
                TensorEntry {
                    shape: vec![layer.bias.len()],
                    offset,
                    count: layer.bias.len(),
                },
            );
            offset += 4 * layer.bias.len();
        }
        let header = Header {
            spec: self.spec.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialization cannot fail");

        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, layer) in self.params.iter() {
            for &v in layer.values() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "layer `{name}` (value {v} overflows f32)"
                    )));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parse and validate file contents; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let truncated = |detail: String| Error::Truncated {
            path: origin.to_path_buf(),
            detail,
        };
        let mismatch = |detail: String| Error::HeaderMismatch {
            path: origin.to_path_buf(),
            detail,
        };

        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
                return Err(truncated(format!("{} bytes", bytes.len())));
            }
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
            });
        }
        if bytes.len() < PREFIX_LEN {
            return Err(truncated(format!("{} byte prefix", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: origin.to_path_buf(),
                version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREFIX_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| truncated(format!("header of {header_len} bytes")))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|source| {
                Error::HeaderJson {
                    path: origin.to_path_buf(),
                    source,
                }
            })?;
        let payload = &bytes[header_end..];

        let spec = header.spec;
        let expected_entries = 2 * spec.layers().len();
        if header.tensors.len() != expected_entries {
            return Err(mismatch(format!(
                "{} tensors listed, spec needs {expected_entries}",
                header.tensors.len()
            )));
        }
        let mut params = ParameterSet::new();
        let mut cursor = 0usize;
        let mut entries = header.tensors.iter();
        for (k, ls) in spec.layers().iter().enumerate() {
            let in_dim = spec.layer_input_dim(k);
            let wanted = [
                (format!("{}.weight", ls.name), vec![ls.out_dim, in_dim]),
                (format!("{}.bias", ls.name), vec![ls.out_dim]),
            ];
            let mut values = Vec::with_capacity(2);
            for (name, shape) in wanted {
                let (got_name, entry) = entries.next().expect("count checked above");
                if got_name != &name {
                    return Err(mismatch(format!("expected tensor `{name}`, found `{got_name}`")));
                }
                let count: usize = shape.iter().product();
                if entry.shape != shape || entry.count != count {
                    return Err(mismatch(format!(
                        "tensor `{name}` has shape {:?} / count {}, spec implies {shape:?} / {count}",
                        entry.shape, entry.count
                    )));
                }
                if entry.offset != cursor {
                    return Err(mismatch(format!(
                        "tensor `{name}` at offset {}, expected {cursor}",
                        entry.offset
                    )));
                }
                let end = cursor + 4 * count;
                if end > payload.len() {
                    return Err(truncated(format!(
                        "tensor `{name}` needs bytes {cursor}..{end}, payload has {}",
                        payload.len()
                    )));
                }
                let data: Vec<f64> = payload[cursor..end]
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                values.push(data);
                cursor = end;
            }
            let bias = Array1::from(values.pop().unwrap());
            let weight = Array2::from_shape_vec((ls.out_dim, in_dim), values.pop().unwrap())
                .expect("length checked against shape");
            params.insert(ls.name.clone(), Layer::new(weight, bias));
        }
        if cursor != payload.len() {
            return Err(mismatch(format!(
                "{} trailing payload bytes",
                payload.len() - cursor
            )));
        }
        params.validate(&spec)?;
        Ok(Self {
            spec,
            params,
            meta: header.meta,
        })
    }
}

/// Ok iff both checkpoints share an identical architecture.
pub fn check_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    check_specs(&a.spec, &b.spec)
}

pub fn check_specs(a: &ModelSpec, b: &ModelSpec) -> Result<()> {
    if a.input_dim() != b.input_dim() {
        return Err(Error::Incompatible(format!(
            "input_dim {} vs {}",
            a.input_dim(),
            b.input_dim()
        )));
    }
    for (k, (la, lb)) in a.layers().iter().zip(b.layers()).enumerate() {
        if la.name != lb.name {
            return Err(Error::Incompatible(format!(
                "layer {k} is named `{}` vs `{}`",
                la.name, lb.name
            )));
        }
        if la.out_dim != lb.out_dim {
            return Err(Error::Incompatible(format!(
                "layer `{}` width {} vs {}",
                la.name, la.out_dim, lb.out_dim
            )));
        }
        if la.activation != lb.activation {
            return Err(Error::Incompatible(format!(
                "layer `{}` activation {:?} vs {:?}",
                la.name, la.activation, lb.activation
            )));
        }
    }
    if a.layers().len() != b.layers().len() {
        return Err(Error::Incompatible(format!(
            "{} layers vs {} layers",
            a.layers().len(),
            b.layers().len()
        )));
    }
    Ok(())
}

/// Round every parameter through `f32`, as a save/load cycle does.
pub fn quantize_f32(params: &ParameterSet) -> ParameterSet {
    let mut out = params.clone();
    for v in out.values_mut() {
        *v = f64::from(*v as f32);
    }
    out
}
