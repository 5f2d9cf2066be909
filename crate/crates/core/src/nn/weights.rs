//! Tensor files: a small native container and safetensors input, plus the
//! per-family adapters that map external encoder checkpoints onto our names.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BackboneFamily, ModelError, SegModel};
use super::Module;
use crate::scalar::Scalar;

/// Values are held as `f64`, which represents every `f32` exactly.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MXSGWTS\0";
const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    dtype: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then the
/// little-endian tensor data back to back.
pub(crate) fn encode_container<T: Scalar>(
    magic: &[u8; 8],
    meta: serde_json::Value,
    tensors: &[(String, &[usize], &[T])],
) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            let e = Entry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset,
            };
            offset += data.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&ContainerHeader {
        dtype: T::DTYPE.to_string(),
        tensors: entries,
        meta,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset * T::BYTES);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for v in *data {
            v.write_le(&mut out);
        }
    }
    out
}

fn read_values(dtype: &str, bytes: &[u8], n: usize) -> Result<Vec<f64>, ModelError> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(ModelError::Format(format!("unsupported dtype `{other}`"))),
    };
    if bytes.len() < n * width {
        return Err(ModelError::Format("tensor data truncated".into()));
    }
    Ok(bytes[..n * width]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::read_le(c).into()
            } else {
                f64::read_le(c)
            }
        })
        .collect())
}

pub(crate) fn decode_container(magic: &[u8; 8], bytes: &[u8]) -> Result<(serde_json::Value, String, TensorMap), ModelError> {
    let bad = |m: &str| ModelError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(ModelError::Format(format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("header truncated"))?;
    let header: ContainerHeader = serde_json::from_slice(body).map_err(|e| ModelError::Format(e.to_string()))?;
    let data = &bytes[20 + hlen..];
    let width = if header.dtype == "f32" { 4 } else { 8 };
    let mut map = TensorMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * width;
        let slice = data.get(start..).ok_or_else(|| bad("tensor offset out of range"))?;
        map.insert(e.name, (e.shape, read_values(&header.dtype, slice, n)?));
    }
    Ok((header.meta, header.dtype, map))
}

fn read_safetensors(bytes: &[u8]) -> Result<TensorMap, ModelError> {
    use safetensors::{Dtype, SafeTensors};
    let st = SafeTensors::deserialize(bytes).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut map = TensorMap::new();
    for (name, view) in st.tensors() {
        let dtype = match view.dtype() {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I64 if name.ends_with("num_batches_tracked") => continue,
            other => return Err(ModelError::Format(format!("`{name}` has unsupported dtype {other:?}"))),
        };
        let n = view.shape().iter().product();
        map.insert(name.clone(), (view.shape().to_vec(), read_values(dtype, view.data(), n)?));
    }
    Ok(map)
}

/// Reads a native weights container or a safetensors file.
pub fn read_tensor_file(path: &Path) -> Result<TensorMap, ModelError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ModelError::WeightsNotFound(path.display().to_string()),
        _ => ModelError::Io(e),
    })?;
    if bytes.starts_with(WEIGHTS_MAGIC) {
        Ok(decode_container(WEIGHTS_MAGIC, &bytes)?.2)
    } else {
        read_safetensors(&bytes)
    }
}

/// Writes every tensor of `module` under `prefix`-relative names.
pub fn save_module<T: Scalar, M: Module<T> + ?Sized>(module: &M, path: &Path) -> Result<(), ModelError> {
    let mut owned: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    module.visit("", &mut |n, p| owned.push((n.to_string(), p.value.shape().to_vec(), p.value.data().to_vec())));
    let refs: Vec<(String, &[usize], &[T])> = owned.iter().map(|(n, s, d)| (n.clone(), s.as_slice(), d.as_slice())).collect();
    let bytes = encode_container(WEIGHTS_MAGIC, serde_json::Value::Null, &refs);
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Writes only the encoder of `model`, suitable as a pretrained source.
pub fn export_encoder<T: Scalar>(model: &SegModel<T>, path: &Path) -> Result<(), ModelError> {
    save_module(model.encoder(), path)
}

const WRAPPER_PREFIXES: [&str; 5] = ["module.", "backbone.", "encoder.", "model.", "net."];

/// Strips wrapper prefixes and drops tensors that never belong to the
/// encoder (classification heads, projection heads, batch counters).
pub fn adapt(family: BackboneFamily, raw: TensorMap) -> TensorMap {
    let head_prefixes: &[&str] = match family {
        BackboneFamily::MobilenetV2 => &["classifier.", "projection_head.", "head."],
        BackboneFamily::Toy => &[],
        _ => &["fc.", "projection_head.", "head.", "heads."],
    };
    raw.into_iter()
        .filter_map(|(mut name, v)| {
            while let Some(p) = WRAPPER_PREFIXES.iter().find(|p| name.starts_with(**p)) {
                name = name[p.len()..].to_string();
            }
            let drop = name.ends_with("num_batches_tracked") || head_prefixes.iter().any(|p| name.starts_with(p));
            (!drop).then_some((name, v))
        })
        .collect()
}

#[derive(Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub unused: Vec<String>,
}

/// Copies `map` into every tensor of `module`. All names must be present
/// with identical shapes; nothing is written unless the whole manifest
/// validates.
pub fn load_named<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, map: &TensorMap) -> Result<LoadReport, ModelError> {
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    module.visit("", &mut |n, p| expected.push((n.to_string(), p.value.shape().to_vec())));
    let mut total = 0;
    for (name, shape) in &expected {
        let (found, _) = map.get(name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
        if found != shape {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: found.clone(),
            });
        }
        total += shape.iter().product::<usize>();
    }
    let provided: usize = expected.iter().map(|(n, _)| map[n].1.len()).sum();
    if provided != total {
        return Err(ModelError::ParameterCount { expected: total, found: provided });
    }
    module.visit_mut("", &mut |n, p| {
        let (_, v) = &map[n];
        for (dst, &src) in p.value.data_mut().iter_mut().zip(v) {
            *dst = T::lit(src);
        }
    });
    let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    Ok(LoadReport {
        loaded: expected.len(),
        unused: map.keys().filter(|k| !known.contains(k.as_str())).cloned().collect(),
    })
}
