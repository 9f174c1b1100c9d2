//! Checkpoint files: a short text header, a little-endian tensor blob and a
//! SHA-256 trailer over everything before it.
//!
//! ```text
//! COILTSC-CKPT 1
//! precision f64
//! spec {...}
//! meta {...}
//! tensors 2
//! tensor conv1.weight param 6,4,7
//! tensor bn.running_mean buffer 6
//! data 1234
//! <bytes>
//! sha256 <hex>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelError, ModelSpec};
use crate::numerics::{Element, Precision};

const MAGIC: &str = "COILTSC-CKPT";
const VERSION: u32 = 1;

/// Header contents of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub precision: Precision,
    pub spec: ModelSpec,
    pub meta: serde_json::Value,
    /// `(name, shape, trainable)` per stored tensor, in store order.
    pub tensors: Vec<(String, Vec<usize>, bool)>,
}

/// Writes `model` to `path` atomically (temporary sibling then rename).
pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &Model<T>,
    meta: &serde_json::Value,
) -> Result<(), ModelError> {
    let store = model.store();
    let mut head = String::new();
    head.push_str(&format!("{MAGIC} {VERSION}\n"));
    head.push_str(&format!("precision {}\n", T::PRECISION));
    head.push_str(&format!("spec {}\n", model.spec().to_canonical()));
    head.push_str(&format!("meta {}\n", serde_json::to_string(meta).expect("json value serializes")));
    head.push_str(&format!("tensors {}\n", store.len()));
    let mut blob = Vec::new();
    for (name, t) in store.iter() {
        let role = if t.requires_grad() { "param" } else { "buffer" };
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("tensor {name} {role} {}\n", dims.join(",")));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    head.push_str(&format!("data {}\n", blob.len()));
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&blob);
    bytes.push(b'\n');
    let digest = hex::encode(Sha256::digest(&bytes));
    bytes.extend_from_slice(format!("sha256 {digest}\n").as_bytes());

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Parsed<'a> {
    info: CheckpointInfo,
    blob: &'a [u8],
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Corrupt(msg.into())
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, ModelError> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not utf-8"))
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str, ModelError> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| corrupt(format!("expected '{key}' line")))
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>, ModelError> {
    let mut pos = 0;
    let first = next_line(bytes, &mut pos)?;
    let version: u32 = field(first, MAGIC)?.parse().map_err(|_| corrupt("bad version"))?;
    if version != VERSION {
        return Err(ModelError::Version(version));
    }

    // Verify the trailer before trusting anything else.
    let body_end = bytes[..bytes.len().saturating_sub(1)]
        .iter()
        .rposition(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing checksum trailer"))?
        + 1;
    let trailer = std::str::from_utf8(&bytes[body_end..]).map_err(|_| corrupt("bad trailer"))?;
    let expected = field(trailer.trim_end(), "sha256")?;
    if hex::encode(Sha256::digest(&bytes[..body_end])) != expected {
        return Err(ModelError::Checksum);
    }

    let precision: Precision = field(next_line(bytes, &mut pos)?, "precision")?
        .parse()
        .map_err(|_| corrupt("bad precision"))?;
    let spec = ModelSpec::from_canonical(field(next_line(bytes, &mut pos)?, "spec")?)
        .map_err(|e| corrupt(format!("spec: {e}")))?;
    let meta: serde_json::Value = serde_json::from_str(field(next_line(bytes, &mut pos)?, "meta")?)
        .map_err(|e| corrupt(format!("meta: {e}")))?;
    let count: usize = field(next_line(bytes, &mut pos)?, "tensors")?
        .parse()
        .map_err(|_| corrupt("bad tensor count"))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = field(next_line(bytes, &mut pos)?, "tensor")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(corrupt(format!("bad tensor line '{line}'")));
        }
        let trainable = match parts[1] {
            "param" => true,
            "buffer" => false,
            other => return Err(corrupt(format!("unknown tensor role '{other}'"))),
        };
        let shape = parts[2]
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| corrupt("bad tensor shape")))
            .collect::<Result<Vec<_>, _>>()?;
        tensors.push((parts[0].to_string(), shape, trainable));
    }
    let nbytes: usize = field(next_line(bytes, &mut pos)?, "data")?
        .parse()
        .map_err(|_| corrupt("bad data length"))?;
    if pos + nbytes + 1 != body_end {
        return Err(corrupt("data length disagrees with file size"));
    }
    let expected_bytes: usize =
        tensors.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum::<usize>() * precision.bytes();
    if expected_bytes != nbytes {
        return Err(corrupt("data length disagrees with tensor shapes"));
    }
    Ok(Parsed {
        info: CheckpointInfo {
            version,
            precision,
            spec,
            meta,
            tensors,
        },
        blob: &bytes[pos..pos + nbytes],
    })
}

/// Reads and verifies only the header.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointInfo, ModelError> {
    let bytes = fs::read(path)?;
    Ok(parse(&bytes)?.info)
}

/// Loads a checkpoint, rebuilding the model from its stored spec.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model<T>, CheckpointInfo), ModelError> {
    let bytes = fs::read(path)?;
    let parsed = parse(&bytes)?;
    let info = parsed.info;
    if info.precision != T::PRECISION {
        return Err(ModelError::Precision {
            stored: info.precision,
            requested: T::PRECISION,
        });
    }
    let mut model = Model::<T>::build(&info.spec, 0)?;
    let store = model.store_mut();
    if store.len() != info.tensors.len() {
        return Err(ModelError::SpecMismatch("tensor count differs from the architecture".into()));
    }
    let width = T::PRECISION.bytes();
    let mut offset = 0;
    for (i, (name, shape, trainable)) in info.tensors.iter().enumerate() {
        let id = crate::layers::ParamId(i);
        if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
            return Err(ModelError::SpecMismatch(format!("tensor {name} does not match the architecture")));
        }
        let t = store.get_mut(id);
        t.set_requires_grad(*trainable);
        for v in t.data_mut() {
            *v = T::read_le(&parsed.blob[offset..offset + width]);
            if !v.is_finite() {
                return Err(corrupt(format!("non-finite value in {name}")));
            }
            offset += width;
        }
    }
    Ok((model, info))
}

/// [`load_checkpoint`], additionally requiring the stored spec to equal `spec`.
pub fn load_checkpoint_for<T: Element>(
    path: &Path,
    spec: &ModelSpec,
) -> Result<(Model<T>, CheckpointInfo), ModelError> {
    let info = peek_checkpoint(path)?;
    if &info.spec != spec {
        return Err(ModelError::SpecMismatch(format!(
            "stored {} but requested {}",
            info.spec.to_canonical(),
            spec.to_canonical()
        )));
    }
    load_checkpoint(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::numerics::Tensor;

    fn sample_input() -> Tensor<f64> {
        Tensor::new(vec![3, 4, 40], (0..480).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for kind in [ModelKind::Tcnn, ModelKind::Lstm, ModelKind::Resnet] {
            let mut model = Model::<f64>::build(&ModelSpec::new(kind), 9).unwrap();
            model.set_mode(crate::layers::Mode::Eval);
            let before = model.forward(&sample_input()).unwrap();
            save_checkpoint(&path, &model, &serde_json::json!({"val_loss": 0.25})).unwrap();
            let (mut loaded, info) = load_checkpoint::<f64>(&path).unwrap();
            assert_eq!(info.meta["val_loss"], 0.25);
            loaded.set_mode(crate::layers::Mode::Eval);
            assert_eq!(loaded.forward(&sample_input()).unwrap().data(), before.data());
        }
    }

    #[test]
    fn detects_corruption_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f64>::build(&ModelSpec::new(ModelKind::Tcnn), 1).unwrap();
        save_checkpoint(&path, &model, &serde_json::json!({})).unwrap();

        assert!(matches!(load_checkpoint::<f32>(&path), Err(ModelError::Precision { .. })));
        let other = ModelSpec::new(ModelKind::Lstm);
        assert!(matches!(load_checkpoint_for::<f64>(&path, &other), Err(ModelError::SpecMismatch(_))));

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(ModelError::Checksum)));

        let text = String::from_utf8_lossy(&fs::read(&path).unwrap()).replacen("CKPT 1", "CKPT 7", 1);
        fs::write(&path, text.as_bytes()).unwrap();
        assert!(matches!(peek_checkpoint(&path), Err(ModelError::Version(7))));
    }
}
