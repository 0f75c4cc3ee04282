//! Versioned binary checkpoints: model config as JSON plus named f32
//! parameter blobs (little-endian), including BatchNorm running statistics.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::dataset::Eye;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub eye: Option<Eye>,
    /// Binning window the model was trained with, nanoseconds.
    pub window_ns: u64,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn push_blob(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a model and its metadata.
pub fn save(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);

    let (rm, rv) = model.bn_state();
    let blob_count = model.params().len() + 2 * rm.len();
    buf.extend_from_slice(&(blob_count as u32).to_le_bytes());
    for p in model.params() {
        push_blob(&mut buf, &p.name, p.value.shape(), p.value.iter().copied());
    }
    for (i, (m, v)) in rm.iter().zip(rv.iter()).enumerate() {
        push_blob(&mut buf, &format!("bn{i}.running_mean"), &[m.len()], m.iter().copied());
        push_blob(&mut buf, &format!("bn{i}.running_var"), &[v.len()], v.iter().copied());
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, rebuilding the model from its stored config.
pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format(*off as u64, "checkpoint truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };

    if take(&mut off, 4)? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic (expected MSCK)"));
    }
    let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut off, json_len)?)?;
    let mut model: Model<f32> = Model::new(meta.config.clone())?;

    let blob_count = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
    let mut filled = std::collections::HashSet::new();
    for _ in 0..blob_count {
        let start = off as u64;
        let name_len =
            u16::from_le_bytes(take(&mut off, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::format(start, "non-utf8 blob name"))?;
        let ndim = take(&mut off, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize);
        }
        let count: usize = dims.iter().product();
        let raw = take(&mut off, count * 4)?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            data.push(f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().expect("4 bytes")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::format(start, format!("blob '{name}' shape mismatch")))?;

        if let Some(rest) = name.strip_prefix("bn") {
            if let Some((slot_str, kind)) = rest.split_once('.') {
                let slot: usize = slot_str
                    .parse()
                    .map_err(|_| Error::format(start, format!("bad bn slot in '{name}'")))?;
                let (rm, rv) = model.bn_state_mut();
                let target = match kind {
                    "running_mean" => rm.get_mut(slot),
                    "running_var" => rv.get_mut(slot),
                    _ => None,
                };
                match target {
                    Some(t) if t.len() == arr.len() => {
                        *t = ndarray::Array1::from_iter(arr.iter().copied());
                        filled.insert(name);
                        continue;
                    }
                    _ => {
                        return Err(Error::format(start, format!("unexpected bn blob '{name}'")))
                    }
                }
            }
        }
        let param = model
            .params_mut()
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::format(start, format!("unknown parameter '{name}'")))?;
        if param.value.shape() != arr.shape() {
            return Err(Error::format(
                start,
                format!(
                    "parameter '{name}' shape {:?} != stored {:?}",
                    param.value.shape(),
                    arr.shape()
                ),
            ));
        }
        param.value = arr;
        filled.insert(name);
    }
    for p in model.params() {
        if !filled.contains(&p.name) {
            return Err(Error::format(
                bytes.len() as u64,
                format!("checkpoint missing parameter '{}'", p.name),
            ));
        }
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::lif::LifParams;
    use crate::snn::model::Preset;

    #[test]
    fn roundtrip_preserves_everything() {
        let config = ModelConfig {
            preset: Preset::Vgg11s,
            t_bins: 4,
            in_channels: 2,
            height: 36,
            width: 36,
            class_count: 7,
            lif: LifParams::default(),
            lambda: 0.0,
        };
        let mut model: Model<f32> = Model::new(config.clone()).unwrap();
        model.init(11);
        let meta = CheckpointMeta {
            config,
            eye: Some(Eye::Left),
            window_ns: 3_000_000,
            seed: 11,
            best_epoch: 3,
            best_val_acc: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.msck");
        save(&model, &meta, &path).unwrap();
        let (back, meta2) = load(&path).unwrap();
        assert_eq!(meta2, meta);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let (rm1, rv1) = model.bn_state();
        let (rm2, rv2) = back.bn_state();
        assert_eq!(rm1, rm2);
        assert_eq!(rv1, rv2);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msck");
        std::fs::write(&path, b"XXXX0000").unwrap();
        match load(&path) {
            Err(Error::Format { .. }) => {}
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("expected format error, got success"),
        }
    }
}
