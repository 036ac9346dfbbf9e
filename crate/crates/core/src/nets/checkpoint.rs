//! Checkpoint archive.
//!
//! Layout: the 8-byte magic `TVGANCK1`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{"spec": NetSpec, "tensors": [{"name", "shape"}]}`,
//! then every tensor's values as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{NetSpec, NetworkHandle};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TVGANCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetSpec,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(net: &NetworkHandle) -> Result<Vec<u8>> {
    let params = net.params();
    let header = Header {
        spec: net.spec(),
        tensors: params
            .iter()
            .map(|(_, name, v)| TensorEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, v) in params.iter() {
        for &x in v.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<NetworkHandle> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let mut net = NetworkHandle::build(&header.spec, 0)?;
    let mut offset = 12 + hlen;
    let mut seen = vec![false; net.params().len()];
    for entry in &header.tensors {
        let id = net
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
        let target = net.params_mut().get_mut(id);
        if target.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        *target = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
        seen[id.index()] = true;
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "tensor `{}` missing from archive",
            net.params().name(super::ParamId(missing))
        )));
    }
    if let Some(bad) = net.params().first_non_finite() {
        return Err(Error::Checkpoint(format!("tensor `{bad}` holds non-finite values")));
    }
    Ok(net)
}

/// Writes atomically: temp file in the target directory, then rename.
pub fn save_checkpoint(net: &NetworkHandle, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(net)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkHandle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_discriminator, build_generator, DiscriminatorSpec, GeneratorSpec};

    #[test]
    fn round_trip_preserves_spec_and_f32_values() {
        let g = build_generator(&GeneratorSpec::new(16, 2, 4), 9).unwrap();
        let handle = NetworkHandle::from(g);
        let bytes = write_checkpoint(&handle).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.spec(), handle.spec());
        for ((_, n1, a), (_, n2, b)) in handle.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // f32 values survive a second round trip bit-exactly
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let d = build_discriminator(&DiscriminatorSpec { base_channels: 4, ..DiscriminatorSpec::new(16, 2) }, 1).unwrap();
        let bytes = write_checkpoint(&d.into()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(b"garbage bytes here").is_err());
        let mut flipped = bytes.clone();
        flipped[14] ^= 0xff;
        assert!(read_checkpoint(&flipped).is_err());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tvgan_epoch1.ckpt");
        let g = build_generator(&GeneratorSpec::new(16, 2, 4), 2).unwrap();
        save_checkpoint(&g.into(), &path).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert!(matches!(load_checkpoint(&path).unwrap(), NetworkHandle::Generator(_)));
    }
}
