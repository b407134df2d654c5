//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DCUNETCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (network config, model
//! role, parameter names and shapes), then every parameter as little-endian
//! `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_network, Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::volumes::Subregion;

pub const MAGIC: &[u8; 8] = b"DCUNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Multitask,
    Cascaded(Subregion),
}

impl ModelRole {
    pub fn out_channels(self) -> usize {
        match self {
            ModelRole::Multitask => 3,
            ModelRole::Cascaded(_) => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    role: ModelRole,
    params: Vec<ParamEntry>,
}

/// Writes atomically: the file appears only once it is complete.
pub fn save_checkpoint(model: &Model, role: ModelRole, path: &Path) -> Result<()> {
    if role.out_channels() != model.config().out_channels {
        return Err(Error::Checkpoint(format!(
            "role {role:?} does not match {} output channels",
            model.config().out_channels
        )));
    }
    let header = Header {
        config: model.config().clone(),
        role,
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in model.params().iter() {
            for v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the architecture from the stored config and
/// checking every parameter name and shape against it.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelRole)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let len = u64::from_le_bytes(buf8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.role.out_channels() != header.config.out_channels {
        return Err(Error::Checkpoint(format!(
            "role {:?} inconsistent with {} output channels",
            header.role, header.config.out_channels
        )));
    }
    let mut model = build_network(&header.config)?;
    if model.params().len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "architecture has {} parameter tensors, file has {}",
            model.params().len(),
            header.params.len()
        )));
    }
    for (param, entry) in model.params_mut().iter_mut().zip(&header.params) {
        if param.name != entry.name || param.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match architecture {} {:?}",
                entry.name, entry.shape, param.name, param.shape
            )));
        }
        for v in param.data.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
    }
    if r.read(&mut buf8)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".to_string()));
    }
    Ok((model, header.role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::model::Predictor;
    use ndarray::Array4;

    fn toy() -> NetworkConfig {
        NetworkConfig {
            out_channels: 1,
            patch_size: [16; 3],
            depth: 2,
            base_filters: 4,
            groupnorm_groups: 2,
            init_seed: 17,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_parameters_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wt.ckpt");
        let mut model = build_network(&toy()).unwrap();
        for p in model.params_mut().iter_mut() {
            for (i, v) in p.data.iter_mut().enumerate() {
                *v += i as f64 * 1e-3;
            }
        }
        save_checkpoint(&model, ModelRole::Cascaded(Subregion::Wt), &path).unwrap();
        let (loaded, role) = load_checkpoint(&path).unwrap();
        assert_eq!(role, ModelRole::Cascaded(Subregion::Wt));
        assert_eq!(loaded.params(), model.params());
        let input = Array4::from_elem((4, 16, 16, 16), 0.5);
        assert_eq!(loaded.predict(&input).unwrap(), model.predict(&input).unwrap());
    }

    #[test]
    fn rejects_role_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_network(&toy()).unwrap();
        let path = dir.path().join("m.ckpt");
        assert!(save_checkpoint(&model, ModelRole::Multitask, &path).is_err());
        assert!(!path.exists());
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_network(&toy()).unwrap();
        save_checkpoint(&model, ModelRole::Cascaded(Subregion::Tc), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
