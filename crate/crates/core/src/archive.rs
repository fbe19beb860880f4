//! Safetensors archives with string metadata, shared by motion samples and
//! checkpoints. Every archive carries a `schema` and a `version` entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub fn save_archive(
    path: impl AsRef<Path>,
    schema: &str,
    version: u32,
    tensors: &BTreeMap<String, Tensor>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut metadata: HashMap<String, String> = extra.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    metadata.insert("schema".into(), schema.into());
    metadata.insert("version".into(), version.to_string());
    let data: Vec<(&str, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.as_str(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(data, Some(metadata), path.as_ref())
        .map_err(|e| Error::Archive(format!("{}: {e}", path.as_ref().display())))
}

pub struct Archive {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing array `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing metadata `{key}`")))
    }
}

/// Reads an archive and checks its schema name and version.
pub fn load_archive(path: impl AsRef<Path>, schema: &str, version: u32) -> Result<Archive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let archive = Archive {
        tensors: candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?,
        metadata,
    };
    let found = archive.meta("schema")?;
    if found != schema {
        return Err(Error::Archive(format!("{}: expected schema `{schema}`, found `{found}`", path.display())));
    }
    let v = archive.meta("version")?;
    if v != version.to_string() {
        return Err(Error::Archive(format!("{}: unsupported {schema} version {v}", path.display())));
    }
    Ok(archive)
}
