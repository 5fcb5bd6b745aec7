//! Checkpoint archive: one JSON document holding the config plus every
//! named parameter array. Values are stored as f64, which round-trips f32
//! parameters exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::TinyViT;
use super::params::Parameters;
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ViTConfig,
    params: Vec<NamedArray>,
}

impl<F: Scalar> TinyViT<F> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params = self
            .params()
            .named()
            .into_iter()
            .map(|(name, shape, data)| NamedArray { name, shape, data })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config().clone(),
            params,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e.to_string()))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        file.config.validate()?;

        let mut params = Parameters::<F>::zeros(&file.config);
        let expected = params.named();
        let mut by_name: HashMap<String, NamedArray> = file
            .params
            .into_iter()
            .map(|a| (a.name.clone(), a))
            .collect();
        let mut targets = params.flat_mut();
        for ((name, shape, _), target) in expected.iter().zip(targets.iter_mut()) {
            let stored = by_name.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter '{name}' for the stored config"))
            })?;
            if &stored.shape != shape || stored.data.len() != target.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, config requires {:?}",
                    stored.shape, shape
                )));
            }
            for (dst, src) in target.iter_mut().zip(stored.data.iter()) {
                *dst = F::cast(*src);
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "parameter '{extra}' does not belong to the stored config"
            )));
        }
        Ok(TinyViT::from_parts(file.config, params))
    }
}
