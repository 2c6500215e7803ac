//! Body-model files: JSON, or a compact binary form (`SGBODY01` magic
//! followed by the bincode encoding of the same structure).

use std::fs;
use std::path::Path;

use super::BodyModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGBODY01";

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model: BodyModel = if let Some(body) = bytes.strip_prefix(MAGIC.as_slice()) {
        bincode::deserialize(body).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_slice(&bytes).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?
    };
    model.validate()?;
    Ok(model)
}

/// Writes JSON when the extension is `.json`, the binary form otherwise.
pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "json") {
        serde_json::to_vec(model).map_err(|e| Error::Model(e.to_string()))?
    } else {
        let mut out = MAGIC.to_vec();
        out.extend(bincode::serialize(model).map_err(|e| Error::Model(e.to_string()))?);
        out
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
