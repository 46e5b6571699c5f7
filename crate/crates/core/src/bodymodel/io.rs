use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{BodyModel, ModelData};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u64 = 1;

#[derive(Serialize)]
struct ModelFile<'a> {
    version: u64,
    #[serde(flatten)]
    data: &'a ModelData,
}

impl BodyModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile { version: MODEL_FORMAT_VERSION, data: self.data() })?)
    }

    pub fn from_json(text: &str) -> Result<BodyModel> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Malformed(format!("model file: {e}")))?;
        let version = value.get("version").ok_or_else(|| Error::Malformed("model file: missing version".into()))?;
        match version.as_u64() {
            Some(MODEL_FORMAT_VERSION) => {}
            Some(found) => return Err(Error::Version { found, expected: MODEL_FORMAT_VERSION }),
            None => return Err(Error::Malformed(format!("model file: invalid version {version}"))),
        }
        let data: ModelData =
            serde_json::from_value(value).map_err(|e| Error::Malformed(format!("model file: {e}")))?;
        BodyModel::from_data(data)
    }
}

pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    BodyModel::from_json(&std::fs::read_to_string(path)?)
}
