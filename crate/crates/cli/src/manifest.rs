use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wholebody_core::{Error, Result};

use crate::commands::Resolved;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-run a command. Only `duration_s` varies between
/// otherwise identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config: Value,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<PathBuf>,
    /// File names inside the output directory.
    pub outputs: Vec<String>,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn resolved(&self) -> Result<Resolved> {
        if self.artifact_version != env!("CARGO_PKG_VERSION") {
            return Err(Error::Configuration(format!(
                "manifest written by version {}, this is {}",
                self.artifact_version,
                env!("CARGO_PKG_VERSION")
            )));
        }
        let tagged = serde_json::json!({ "command": self.command, "config": self.config });
        Ok(serde_json::from_value(tagged)?)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut name = path.file_name().ok_or_else(|| Error::Configuration(format!("not a file path: {}", path.display())))?.to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    match write(&tmp) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes_atomic(path, text.as_bytes())
}

/// Streams into a buffered writer, then renames.
pub fn write_with_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut w = BufWriter::new(fs::File::create(tmp)?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    })
}
