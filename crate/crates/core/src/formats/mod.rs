//! On-disk artifacts: binary checkpoints and feature files, and the flat
//! key=value configuration.

mod checkpoint;
mod config;
mod features;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Config, CONFIG_KEYS};
pub use features::{FeatureFile, FEATURE_MAGIC, FEATURE_VERSION};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes through a sibling temporary file so readers never observe a
/// partially written artifact.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
