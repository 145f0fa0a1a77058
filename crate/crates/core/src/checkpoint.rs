//! Versioned binary checkpoints: magic bytes, a little-endian `u32`
//! format version, then a CBOR body.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{AmqError, Result};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"AMQCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            ciborium::into_writer(self, &mut w).map_err(|e| AmqError::Format(e.to_string()))?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AmqError::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(AmqError::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        ciborium::from_reader(r).map_err(|e| AmqError::Format(e.to_string()))
    }
}
