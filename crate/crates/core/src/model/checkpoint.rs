//! Binary checkpoints: magic, format version, JSON-encoded config, parameter
//! count, then every parameter as a little-endian f32 in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TEKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(state: &ModelState, mut w: W) -> std::io::Result<()> {
    let config = serde_json::to_vec(state.config()).map_err(std::io::Error::other)?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(state.num_params() as u64).to_le_bytes())?;
    for &v in state.params() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState> {
    if read_exact::<_, 8>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config)
        .map_err(|e| Error::Checkpoint(format!("truncated config: {e}")))?;
    let config: EncoderConfig = serde_json::from_slice(&config)?;
    let n = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() != 4 * n {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * n,
            bytes.len()
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ModelState::from_parts(config, params)
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(state, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
