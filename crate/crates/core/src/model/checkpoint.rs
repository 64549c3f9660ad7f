//! Binary checkpoint format.
//!
//! ```text
//! bytes 0..8    magic "CSCOPE\0\1"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..16  length N of the config document, u32 little-endian
//! next N bytes  ModelConfig as JSON
//! remainder     every parameter as f64 little-endian, blocks in
//!               `ModelParams::blocks` order, row-major within a block
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ModelConfig, ModelParams, Transformer};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CSCOPE\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(model: &Transformer<S>, mut w: W) -> Result<()> {
    let config = serde_json::to_vec(&model.config)?;
    let mut buf = Vec::with_capacity(16 + config.len() + 8 * model.params.len());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    for block in model.params.blocks() {
        for &x in block {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Transformer<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let config_end = 16 + len;
    if bytes.len() < config_end {
        return Err(bad("truncated config"));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[16..config_end])?;
    config.validate()?;
    let mut params = ModelParams::<S>::zeros(&config);
    let body = &bytes[config_end..];
    if body.len() != 8 * params.len() {
        return Err(bad("parameter section size does not match config"));
    }
    let mut chunks = body.chunks_exact(8);
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            let v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            if !v.is_finite() {
                return Err(bad("non-finite parameter"));
            }
            *x = S::lit(v);
        }
    }
    Transformer::new(config, params)
}

pub fn save_checkpoint<S: Scalar>(model: &Transformer<S>, path: &Path) -> Result<()> {
    write_checkpoint(model, fs::File::create(path)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Transformer<S>> {
    read_checkpoint(fs::File::open(path)?)
}
