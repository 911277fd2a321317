//! Checkpoint container.
//!
//! ```text
//! "ABTC1"                      5 bytes
//! u32 config_len               config text, `key=value\n` lines
//! u32 param_count
//! per parameter:
//!   u32 name_len, name (UTF-8)
//!   u32 rank, rank x u64 extents
//!   prod(extents) x f64        row-major
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{self, put_f64s, put_u32, put_u64, Cursor};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Rng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ABTC1";

pub fn write_checkpoint(params: &ModelParams, w: &mut dyn Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let config: String = params
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u32(w, config.len() as u32)?;
    w.write_all(config.as_bytes())?;
    put_u32(w, params.store.len() as u32)?;
    for (_, p) in params.store.iter() {
        put_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.shape().len() as u32)?;
        for &e in p.value.shape() {
            put_u64(w, e as u64)?;
        }
        put_f64s(w, p.value.data())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut dyn Read) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let buf = fsutil::read_all(r)?;
    let mut c = Cursor::new(&buf, "checkpoint header");
    if c.bytes(5)? != CHECKPOINT_MAGIC {
        return Err(c.err("bad magic, not a checkpoint"));
    }
    let n = c.u32()? as usize;
    let text = std::str::from_utf8(c.bytes(n)?).map_err(|_| c.err("config is not UTF-8"))?;
    let mut config = ModelConfig::default();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("checkpoint config line {}", i + 1), "expected key=value"))?;
        config.set(k.trim(), v)?;
    }
    let count = c.u32()? as usize;
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        c.set_location(format!("checkpoint parameter {i}"));
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.bytes(len)?)
            .map_err(|_| c.err("name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let data = c.f64s(shape.iter().product())?;
        values.push((name, Tensor::new(shape, data)?));
    }
    if c.remaining() != 0 {
        return Err(c.err("trailing bytes after last parameter"));
    }
    Ok((config, values))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, |w| write_checkpoint(params, w))
}

/// Rebuilds the parameter layout from the stored config, then fills values.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let (config, values) = read_checkpoint(&mut fs::File::open(path)?)?;
    let mut params = ModelParams::init(&config, &mut Rng::new(0))?;
    params.store.load_values(values)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { num_layers: 1, hidden: 8, num_heads: 2, ff_width: 16, vocab_size: 12, ..Default::default() }
    }

    #[test]
    fn round_trip_preserves_every_value() {
        let params = ModelParams::init(&tiny(), &mut Rng::new(5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        assert_eq!(&buf[..5], CHECKPOINT_MAGIC);
        let (config, values) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(config, params.config);
        let mut restored = ModelParams::init(&config, &mut Rng::new(99)).unwrap();
        restored.store.load_values(values).unwrap();
        for ((_, a), (_, b)) in params.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let params = ModelParams::init(&tiny(), &mut Rng::new(5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Parse { .. })));
    }
}
