//! Named-segment weight files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "MZTOYCK\0"
//! version      u32      1
//! config       context_length, num_layers, hidden_dim, num_heads, kv_heads, num_mlps: u64
//!              expansion_factor: f64, vocab_size, batch_size: u64,
//!              bytes_per_param, stored_layers: f64
//! segments     u64 count, then per segment:
//!              name_len: u32, name: UTF-8, count: u64, count × f64
//! ```

use crate::memory::ModelConfig;
use crate::zo::{LayoutError, ParameterVector, Segment};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"MZTOYCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("segment name is not UTF-8")]
    Name,
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &ModelConfig, params: &ParameterVector) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.context_length, cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.kv_heads, cfg.num_mlps] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&cfg.expansion_factor.to_le_bytes())?;
    w.write_all(&(cfg.vocab_size as u64).to_le_bytes())?;
    w.write_all(&(cfg.batch_size as u64).to_le_bytes())?;
    w.write_all(&cfg.bytes_per_param.to_le_bytes())?;
    w.write_all(&cfg.stored_layers.to_le_bytes())?;
    w.write_all(&(params.segments().len() as u64).to_le_bytes())?;
    for s in params.segments() {
        w.write_all(&(s.name.len() as u32).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.len as u64).to_le_bytes())?;
        for v in &params.values()[s.offset..s.offset + s.len] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_array::<8, _>(r).map(u64::from_le_bytes)
}

fn read_usize<R: Read>(r: &mut R) -> io::Result<usize> {
    read_u64(r).map(|v| v as usize)
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    read_array::<8, _>(r).map(f64::from_le_bytes)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ParameterVector), CheckpointError> {
    if read_array::<8, _>(&mut r)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(read_array::<4, _>(&mut r)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let cfg = ModelConfig {
        context_length: read_usize(&mut r)?,
        num_layers: read_usize(&mut r)?,
        hidden_dim: read_usize(&mut r)?,
        num_heads: read_usize(&mut r)?,
        kv_heads: read_usize(&mut r)?,
        num_mlps: read_usize(&mut r)?,
        expansion_factor: read_f64(&mut r)?,
        vocab_size: read_usize(&mut r)?,
        batch_size: read_usize(&mut r)?,
        bytes_per_param: read_f64(&mut r)?,
        stored_layers: read_f64(&mut r)?,
    };
    let count = read_usize(&mut r)?;
    let mut values = Vec::new();
    let mut segments = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array::<4, _>(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let len = read_usize(&mut r)?;
        let offset = values.len();
        for _ in 0..len {
            values.push(read_f64(&mut r)?);
        }
        segments.push(Segment { name, offset, len });
    }
    Ok((cfg, ParameterVector::from_parts(values, segments)?))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ParameterVector) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), cfg, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterVector), CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
