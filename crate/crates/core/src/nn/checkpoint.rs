//! `TFNN` checkpoint format.
//!
//! ```text
//! magic        4 bytes  "TFNN"
//! version      u16      1
//! input_side   u32
//! layer_count  u32
//! per layer:   kind u8 (0 = conv, 1 = dense), rank u8, rank x u32 weight dims,
//!              u32 bias length
//! param_count  u64
//! params       param_count x f32, layer order, weights then biases
//! ```
//! All integers and floats are little-endian. Conv weight dims are
//! `[3, 3, in, out]`; dense dims are `[in, out]`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, LayerKind, Model};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFNN";
pub const VERSION: u16 = 1;

pub fn write_model(model: &Model, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(model.arch().input_side as u32).to_le_bytes())?;
    out.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for spec in model.layers() {
        let dims: Vec<u32> = match spec.kind {
            LayerKind::Conv => vec![3, 3, spec.in_channels as u32, spec.out_channels as u32],
            LayerKind::Dense => vec![spec.fan_in() as u32, spec.out_channels as u32],
        };
        let kind = match spec.kind {
            LayerKind::Conv => 0u8,
            LayerKind::Dense => 1u8,
        };
        out.write_all(&[kind, dims.len() as u8])?;
        for d in dims {
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&(spec.out_channels as u32).to_le_bytes())?;
    }
    out.write_all(&(model.params().len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.params().len() * 4);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    write_model(model, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    read_model(&bytes).map_err(|e| match e {
        Error::Parse { offset, reason, .. } => Error::Parse {
            path: path.to_path_buf(),
            offset,
            reason,
        },
        other => other,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn err(&self, reason: &str) -> Error {
        Error::Parse {
            path: "<checkpoint>".into(),
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected TFNN"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(c.err(&format!("unsupported version {version}")));
    }
    let input_side = c.u32()? as usize;
    let layer_count = c.u32()? as usize;
    if layer_count < 2 {
        return Err(c.err("need at least one conv and one dense layer"));
    }
    let mut conv_channels = Vec::new();
    let mut classes = 0;
    for i in 0..layer_count {
        let kind = c.u8()?;
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let bias_len = c.u32()? as usize;
        match (kind, rank) {
            (0, 4) if i + 1 < layer_count => {
                if dims[0] != 3 || dims[1] != 3 || bias_len != dims[3] {
                    return Err(c.err("malformed conv layer record"));
                }
                conv_channels.push(dims[3]);
            }
            (1, 2) if i + 1 == layer_count => {
                if bias_len != dims[1] {
                    return Err(c.err("malformed dense layer record"));
                }
                classes = dims[1];
            }
            _ => return Err(c.err("unexpected layer record")),
        }
    }
    let arch = Architecture {
        input_side,
        conv_channels,
        classes,
    };
    arch.validate().map_err(|e| c.err(&e.to_string()))?;
    let count = c.u64()? as usize;
    if count != arch.param_count() {
        return Err(c.err("parameter count disagrees with layer table"));
    }
    let raw = c.take(count * 4)?;
    let params = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after parameters"));
    }
    Model::from_params(arch, params)
}

/// Reads a checkpoint from any reader (used by the CLI for stdin-like inputs).
pub fn read_from(mut input: impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    read_model(&bytes)
}
