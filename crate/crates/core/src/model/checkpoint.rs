//! `CTFM` model checkpoints.
//!
//! ```text
//! "CTFM"  version:u16
//! embed:u32 hidden:u32 packet:u32 flow:u32 head_hidden:u32 classes:u32 gnn_layers:u32
//! every parameter group in declaration order: rows*cols f32, row-major
//! crc32:u32
//! ```
//!
//! Values are stored as 32-bit floats; loading widens them back to `f64`.

use std::path::Path;

use super::{ModelDims, ModelError, ModelParams};
use crate::format::{FormatError, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTFM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    let d = params.dims();
    for v in [d.embed, d.hidden, d.packet, d.flow, d.head_hidden, d.classes, d.gnn_layers] {
        w.u32(v as u32);
    }
    for t in params.tensors() {
        for &v in t.iter() {
            w.f32(v as f32);
        }
    }
    w.finish()
}

pub fn checkpoint_from_bytes(data: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader::open(data, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
    let mut field = || r.u32().map(|v| v as usize);
    let dims = ModelDims {
        embed: field()?,
        hidden: field()?,
        packet: field()?,
        flow: field()?,
        head_hidden: field()?,
        classes: field()?,
        gnn_layers: field()?,
    };
    dims.validate()
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let mut params = ModelParams::zeros(dims)?;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f32()? as f64;
        }
    }
    r.finish()?;
    if !params.is_finite() {
        return Err(FormatError::Invalid("non-finite parameter".into()).into());
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, checkpoint_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, crate::Error> {
    let data = std::fs::read(path).map_err(|source| crate::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(checkpoint_from_bytes(&data)?)
}
