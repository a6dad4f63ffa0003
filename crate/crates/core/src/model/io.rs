//! `FUSN` model files.
//!
//! ```text
//! "FUSN" | version u16 | header (u32 len + UTF-8 JSON {spec, seed})
//! param count u32
//! per param: name (u16 len + UTF-8) | rank u8 | extents u32 × rank | f64 LE × numel
//! CRC32 of every preceding byte (u32)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, FormatError, Result};
use crate::fsutil::{check_crc_trailer, put_str16, write_atomic, Cursor};
use crate::fusion::VariantSpec;

pub const MAGIC: [u8; 4] = *b"FUSN";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: VariantSpec,
    seed: u64,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        seed: model.seed(),
    })?;
    let params = model.named_params();
    let mut out = Vec::with_capacity(64 + header.len() + model.param_count() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        put_str16(&mut out, name)?;
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic.to_vec(),
        }
        .into());
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let header_len = cur.u32()? as usize;
    let header_bytes = cur.take(header_len)?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = cur.str16()?;
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| FormatError::Malformed(format!("parameter `{name}` is too large")))?,
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, shape, data));
    }
    check_crc_trailer(bytes, cur.pos())?;

    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| FormatError::Malformed(format!("model header: {e}")))?;
    let mut model = Model::init(header.spec, header.seed)?;
    let mut slots = model.named_params_mut();
    if slots.len() != params.len() {
        return Err(FormatError::Malformed(format!(
            "variant needs {} parameters, file holds {}",
            slots.len(),
            params.len()
        ))
        .into());
    }
    for ((want_name, slot), (name, shape, data)) in slots.iter_mut().zip(params) {
        if *want_name != name || slot.shape() != shape.as_slice() {
            return Err(FormatError::Malformed(format!(
                "expected parameter `{want_name}` {:?}, found `{name}` {shape:?}",
                slot.shape()
            ))
            .into());
        }
        slot.data_mut().copy_from_slice(&data);
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    write_atomic(path, &bytes).map_err(Error::from)
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
