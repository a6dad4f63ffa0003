//! The `MMEB` embedding container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MMEB" | version u16 | task_id u8 | split_name (u16 len + UTF-8)
//! num_classes u16 | class names (u16 len + UTF-8 each)
//! D_I u32 | D_T u32 | n u64
//! n × { id (u16 len + UTF-8) | label u32 | f_i f32[D_I] | f_t f32[D_T] }
//! CRC32 of every preceding byte (u32)
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::{DatasetSplit, EmbeddingRecord, SplitName, SplitSummary};
use crate::error::{Error, FormatError, Result};
use crate::fsutil::{check_crc_trailer, put_str16, write_atomic, Cursor};

pub const MAGIC: [u8; 4] = *b"MMEB";
pub const VERSION: u16 = 1;

pub fn encode_split(split: &DatasetSplit) -> Result<Vec<u8>> {
    split.validate()?;
    let num_classes = u16::try_from(split.num_classes)
        .map_err(|_| Error::InvalidConfig(format!("{} classes exceed u16", split.num_classes)))?;
    let (di, dt) = (split.dim_image, split.dim_text);
    let dims = (u32::try_from(di), u32::try_from(dt));
    let (Ok(di32), Ok(dt32)) = dims else {
        return Err(Error::InvalidConfig("embedding width exceeds u32".into()));
    };

    let per_record = 2 + 16 + 4 + 4 * (di + dt);
    let mut out = Vec::with_capacity(64 + split.records.len() * per_record);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(split.task_id);
    put_str16(&mut out, split.split_name.as_str())?;
    out.extend_from_slice(&num_classes.to_le_bytes());
    for name in &split.class_names {
        put_str16(&mut out, name)?;
    }
    out.extend_from_slice(&di32.to_le_bytes());
    out.extend_from_slice(&dt32.to_le_bytes());
    out.extend_from_slice(&(split.records.len() as u64).to_le_bytes());
    for r in &split.records {
        put_str16(&mut out, &r.id)?;
        out.extend_from_slice(&(r.label as u32).to_le_bytes());
        for &v in r.f_i.iter().chain(&r.f_t) {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(FormatError::NonFinite { id: r.id.clone() }.into());
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    task_id: u8,
    split_name: SplitName,
    num_classes: u16,
    class_names: Vec<String>,
    dim_image: usize,
    dim_text: usize,
    n: u64,
}

fn parse_header(cur: &mut Cursor<'_>) -> Result<Header, FormatError> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let task_id = cur.u8()?;
    if task_id > 3 {
        return Err(FormatError::Malformed(format!("task id {task_id} not in 0..=3")));
    }
    let name = cur.str16()?;
    let split_name = name
        .parse::<SplitName>()
        .map_err(|_| FormatError::Malformed(format!("unknown split name `{name}`")))?;
    let num_classes = cur.u16()?;
    if num_classes == 0 {
        return Err(FormatError::Malformed("zero classes".into()));
    }
    let class_names = (0..num_classes).map(|_| cur.str16()).collect::<Result<Vec<_>, _>>()?;
    let dim_image = cur.u32()? as usize;
    let dim_text = cur.u32()? as usize;
    if dim_image == 0 || dim_text == 0 {
        return Err(FormatError::Malformed("zero embedding width".into()));
    }
    let n = cur.u64()?;
    Ok(Header {
        task_id,
        split_name,
        num_classes,
        class_names,
        dim_image,
        dim_text,
        n,
    })
}

fn read_f32s(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<f64>, FormatError> {
    Ok(cur
        .take(4 * n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Decodes a full `MMEB` image.
///
/// Checks run in order: magic, version, structure (truncation), trailing
/// bytes, CRC, then record semantics (labels, finiteness, unique ids).
pub fn decode_split(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut cur = Cursor::new(bytes);
    let header = parse_header(&mut cur)?;
    let min_record = 2 + 4 + 4 * (header.dim_image + header.dim_text);
    let cap = (header.n as usize).min(cur.remaining() / min_record);
    let mut records = Vec::with_capacity(cap);
    for _ in 0..header.n {
        let id = cur.str16()?;
        let label = cur.u32()?;
        let f_i = read_f32s(&mut cur, header.dim_image)?;
        let f_t = read_f32s(&mut cur, header.dim_text)?;
        records.push((
            label,
            EmbeddingRecord {
                id,
                f_i,
                f_t,
                label: label as usize,
            },
        ));
    }
    check_crc_trailer(bytes, cur.pos())?;

    let mut ids = HashSet::with_capacity(records.len());
    for (label, r) in &records {
        if *label >= header.num_classes as u32 {
            return Err(FormatError::LabelOutOfRange {
                id: r.id.clone(),
                label: *label,
                num_classes: header.num_classes,
            }
            .into());
        }
        if !r.f_i.iter().chain(&r.f_t).all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite { id: r.id.clone() }.into());
        }
        if r.id.is_empty() || !ids.insert(r.id.clone()) {
            return Err(FormatError::Malformed(format!("empty or duplicate record id `{}`", r.id)).into());
        }
    }
    Ok(DatasetSplit {
        records: records.into_iter().map(|(_, r)| r).collect(),
        num_classes: header.num_classes as usize,
        class_names: header.class_names,
        task_id: header.task_id,
        split_name: header.split_name,
        dim_image: header.dim_image,
        dim_text: header.dim_text,
    })
}

pub fn write_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let bytes = encode_split(split)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    decode_split(&std::fs::read(path)?)
}

/// Reads only the header of an `MMEB` file: enough for split bookkeeping
/// without loading embeddings. The CRC is not verified.
pub fn read_split_header(path: &Path) -> Result<SplitSummary> {
    use std::io::Read;
    let mut buf = Vec::new();
    let f = std::fs::File::open(path)?;
    // Header is at most a few KiB unless class names are pathological.
    f.take(1 << 20).read_to_end(&mut buf)?;
    let header = parse_header(&mut Cursor::new(&buf))?;
    Ok(SplitSummary {
        task_id: header.task_id,
        split_name: header.split_name,
        n: header.n,
    })
}
