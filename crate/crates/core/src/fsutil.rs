use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Little-endian reader that reports truncation with offsets.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], crate::FormatError> {
        if self.remaining() < n {
            return Err(crate::FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, crate::FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, crate::FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, crate::FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, crate::FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// UTF-8 string prefixed by a u16 byte length.
    pub fn str16(&mut self) -> Result<String, crate::FormatError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| crate::FormatError::Malformed(format!("invalid UTF-8 at offset {}", self.pos - len)))
    }
}

/// Splits `bytes` into body and trailing CRC32 after the body has been parsed
/// up to `body_end`, checking that exactly four bytes remain and match.
pub(crate) fn check_crc_trailer(bytes: &[u8], body_end: usize) -> Result<u32, crate::FormatError> {
    let rest = bytes.len() - body_end;
    if rest < 4 {
        return Err(crate::FormatError::Truncated {
            offset: body_end,
            needed: 4,
            available: rest,
        });
    }
    if rest > 4 {
        return Err(crate::FormatError::TrailingBytes(rest - 4));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(crate::FormatError::Checksum { stored, computed });
    }
    Ok(stored)
}

pub(crate) fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), crate::Error> {
    let len = u16::try_from(s.len())
        .map_err(|_| crate::Error::InvalidConfig(format!("string of {} bytes exceeds u16 length prefix", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}
