//! Binary index file.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SGRAGIDX" | version u32 | d_e u32 | count u64
//! per entry: id_len u32 | id bytes | d_e × f32 | payload_len u32 | payload bytes
//! crc32 u32 over every preceding byte
//! ```
//!
//! The payload is the chunk record as one JSON object.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Index, IndexError};
use crate::chunks::KnowledgeChunk;

pub const MAGIC: &[u8; 8] = b"SGRAGIDX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

pub fn encode_index(index: &Index) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for entry in index.entries() {
        buf.extend_from_slice(&(entry.chunk_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(entry.chunk_id.as_bytes());
        for v in &entry.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let payload = serde_json::to_vec(&entry.payload).expect("chunk serializes");
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&payload);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                IndexError::Truncated(format!("need {n} bytes for {what} at offset {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes an index file. Check order: minimum length, magic, checksum,
/// version, then entry structure.
pub fn decode_index(bytes: &[u8]) -> Result<Index, IndexError> {
    if bytes.len() < MAGIC.len() {
        return Err(IndexError::Truncated(format!(
            "{} bytes is shorter than the magic",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(IndexError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(IndexError::Truncated(format!(
            "{} bytes is shorter than header and checksum",
            bytes.len()
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IndexError::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim = r.u32("dimension")? as usize;
    let count = r.u64("entry count")?;
    let mut index = Index::new(dim);
    for i in 0..count as usize {
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|e| IndexError::Payload {
                entry: i,
                message: format!("id is not UTF-8: {e}"),
            })?
            .to_string();
        let raw = r.take(dim * 4, "vector")?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let payload_len = r.u32("payload length")? as usize;
        let payload: KnowledgeChunk = serde_json::from_slice(r.take(payload_len, "payload")?)
            .map_err(|e| IndexError::Payload {
                entry: i,
                message: e.to_string(),
            })?;
        if payload.chunk_id != id {
            return Err(IndexError::Payload {
                entry: i,
                message: format!("payload id `{}` != entry id `{id}`", payload.chunk_id),
            });
        }
        index.insert_stored(id, vector, payload)?;
    }
    if r.pos != body.len() {
        return Err(IndexError::Payload {
            entry: count as usize,
            message: format!("{} unexpected trailing bytes", body.len() - r.pos),
        });
    }
    Ok(index)
}

/// Writes the index atomically (temporary file, then rename).
pub fn save_index(index: &Index, path: &Path) -> Result<(), IndexError> {
    let bytes = encode_index(index);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<Index, IndexError> {
    decode_index(&fs::read(path)?)
}
