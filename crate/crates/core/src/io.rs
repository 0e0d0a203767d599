//! Binary checkpoints and atomic file writes.
//!
//! Layout: magic `WIDCKPT1`, format version (u32 LE), header length (u64 LE),
//! a UTF-8 header with one `name|dtype|d0,d1,..|offset|length` line per
//! tensor, then the payload of row-major little-endian f32 data. Offsets are
//! relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WIDCKPT1";
pub const VERSION: u32 = 1;

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['|', '\n']) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let len = 4 * t.len();
        header.push_str(&format!("{name}|f32|{}|{offset}|{len}\n", dims.join(",")));
        offset += len;
    }
    let mut out = Vec::with_capacity(20 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header = std::str::from_utf8(&bytes[20..hend]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[hend..];

    let mut out = BTreeMap::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        let fields: Vec<&str> = line.split('|').collect();
        let [name, dtype, dims, offset, length] = fields[..] else {
            return Err(bad(format!("malformed header line {line:?}")));
        };
        if dtype != "f32" {
            return Err(bad(format!("unknown dtype `{dtype}` for {name}")));
        }
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad dims for {name}")))?
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
        let length: usize = length.parse().map_err(|_| bad(format!("bad length for {name}")))?;
        let count: usize = shape.iter().product();
        if offset != expected_offset {
            return Err(bad(format!("{name} overlaps or leaves a gap (offset {offset})")));
        }
        if length != 4 * count {
            return Err(bad(format!("{name}: length {length} does not match its shape")));
        }
        let end = offset + length;
        if end > payload.len() {
            return Err(bad(format!("{name} extends past the payload")));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.insert(name.to_string(), Tensor::new(&shape, data)?).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("payload has trailing bytes"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(tensors)?)
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode_checkpoint(&bytes)
}
