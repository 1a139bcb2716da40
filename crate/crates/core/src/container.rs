//! Binary containers for cached attribution maps, persisted datasets and
//! model checkpoints.
//!
//! Cache container: magic `XAICACHE`, format-version u32, header-length u32,
//! JSON header, row-major little-endian f32 payload, trailing 8-byte payload
//! checksum. Checkpoint container: magic `IMPXCKPT`, same framing, no
//! trailing checksum (the header carries a parameter digest instead). All
//! header/length integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::checksum8;

pub const CACHE_MAGIC: &[u8; 8] = b"XAICACHE";
pub const CKPT_MAGIC: &[u8; 8] = b"IMPXCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Write bytes to a temp file in the target directory, then rename into
/// place. Readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile_path(dir, path);
    let mut n = 0u32;
    // Pick an unused temp name; collisions only under concurrent writers.
    while tmp.exists() {
        n += 1;
        tmp = dir.join(format!(
            ".{}.tmp{}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            n
        ));
    }
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tempfile_path(dir: &Path, path: &Path) -> std::path::PathBuf {
    dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy()
    ))
}

fn encode(magic: &[u8; 8], header: &serde_json::Value, payload: &[f32], checksum: bool) -> Vec<u8> {
    let header_bytes = serde_json::to_vec(header).expect("header serialization");
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len() * 4 + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    let payload_start = out.len();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if checksum {
        let sum = checksum8(&out[payload_start..]);
        out.extend_from_slice(&sum);
    }
    out
}

fn decode(
    bytes: &[u8],
    magic: &[u8; 8],
    checksum: bool,
) -> Result<(serde_json::Value, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Format("container truncated before header".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + hlen;
    if bytes.len() < header_end {
        return Err(Error::Format("container truncated inside header".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("bad container header: {e}")))?;
    let tail = if checksum { 8 } else { 0 };
    if bytes.len() < header_end + tail {
        return Err(Error::Format("container truncated inside payload".into()));
    }
    let payload_bytes = &bytes[header_end..bytes.len() - tail];
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::Format("payload length not a multiple of 4".into()));
    }
    if checksum {
        let stored: [u8; 8] = bytes[bytes.len() - 8..].try_into().unwrap();
        if checksum8(payload_bytes) != stored {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_cache_file(path: &Path, header: &serde_json::Value, payload: &[f32]) -> Result<()> {
    atomic_write(path, &encode(CACHE_MAGIC, header, payload, true))
}

pub fn read_cache_file(path: &Path) -> Result<(serde_json::Value, Vec<f32>)> {
    decode(&fs::read(path)?, CACHE_MAGIC, true)
}

pub fn write_checkpoint_file(
    path: &Path,
    header: &serde_json::Value,
    payload: &[f32],
) -> Result<()> {
    atomic_write(path, &encode(CKPT_MAGIC, header, payload, false))
}

pub fn read_checkpoint_file(path: &Path) -> Result<(serde_json::Value, Vec<f32>)> {
    decode(&fs::read(path)?, CKPT_MAGIC, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xai");
        let header = serde_json::json!({"kind": "test", "shape": [2, 2]});
        let payload = vec![1.0f32, -2.5, 0.0, 3.25];
        write_cache_file(&path, &header, &payload).unwrap();
        let (h, p) = read_cache_file(&path).unwrap();
        assert_eq!(h["kind"], "test");
        assert_eq!(p, payload);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xai");
        write_cache_file(&path, &serde_json::json!({}), &[1.0, 2.0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let idx = bytes.len() - 12; // inside the payload
        bytes[idx] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match read_cache_file(&path) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write_cache_file(&path, &serde_json::json!({}), &[1.0]).unwrap();
        match read_checkpoint_file(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
