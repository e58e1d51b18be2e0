//! Shared binary container framing for on-disk artifacts.
//!
//! Layout: 4 magic bytes, u32 LE version, u32 LE header length N, N bytes of
//! UTF-8 `key=value` lines, then a raw little-endian payload. Checkpoints
//! (`RPAC`), datasets (`RPDS`), and adversarial batches (`RPAB`) all use this
//! framing, so files are bit-exact across platforms.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const VERSION: u32 = 1;

/// Ordered header lines. Keys may repeat (tensor manifests rely on order).
#[derive(Debug, Clone, Default)]
pub struct Header {
    lines: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'));
        debug_assert!(!value.contains('\n'));
        self.lines.push((key.to_string(), value));
    }

    /// First value for `key`, if any.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// First value for `key`, or a format error naming the key.
    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing header key `{key}`")))
    }

    /// All values recorded for `key`, in order.
    pub fn all(&self, key: &str) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn lines(&self) -> &[(String, String)] {
        &self.lines
    }

    fn encode(&self) -> Vec<u8> {
        let mut s = String::new();
        for (k, v) in &self.lines {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
        let mut lines = Vec::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
            lines.push((k.to_string(), v.to_string()));
        }
        Ok(Header { lines })
    }
}

pub fn write_container(path: &Path, magic: &[u8; 4], header: &Header, payload: &[u8]) -> Result<()> {
    let head = header.encode();
    let mut buf = Vec::with_capacity(12 + head.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    buf.extend_from_slice(payload);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8; 4]) -> Result<(Header, Vec<u8>)> {
    let buf = fs::read(path)?;
    if buf.len() < 12 {
        return Err(Error::Format(format!(
            "file truncated: {} bytes, need at least 12",
            buf.len()
        )));
    }
    if &buf[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, got {:?}",
            std::str::from_utf8(magic).unwrap_or("?"),
            String::from_utf8_lossy(&buf[0..4])
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + hlen {
        return Err(Error::Format("file truncated inside header".into()));
    }
    let header = Header::decode(&buf[12..12 + hlen])?;
    Ok((header, buf[12 + hlen..].to_vec()))
}

/// Encodes a f64 slice as little-endian f32 bytes (the stored precision).
pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes little-endian f32 bytes into f64 values.
pub fn f32_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("f32 payload length not divisible by 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_preserves_order_and_duplicates() {
        let mut h = Header::new();
        h.push("a", "1");
        h.push("tensor", "x:2,3:f32");
        h.push("tensor", "y:4:f32");
        let decoded = Header::decode(&h.encode()).unwrap();
        assert_eq!(decoded.get("a"), Some("1"));
        assert_eq!(decoded.all("tensor"), vec!["x:2,3:f32", "y:4:f32"]);
    }

    #[test]
    fn f32_payload_roundtrip_is_exact_at_stored_precision() {
        let vals = vec![0.1, -3.75, 1.0 / 3.0, 1e-20];
        let decoded = f32_values(&f32_bytes(&vals)).unwrap();
        for (orig, got) in vals.iter().zip(&decoded) {
            assert_eq!(*orig as f32, *got as f32);
            assert_eq!(*got, *got as f32 as f64);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut h = Header::new();
        h.push("k", "v");
        write_container(&path, b"RPAC", &h, &[1, 2, 3, 4]).unwrap();
        let err = read_container(&path, b"RPDS").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, b"RPAC\x01").unwrap();
        assert!(read_container(&path, b"RPAC").is_err());
    }
}
