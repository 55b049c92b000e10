//! Binary container shared by checkpoints and embedding files:
//! magic, u32 version, u64 header length, JSON header, f32 LE payload,
//! then a SHA-256 digest of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;
const PREAMBLE: usize = 4 + 4 + 8;

pub fn encode(magic: &[u8; 4], version: u32, header: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() * 4 + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Splits a container into its JSON header bytes and payload.
pub fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &str) -> Result<(&'a [u8], Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Corrupt(format!("{what}: file truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Incompatible(format!(
            "{what}: magic {:?} is not {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < PREAMBLE + DIGEST_LEN {
        return Err(Error::Corrupt(format!("{what}: file truncated ({} bytes)", bytes.len())));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Incompatible(format!("{what}: version {found}, this reader handles {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt(format!("{what}: digest mismatch")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &body[PREAMBLE..];
    if hlen > rest.len() as u64 {
        return Err(Error::Corrupt(format!("{what}: header length {hlen} past end of file")));
    }
    let (header, payload) = rest.split_at(hlen as usize);
    if payload.len() % 4 != 0 {
        return Err(Error::Corrupt(format!("{what}: payload of {} bytes is not whole f32s", payload.len())));
    }
    let floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, floats))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_damage() {
        let bytes = encode(b"TEST", 1, br#"{"a":1}"#, &[1.5, -2.0]);
        let (h, p) = decode(&bytes, b"TEST", 1, "t").unwrap();
        assert_eq!(h, br#"{"a":1}"#);
        assert_eq!(p, vec![1.5, -2.0]);

        for i in 16..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(matches!(decode(&bad, b"TEST", 1, "t"), Err(Error::Corrupt(_))), "byte {i}");
        }
        for n in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..n], b"TEST", 1, "t"), Err(Error::Corrupt(_))), "len {n}");
        }
        assert!(matches!(decode(&bytes, b"TEST", 2, "t"), Err(Error::Incompatible(_))));
        assert!(matches!(decode(&bytes, b"NOPE", 1, "t"), Err(Error::Incompatible(_))));
    }
}
