//! Versioned single-file container for model weights and training state.
//!
//! ```text
//! magic (4 bytes) | version (u32 LE) | header length (u64 LE) | JSON header | blobs
//! ```
//!
//! The JSON header carries arbitrary metadata plus a `blobs` table listing
//! each blob's name, element count and SHA-256 of its bytes. Blobs are raw
//! little-endian `f32` arrays stored back to back in table order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;
pub const VIVA_MAGIC: &[u8; 4] = b"VIVA";
pub const BINCLASS_MAGIC: &[u8; 4] = b"VBCL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    len: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn blob(&self, name: &str) -> Result<&[f32]> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.data.as_slice())
            .ok_or_else(|| Error::invalid(format!("checkpoint has no blob {name:?}")))
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("checkpoint header lacks {key:?}")))?;
        Ok(serde_json::from_value(v)?)
    }
}

fn blob_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_container(magic: &[u8; 4], header: &serde_json::Value, blobs: &[Blob]) -> Result<Vec<u8>> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::invalid("checkpoint header must be a JSON object"))?;
    let mut payload = Vec::new();
    let mut table = Vec::with_capacity(blobs.len());
    for b in blobs {
        let bytes = blob_bytes(&b.data);
        table.push(BlobEntry {
            name: b.name.clone(),
            len: b.data.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    obj.insert("blobs".into(), serde_json::to_value(table)?);
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8], magic: &[u8; 4]) -> Result<Container> {
    let truncated = |expected: usize| Error::Truncated {
        file: "checkpoint".into(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    if &bytes[..4] != magic {
        return Err(Error::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated(16 + header_len))?;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])?;
    let table: Vec<BlobEntry> = serde_json::from_value(
        header
            .as_object_mut()
            .and_then(|o| o.remove("blobs"))
            .ok_or_else(|| Error::invalid("checkpoint header has no blob table"))?,
    )?;

    let mut offset = header_end;
    let mut blobs = Vec::with_capacity(table.len());
    for entry in table {
        let end = offset + entry.len * 4;
        if end > bytes.len() {
            return Err(truncated(end));
        }
        let raw = &bytes[offset..end];
        if hex::encode(Sha256::digest(raw)) != entry.sha256 {
            return Err(Error::Checksum {
                file: format!("checkpoint blob {}", entry.name),
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push(Blob {
            name: entry.name,
            data,
        });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::invalid("trailing bytes after checkpoint blobs"));
    }
    Ok(Container { header, blobs })
}

pub fn write_container(path: &Path, magic: &[u8; 4], header: &serde_json::Value, blobs: &[Blob]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode_container(magic, header, blobs)?)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8; 4]) -> Result<Container> {
    decode_container(&fs::read(path)?, magic)
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::invalid("malformed RNG state in checkpoint");
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> (serde_json::Value, Vec<Blob>) {
        (
            serde_json::json!({"step": 3, "note": "x"}),
            vec![
                Blob { name: "a".into(), data: vec![1.0, -2.5, 3.25] },
                Blob { name: "b".into(), data: vec![0.5; 10] },
            ],
        )
    }

    #[test]
    fn round_trip() {
        let (h, b) = sample();
        let bytes = encode_container(VIVA_MAGIC, &h, &b).unwrap();
        let c = decode_container(&bytes, VIVA_MAGIC).unwrap();
        assert_eq!(c.header, h);
        assert_eq!(c.blobs, b);
        assert_eq!(c.field::<u64>("step").unwrap(), 3);
        assert_eq!(c.blob("b").unwrap().len(), 10);
    }

    #[test]
    fn rejects_tampering_version_and_magic() {
        let (h, b) = sample();
        let bytes = encode_container(VIVA_MAGIC, &h, &b).unwrap();
        let mut tampered = bytes.clone();
        let last = tampered.len() - 3;
        tampered[last] ^= 0x40;
        assert!(matches!(decode_container(&tampered, VIVA_MAGIC), Err(Error::Checksum { .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(decode_container(&wrong_version, VIVA_MAGIC), Err(Error::Version { found: 9, .. })));

        assert!(matches!(decode_container(&bytes, BINCLASS_MAGIC), Err(Error::Magic { .. })));
        assert!(matches!(decode_container(&bytes[..bytes.len() - 4], VIVA_MAGIC), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..5).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }
}
