//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "CSDN" | version u32 | total_len u64 (whole file, bytes)
//! config_len u32 | config text (UTF-8, canonical)
//! param_count u32
//! per parameter: name_len u32 | name | rank u32 | dims u64 * rank | values f64 * prod(dims)
//! ```

use std::path::Path;

use super::config::RunConfig;
use crate::error::{CheckpointError, CsdnError, Result};
use crate::head::CsdnHead;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"CSDN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// One parameter record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A fully parsed checkpoint, not yet bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config_text: String,
    pub params: Vec<ParamRecord>,
}

pub fn encode(config_text: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + config_text.len() + 8 * store.num_scalars() + 64 * store.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes()); // patched below
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let total = out.len() as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| CheckpointError::Config(format!("{what} is not valid UTF-8")))
    }
}

/// Parses a checkpoint image. Either everything is returned or nothing is.
pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let total = r.u64("total length")?;
    if total < bytes.len() as u64 {
        return Err(CheckpointError::TrailingBytes(bytes.len() - total as usize));
    }
    if total > bytes.len() as u64 {
        return Err(CheckpointError::Truncated(format!(
            "header declares {total} bytes, file has {}",
            bytes.len()
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = r.string(config_len, "config text")?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.string(name_len, "parameter name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::ShapeMismatch {
                name: name.clone(),
                reason: format!("shape {shape:?} overflows"),
            })?;
        let raw = r.take(len, &format!("values of parameter {i} ({name})"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(ParamRecord { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(RawCheckpoint { config_text, params })
}

pub fn save(path: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(&config.to_text(), store))?;
    Ok(())
}

/// Rebuilds the head described by the embedded config and fills it with the
/// stored values. Every record must match the rebuilt parameter list by
/// name, order and shape.
pub fn restore(raw: &RawCheckpoint) -> Result<(RunConfig, CsdnHead, ParamStore)> {
    let config = RunConfig::from_text(&raw.config_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let (head, mut store) = CsdnHead::new(&config.head, config.run.seed)?;
    if raw.params.len() != store.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: "<all>".into(),
            reason: format!(
                "{} records but the config implies {} parameters",
                raw.params.len(),
                store.len()
            ),
        }
        .into());
    }
    for (p, rec) in store.params_mut().iter_mut().zip(&raw.params) {
        if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
            return Err(CsdnError::Checkpoint(CheckpointError::ShapeMismatch {
                name: rec.name.clone(),
                reason: format!("stored {:?}, expected {} {:?}", rec.shape, p.name, p.value.shape()),
            }));
        }
        p.value = Tensor::new(rec.shape.clone(), rec.values.clone())?;
    }
    Ok((config, head, store))
}

pub fn load(path: &Path) -> Result<(RunConfig, CsdnHead, ParamStore)> {
    let bytes = std::fs::read(path)?;
    restore(&decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a",
            Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap(),
        );
        s.add("b.bias", Tensor::new(vec![1], vec![0.1]).unwrap());
        s
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let s = tiny_store();
        let raw = decode(&encode("x = 1\n", &s)).unwrap();
        assert_eq!(raw.config_text, "x = 1\n");
        assert_eq!(raw.params.len(), 2);
        for (p, r) in s.iter().zip(&raw.params) {
            assert_eq!(p.name, r.name);
            assert_eq!(p.value.shape(), r.shape.as_slice());
            let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = r.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn layout_of_the_header() {
        let bytes = encode("", &ParamStore::new());
        assert_eq!(&bytes[..4], b"CSDN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), bytes.len() as u64);
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 4);
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = encode("k = 2\n", &tiny_store());
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let mut bytes = encode("", &tiny_store());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            decode(&bad),
            Err(CheckpointError::Version {
                found: 9,
                expected: VERSION
            })
        );
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(CheckpointError::TrailingBytes(1)));
    }

    #[test]
    fn consistent_length_but_missing_record_is_truncation() {
        // header length patched to match a file whose last record was cut
        let mut bytes = encode("", &tiny_store());
        bytes.truncate(bytes.len() - 8);
        let n = bytes.len() as u64;
        bytes[8..16].copy_from_slice(&n.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::Truncated(_))));
    }
}
