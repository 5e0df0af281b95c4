//! On-disk feature cache: one binary matrix per clip, keyed by sample and
//! extraction fingerprint.

use std::io;
use std::path::{Path, PathBuf};

use fcac_core::features::FeatureMap;
use fcac_core::protocol::SampleRef;
use sha2::{Digest, Sha256};

use crate::artifacts::write_atomic;

/// Overrides the cache root.
pub const CACHE_ENV: &str = "FCAC_CACHE_DIR";

const MAGIC: &[u8; 4] = b"FCFB";
const HEADER: usize = 4 + 3 * 8;

#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$FCAC_CACHE_DIR` when set, `default` otherwise.
    pub fn from_env(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(dir),
            _ => Self::new(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, sample: &SampleRef, fingerprint: u64) -> PathBuf {
        let mut h = Sha256::new();
        h.update(sample.0.as_bytes());
        h.update(fingerprint.to_le_bytes());
        let name = hex::encode(&h.finalize()[..16]);
        self.dir.join(format!("{name}.fbank"))
    }

    /// Returns `None` on a miss or on a file that does not match the key.
    pub fn load(&self, sample: &SampleRef, fingerprint: u64) -> io::Result<Option<FeatureMap>> {
        let bytes = match std::fs::read(self.path_for(sample, fingerprint)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        Ok(decode(&bytes).filter(|m| m.fingerprint == fingerprint))
    }

    pub fn store(&self, sample: &SampleRef, map: &FeatureMap) -> io::Result<PathBuf> {
        let path = self.path_for(sample, map.fingerprint);
        write_atomic(&path, &encode(map))?;
        Ok(path)
    }
}

fn encode(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + map.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.frames as u64).to_le_bytes());
    out.extend_from_slice(&(map.bins as u64).to_le_bytes());
    out.extend_from_slice(&map.fingerprint.to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<FeatureMap> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return None;
    }
    let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
    let (frames, bins, fingerprint) = (word(0) as usize, word(1) as usize, word(2));
    let body = &bytes[HEADER..];
    if body.len() != frames.checked_mul(bins)?.checked_mul(8)? {
        return None;
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some(FeatureMap::new(frames, bins, values, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let map = FeatureMap::new(2, 3, vec![0.1, -2.5, f64::MIN_POSITIVE, 3.0, 1e300, -0.0], 77);
        let s = SampleRef::from("clips/a.wav");
        assert_eq!(cache.load(&s, 77).unwrap(), None);
        cache.store(&s, &map).unwrap();
        let back = cache.load(&s, 77).unwrap().unwrap();
        assert_eq!(back, map);
        assert!(back.values.iter().zip(&map.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(cache.load(&s, 78).unwrap(), None);
    }

    #[test]
    fn corrupt_files_are_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let s = SampleRef::from("x");
        std::fs::write(cache.path_for(&s, 1), b"FCFBshort").unwrap();
        assert_eq!(cache.load(&s, 1).unwrap(), None);
    }
}
