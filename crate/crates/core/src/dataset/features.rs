use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{write_file, Error, Result};

const MAGIC: &[u8; 4] = b"VQGF";
const VERSION: u32 = 1;

/// Image id → raw feature vector of uniform width. Synthetic images are
/// stored flattened in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    width: usize,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            entries: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, image_id: u64, features: Vec<f64>) -> Result<()> {
        if features.len() != self.width {
            return Err(Error::Format(format!(
                "image {image_id}: feature width {} does not match store width {}",
                features.len(),
                self.width
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("image {image_id}: non-finite feature at index {i}")));
        }
        self.entries.insert(image_id, features);
        Ok(())
    }

    pub fn get(&self, image_id: u64) -> Result<&[f64]> {
        self.entries
            .get(&image_id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingImage(image_id))
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.entries.contains_key(&image_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (8 + 8 * self.width));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format(format!("{}: {reason}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a feature store (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        let record = 8 + 8 * width;
        if bytes.len() != 16 + count * record {
            return Err(bad(&format!(
                "expected {} bytes for {count} records of width {width}, found {}",
                16 + count * record,
                bytes.len()
            )));
        }
        let mut store = Self::new(width);
        for chunk in bytes[16..].chunks_exact(record) {
            let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            let v = chunk[8..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if store.contains(id) {
                return Err(bad(&format!("duplicate image id {id}")));
            }
            store.insert(id, v).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let mut s = FeatureStore::new(3);
        s.insert(7, vec![1.0, -2.5, 1e-300]).unwrap();
        s.insert(2, vec![0.0, 0.1, 3.0]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"VQGF");
        assert_eq!(bytes.len(), 16 + 2 * 32);
        assert_eq!(FeatureStore::from_bytes(&bytes, Path::new("f")).unwrap(), s);
    }

    #[test]
    fn rejects_width_mismatch_and_truncation() {
        let mut s = FeatureStore::new(2);
        assert!(s.insert(1, vec![1.0]).is_err());
        s.insert(1, vec![1.0, 2.0]).unwrap();
        let bytes = s.to_bytes();
        assert!(FeatureStore::from_bytes(&bytes[..bytes.len() - 1], Path::new("f")).is_err());
        assert!(FeatureStore::from_bytes(b"NOPE", Path::new("f")).is_err());
        assert!(matches!(s.get(9), Err(Error::MissingImage(9))));
    }
}
