//! Parameter snapshots: a JSON manifest of `(name, shape, byte offset)` plus a
//! flat payload of little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    manifest: Manifest,
    payload: Vec<u8>,
}

fn ckpt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_tensors<'a, S: AsRef<str> + 'a>(
        named: impl IntoIterator<Item = (S, &'a Tensor)>,
    ) -> Self {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in named {
            entries.push(ManifestEntry {
                name: name.as_ref().to_owned(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Self {
            manifest: Manifest {
                payload_bytes: payload.len(),
                entries,
            },
            payload,
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes")
    }

    pub fn from_parts(manifest_json: &str, payload: Vec<u8>) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(manifest_json)
            .map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
        if manifest.payload_bytes != payload.len() {
            return Err(ckpt_err(format!(
                "payload has {} bytes, manifest expects {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        for e in &manifest.entries {
            let bytes = e.shape.iter().product::<usize>() * 8;
            if e.offset % 8 != 0 || e.offset + bytes > payload.len() {
                return Err(ckpt_err(format!(
                    "entry {} lies outside the payload",
                    e.name
                )));
            }
        }
        Ok(Self { manifest, payload })
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let e = self.manifest.entries.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        let data = self.payload[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(e.shape.clone(), data).ok()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.manifest
            .entries
            .iter()
            .filter_map(|e| self.get(&e.name).map(|t| (e.name.clone(), t)))
            .collect()
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        let s = stem.as_os_str().to_owned();
        let mut manifest = s.clone();
        manifest.push(".manifest.json");
        let mut payload = s;
        payload.push(".bin");
        (manifest.into(), payload.into())
    }

    /// Writes `<stem>.manifest.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (m, p) = Self::paths(stem);
        fs::write(&m, self.manifest_json())
            .map_err(|e| ckpt_err(format!("{}: {e}", m.display())))?;
        fs::write(&p, &self.payload).map_err(|e| ckpt_err(format!("{}: {e}", p.display())))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (m, p) = Self::paths(stem);
        let manifest =
            fs::read_to_string(&m).map_err(|e| ckpt_err(format!("{}: {e}", m.display())))?;
        let payload = fs::read(&p).map_err(|e| ckpt_err(format!("{}: {e}", p.display())))?;
        Self::from_parts(&manifest, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let a = Tensor::new(vec![split], values[..split].to_vec()).unwrap();
            let b = Tensor::new(vec![values.len() - split, 1], values[split..].to_vec()).unwrap();
            let ck = Checkpoint::from_tensors([("a", &a), ("b", &b)]);
            let back = Checkpoint::from_parts(&ck.manifest_json(), ck.payload().to_vec()).unwrap();
            let ra = back.get("a").unwrap();
            let rb = back.get("b").unwrap();
            prop_assert_eq!(ra.shape(), a.shape());
            prop_assert_eq!(rb.shape(), b.shape());
            for (x, y) in ra.data().iter().chain(rb.data()).zip(a.data().iter().chain(b.data())) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn offsets_are_byte_positions() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let ck = Checkpoint::from_tensors([("w", &a), ("b", &b)]);
        assert_eq!(ck.entries()[1].offset, 48);
        assert_eq!(ck.payload().len(), 80);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Tensor::zeros(&[3]);
        let ck = Checkpoint::from_tensors([("w", &a)]);
        assert!(Checkpoint::from_parts(&ck.manifest_json(), vec![0; 16]).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2], vec![1.25, -3.5]).unwrap();
        let ck = Checkpoint::from_tensors([("x", &a)]);
        let stem = dir.path().join("net");
        ck.save(&stem).unwrap();
        assert_eq!(Checkpoint::load(&stem).unwrap(), ck);
    }
}
