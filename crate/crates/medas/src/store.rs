//! Content-addressed artifact store.
//!
//! Objects live at `objects/<first2>/<hash>` under the store root, next to a
//! one-line `<hash>.media` sidecar. Writes go to a unique temporary file
//! that is then renamed into place, so concurrent writers of identical
//! content converge on one object.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use medas_core::dataset::DatasetManifest;
use medas_core::image::Image;
use medas_core::table::Table;
use medas_core::tensor::{self, Tensor, TensorError};
use medas_core::{canonical_json, sha256_hex, ArtifactRef, MediaType};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{csvio, pngio};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("artifact {0} not found")]
    NotFound(String),
    #[error("artifact {0} failed its digest check")]
    CorruptionDetected(String),
    #[error("store is full: {needed} bytes needed, {available} available")]
    StorageFull { needed: u64, available: u64 },
    #[error("tensor header invalid: {0}")]
    HeaderInvalid(TensorError),
    #[error("artifact {hash} is {actual:?}, expected {expected:?}")]
    WrongMedia {
        hash: String,
        expected: MediaType,
        actual: MediaType,
    },
    #[error("artifact {0} could not be decoded: {1}")]
    Decode(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn media_name(m: MediaType) -> &'static str {
    match m {
        MediaType::MDTensor => "MDTensor",
        MediaType::PNG => "PNG",
        MediaType::CSV => "CSV",
        MediaType::JSON => "JSON",
    }
}

fn parse_media(s: &str) -> Option<MediaType> {
    Some(match s.trim() {
        "MDTensor" => MediaType::MDTensor,
        "PNG" => MediaType::PNG,
        "CSV" => MediaType::CSV,
        "JSON" => MediaType::JSON,
        _ => return None,
    })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("path has a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    capacity: Option<u64>,
    used: AtomicU64,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::with_capacity(root, None)
    }

    /// Opens a store that refuses writes once `capacity` bytes of objects
    /// are stored.
    pub fn with_capacity(root: impl Into<PathBuf>, capacity: Option<u64>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        let mut used = 0;
        if capacity.is_some() {
            for shard in fs::read_dir(root.join("objects"))? {
                for entry in fs::read_dir(shard?.path())? {
                    let entry = entry?;
                    if entry.path().extension().is_none() {
                        used += entry.metadata()?.len();
                    }
                }
            }
        }
        Ok(ArtifactStore {
            root,
            capacity,
            used: AtomicU64::new(used),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, hash: &str) -> PathBuf {
        let shard = hash.get(..2).unwrap_or("__");
        self.root.join("objects").join(shard).join(hash)
    }

    fn media_path(&self, hash: &str) -> PathBuf {
        self.object_path(hash).with_extension("media")
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.object_path(hash).is_file()
    }

    /// Stores bytes under their SHA-256. Idempotent.
    pub fn put(&self, bytes: &[u8], media: MediaType) -> Result<ArtifactRef, StoreError> {
        if media == MediaType::MDTensor {
            tensor::read_header(bytes).map_err(StoreError::HeaderInvalid)?;
        }
        let hash = sha256_hex(bytes);
        let reference = ArtifactRef {
            hash: hash.clone(),
            media,
            size_bytes: bytes.len() as u64,
        };
        let path = self.object_path(&hash);
        if path.is_file() {
            return Ok(reference);
        }
        if let Some(cap) = self.capacity {
            let used = self.used.load(Ordering::SeqCst);
            if used + bytes.len() as u64 > cap {
                return Err(StoreError::StorageFull {
                    needed: bytes.len() as u64,
                    available: cap.saturating_sub(used),
                });
            }
        }
        atomic_write(&self.media_path(&hash), media_name(media).as_bytes())?;
        atomic_write(&path, bytes)?;
        self.used.fetch_add(bytes.len() as u64, Ordering::SeqCst);
        Ok(reference)
    }

    /// Reads an object and verifies its digest.
    pub fn get_hash(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        let bytes = match fs::read(self.object_path(hash)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(hash.into())),
            Err(e) => return Err(e.into()),
        };
        if sha256_hex(&bytes) != hash {
            return Err(StoreError::CorruptionDetected(hash.into()));
        }
        Ok(bytes)
    }

    pub fn get(&self, r: &ArtifactRef) -> Result<Vec<u8>, StoreError> {
        self.get_hash(&r.hash)
    }

    /// Reference for a stored hash, recovering the media type from its
    /// sidecar (or by sniffing the bytes if the sidecar is missing).
    pub fn lookup(&self, hash: &str) -> Result<ArtifactRef, StoreError> {
        let path = self.object_path(hash);
        let meta = fs::metadata(&path).map_err(|_| StoreError::NotFound(hash.into()))?;
        let media = fs::read_to_string(self.media_path(hash))
            .ok()
            .and_then(|s| parse_media(&s))
            .unwrap_or_else(|| sniff(&fs::read(&path).unwrap_or_default()));
        Ok(ArtifactRef {
            hash: hash.into(),
            media,
            size_bytes: meta.len(),
        })
    }

    fn expect_media(&self, r: &ArtifactRef, expected: MediaType) -> Result<(), StoreError> {
        if r.media != expected {
            return Err(StoreError::WrongMedia {
                hash: r.hash.clone(),
                expected,
                actual: r.media,
            });
        }
        Ok(())
    }

    pub fn put_tensor(&self, t: &Tensor) -> Result<ArtifactRef, StoreError> {
        let bytes = tensor::encode(t).map_err(StoreError::HeaderInvalid)?;
        self.put(&bytes, MediaType::MDTensor)
    }

    pub fn get_tensor(&self, r: &ArtifactRef) -> Result<Tensor, StoreError> {
        self.expect_media(r, MediaType::MDTensor)?;
        tensor::decode(&self.get(r)?).map_err(StoreError::HeaderInvalid)
    }

    /// Decodes an MDTensor or PNG artifact into an image.
    pub fn get_image(&self, r: &ArtifactRef) -> Result<Image, StoreError> {
        match r.media {
            MediaType::PNG => pngio::decode(&self.get(r)?).map_err(|e| StoreError::Decode(r.hash.clone(), e)),
            _ => {
                Ok(Image::from_tensor(&self.get_tensor(r)?))
            }
        }
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<ArtifactRef, StoreError> {
        self.put(canonical_json(value).as_bytes(), MediaType::JSON)
    }

    pub fn get_json<T: DeserializeOwned>(&self, r: &ArtifactRef) -> Result<T, StoreError> {
        self.expect_media(r, MediaType::JSON)?;
        serde_json::from_slice(&self.get(r)?).map_err(|e| StoreError::Decode(r.hash.clone(), e.to_string()))
    }

    pub fn put_dataset(&self, ds: &DatasetManifest) -> Result<ArtifactRef, StoreError> {
        self.put_json(ds)
    }

    pub fn get_dataset(&self, r: &ArtifactRef) -> Result<DatasetManifest, StoreError> {
        self.get_json(r)
    }

    pub fn put_table(&self, t: &Table) -> Result<ArtifactRef, StoreError> {
        self.put(&csvio::write_table(t), MediaType::CSV)
    }

    pub fn get_table(&self, r: &ArtifactRef) -> Result<Table, StoreError> {
        self.expect_media(r, MediaType::CSV)?;
        csvio::read_table(&self.get(r)?).map_err(|e| StoreError::Decode(r.hash.clone(), e))
    }
}

/// Best-effort media detection from leading bytes.
pub fn sniff(bytes: &[u8]) -> MediaType {
    if bytes.starts_with(tensor::MAGIC) {
        MediaType::MDTensor
    } else if bytes.starts_with(b"\x89PNG") {
        MediaType::PNG
    } else if matches!(bytes.iter().find(|b| !b.is_ascii_whitespace()), Some(b'{') | Some(b'[')) {
        MediaType::JSON
    } else {
        MediaType::CSV
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_is_idempotent_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = ArtifactStore::open(dir.path()).unwrap();
        let a = s.put(b"epoch,loss\n", MediaType::CSV).unwrap();
        let b = s.put(b"epoch,loss\n", MediaType::CSV).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.get(&a).unwrap(), b"epoch,loss\n");
        assert_eq!(s.lookup(&a.hash).unwrap(), a);
        let objects: usize = fs::read_dir(s.object_path(&a.hash).parent().unwrap()).unwrap().count();
        assert_eq!(objects, 2);
    }

    #[test]
    fn empty_csv_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let s = ArtifactStore::open(dir.path()).unwrap();
        let r = s.put(b"", MediaType::CSV).unwrap();
        assert_eq!(r.size_bytes, 0);
        assert_eq!(r.hash, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = ArtifactStore::with_capacity(dir.path(), Some(8)).unwrap();
        assert!(matches!(s.get_hash("ab12"), Err(StoreError::NotFound(_))));
        let mut bad = b"MDT1".to_vec();
        bad.extend([2, 2, 2, 0, 0, 0, 2, 0, 0, 0]);
        bad.extend([0; 12]);
        assert!(matches!(s.put(&bad, MediaType::MDTensor), Err(StoreError::HeaderInvalid(_))));
        let r = s.put(b"1234", MediaType::CSV).unwrap();
        assert!(matches!(s.put(b"123456", MediaType::CSV), Err(StoreError::StorageFull { .. })));
        fs::write(s.object_path(&r.hash), b"4321").unwrap();
        assert!(matches!(s.get(&r), Err(StoreError::CorruptionDetected(_))));
    }

    #[test]
    fn sniffing() {
        assert_eq!(sniff(b"MDT1\x03"), MediaType::MDTensor);
        assert_eq!(sniff(b" {\"a\":1}"), MediaType::JSON);
        assert_eq!(sniff(b"a,b\n"), MediaType::CSV);
    }
}
