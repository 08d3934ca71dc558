//! Content-addressed, immutable blob storage. A blob's name is the sha256 of
//! its bytes; storing the same bytes twice keeps one copy. Each digest carries
//! the set of federations allowed to read it.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::RwLock;

use fedsilo_core::api::BlobDigest;
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};
use crate::store::{write_atomic, Store};

const ACL_KIND: &str = "blob_acl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct BlobStore {
    store: Store,
    dir: PathBuf,
    acl: RwLock<HashMap<String, BTreeSet<String>>>,
    write_lock: std::sync::Mutex<()>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AclDoc {
    digest: String,
    federations: BTreeSet<String>,
}

impl BlobStore {
    pub fn open(store: Store) -> ApiResult<Self> {
        let acl = store
            .list::<AclDoc>(ACL_KIND)?
            .into_iter()
            .map(|d| (d.digest, d.federations))
            .collect();
        Ok(Self {
            dir: store.blob_dir(),
            store,
            acl: RwLock::new(acl),
            write_lock: std::sync::Mutex::new(()),
        })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(&digest[..2]).join(digest)
    }

    /// Stores `bytes` (once) and grants `federation_id` read access.
    pub fn put(&self, federation_id: &str, bytes: &[u8]) -> ApiResult<BlobDigest> {
        let digest = sha256_hex(bytes);
        let path = self.path(&digest);
        let _guard = self.write_lock.lock().unwrap();
        if !path.exists() {
            let dir = path.parent().expect("blob path has a parent");
            fs::create_dir_all(dir).map_err(ApiError::internal)?;
            write_atomic(&path, bytes)?;
        }
        let mut acl = self.acl.write().unwrap();
        let feds = acl.entry(digest.clone()).or_default();
        if feds.insert(federation_id.to_string()) {
            self.store.put(
                ACL_KIND,
                &digest,
                &AclDoc {
                    digest: digest.clone(),
                    federations: feds.clone(),
                },
            )?;
        }
        Ok(BlobDigest {
            sha256: digest,
            size_bytes: bytes.len() as u64,
        })
    }

    /// Whether any of `federations` may read `digest`.
    pub fn readable_by<'a>(&self, digest: &str, mut federations: impl Iterator<Item = &'a str>) -> bool {
        let acl = self.acl.read().unwrap();
        acl.get(digest)
            .is_some_and(|feds| federations.any(|f| feds.contains(f)))
    }

    pub fn exists(&self, digest: &str) -> bool {
        self.acl.read().unwrap().contains_key(digest)
    }

    /// Reads and re-verifies a blob. Access control is the caller's job.
    pub fn get(&self, digest: &str) -> ApiResult<Vec<u8>> {
        if !BlobDigest::is_well_formed(digest) || !self.exists(digest) {
            return Err(ApiError::NoSuchBlob(digest.to_string()));
        }
        let bytes = match fs::read(self.path(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ApiError::NoSuchBlob(digest.to_string()))
            }
            Err(e) => return Err(ApiError::internal(e)),
        };
        if sha256_hex(&bytes) != digest {
            return Err(ApiError::DigestMismatch(digest.to_string()));
        }
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open() -> (tempfile::TempDir, BlobStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        (dir, BlobStore::open(store).unwrap())
    }

    #[test]
    fn put_get_round_trip_and_dedup() {
        let (dir, blobs) = open();
        let a = blobs.put("f1", b"hello").unwrap();
        let b = blobs.put("f1", b"hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size_bytes, 5);
        assert_eq!(blobs.get(&a.sha256).unwrap(), b"hello");
        let files = walk(dir.path().join("blobs"));
        assert_eq!(files, 1);
    }

    fn walk(p: PathBuf) -> usize {
        fs::read_dir(p)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(p)
                } else {
                    1
                }
            })
            .sum()
    }

    #[test]
    fn unknown_and_corrupt_blobs() {
        let (dir, blobs) = open();
        let zero = "0".repeat(64);
        assert!(matches!(blobs.get(&zero), Err(ApiError::NoSuchBlob(_))));
        assert!(matches!(blobs.get("../../etc/passwd"), Err(ApiError::NoSuchBlob(_))));
        let d = blobs.put("f", b"payload").unwrap();
        let path = dir.path().join("blobs").join(&d.sha256[..2]).join(&d.sha256);
        fs::write(path, b"tampered").unwrap();
        assert!(matches!(blobs.get(&d.sha256), Err(ApiError::DigestMismatch(_))));
    }

    #[test]
    fn acl_follows_federation() {
        let (dir, blobs) = open();
        let d = blobs.put("a", b"x").unwrap();
        assert!(blobs.readable_by(&d.sha256, ["a"].into_iter()));
        assert!(!blobs.readable_by(&d.sha256, ["b"].into_iter()));
        blobs.put("b", b"x").unwrap();
        let reopened = BlobStore::open(Store::open(dir.path()).unwrap()).unwrap();
        assert!(reopened.readable_by(&d.sha256, ["b"].into_iter()));
    }
}
