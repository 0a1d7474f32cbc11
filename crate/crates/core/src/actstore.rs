//! On-disk activation store.
//!
//! Layout under the store root:
//!
//! ```text
//! {run_id}/manifest.json
//! {run_id}/{fit_digest}/L{layer:02}_{tokensel}.f32   raw little-endian f32
//! {run_id}/{fit_digest}/L{layer:02}_{tokensel}.json  sidecar with shape, roles, checksum
//! ```
//!
//! Keys are the path of a record relative to the root without extension.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64_hex;
use crate::error::{Error, Result};
use crate::synthgen::Split;
use crate::toymodel::TokenRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelection {
    All,
    AnswerOnly,
}

impl TokenSelection {
    pub fn key_part(self) -> &'static str {
        match self {
            TokenSelection::All => "all",
            TokenSelection::AnswerOnly => "answer",
        }
    }
}

/// One layer's hidden states for a set of rows, shape `(n, t, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub run_id: String,
    pub fit_digest: String,
    pub layer: usize,
    pub token_selection: TokenSelection,
    pub token_roles: Vec<TokenRole>,
    pub row_roles: Vec<Split>,
    /// Dataset row index of each of the `n` rows.
    pub source_rows: Vec<usize>,
    pub shape: (usize, usize, usize),
    #[serde(skip)]
    pub values: Vec<f32>,
}

impl ActivationRecord {
    pub fn validate(&self) -> Result<()> {
        let (n, t, k) = self.shape;
        if self.values.len() != n * t * k {
            return Err(Error::Build(format!(
                "record has {} values for shape ({n}, {t}, {k})",
                self.values.len()
            )));
        }
        if self.token_roles.len() != t || self.row_roles.len() != n || self.source_rows.len() != n {
            return Err(Error::Build("record role lists disagree with its shape".into()));
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        record_key(&self.run_id, &self.fit_digest, self.layer, self.token_selection)
    }

    /// Row-major `(t, k)` slice for row `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        let (_, t, k) = self.shape;
        &self.values[i * t * k..(i + 1) * t * k]
    }

    pub fn token(&self, i: usize, tok: usize) -> &[f32] {
        let (_, t, k) = self.shape;
        let start = (i * t + tok) * k;
        &self.values[start..start + k]
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn record_key(run_id: &str, fit_digest: &str, layer: usize, sel: TokenSelection) -> String {
    format!("{run_id}/{fit_digest}/L{layer:02}_{}", sel.key_part())
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    record: ActivationRecord,
    payload_bytes: usize,
    checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub run_id: String,
    pub model: String,
    pub dataset_digests: Vec<String>,
    pub keys: Vec<String>,
    pub created_unix: u64,
    pub tool_version: String,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Handle on one run's records. A single writer per run directory.
pub struct ActStore {
    root: PathBuf,
    manifest: StoreManifest,
}

impl ActStore {
    /// Opens the run for writing, creating it (and its manifest) if absent.
    pub fn open(root: &Path, run_id: &str, model: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run id {run_id:?}")));
        }
        let path = root.join(run_id).join("manifest.json");
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            StoreManifest {
                run_id: run_id.to_string(),
                model: model.to_string(),
                dataset_digests: Vec::new(),
                keys: Vec::new(),
                created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            }
        };
        let store = Self { root: root.to_path_buf(), manifest };
        store.write_manifest()?;
        Ok(store)
    }

    /// Read-only access to an existing run.
    pub fn open_existing(root: &Path, run_id: &str) -> Result<Self> {
        let path = root.join(run_id).join("manifest.json");
        if !path.exists() {
            return Err(Error::NotFound(format!("no activation store for run {run_id:?}")));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { root: root.to_path_buf(), manifest: serde_json::from_str(&text)? })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join(&self.manifest.run_id)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.run_dir().join("manifest.json");
        atomic_write(&path, serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    pub fn record_dataset(&mut self, digest: &str) -> Result<()> {
        let mut set: BTreeSet<String> = self.manifest.dataset_digests.drain(..).collect();
        set.insert(digest.to_string());
        self.manifest.dataset_digests = set.into_iter().collect();
        self.write_manifest()
    }

    pub fn put(&mut self, record: &ActivationRecord) -> Result<String> {
        record.validate()?;
        if record.run_id != self.manifest.run_id {
            return Err(Error::Config(format!(
                "record belongs to run {:?}, store is {:?}",
                record.run_id, self.manifest.run_id
            )));
        }
        let key = record.key();
        let payload = record.payload();
        let sidecar = Sidecar {
            record: record.clone(),
            payload_bytes: payload.len(),
            checksum: fnv1a64_hex(&payload),
        };
        atomic_write(&self.root.join(format!("{key}.f32")), &payload)?;
        atomic_write(&self.root.join(format!("{key}.json")), serde_json::to_string(&sidecar)?.as_bytes())?;
        if let Err(pos) = self.manifest.keys.binary_search(&key) {
            self.manifest.keys.insert(pos, key.clone());
            self.write_manifest()?;
        }
        Ok(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.manifest.keys.binary_search_by(|k| k.as_str().cmp(key)).is_ok()
    }

    pub fn get(&self, key: &str) -> Result<ActivationRecord> {
        get_record(&self.root, key)
    }

    /// Keys of this run starting with `prefix` (relative to the run), in
    /// lexicographic order.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        let full = format!("{}/{prefix}", self.manifest.run_id);
        self.manifest.keys.iter().filter(|k| k.starts_with(&full)).cloned().collect()
    }
}

/// Reads and verifies one record.
pub fn get_record(root: &Path, key: &str) -> Result<ActivationRecord> {
    let side_path = root.join(format!("{key}.json"));
    let data_path = root.join(format!("{key}.f32"));
    if !side_path.exists() || !data_path.exists() {
        return Err(Error::NotFound(format!("activation record {key:?}")));
    }
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let payload = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if payload.len() != sidecar.payload_bytes {
        return Err(Error::Corruption {
            path: data_path,
            detail: format!("expected {} bytes, found {}", sidecar.payload_bytes, payload.len()),
        });
    }
    let checksum = fnv1a64_hex(&payload);
    if checksum != sidecar.checksum {
        return Err(Error::Corruption {
            path: data_path,
            detail: format!("checksum {checksum} does not match recorded {}", sidecar.checksum),
        });
    }
    let mut record = sidecar.record;
    record.values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(run: &str, fit: &str, layer: usize, shape: (usize, usize, usize), seed: u32) -> ActivationRecord {
        let (n, t, k) = shape;
        let values = (0..n * t * k)
            .map(|i| f32::from_bits((i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed) & 0x7f7f_ffff))
            .collect();
        ActivationRecord {
            run_id: run.into(),
            fit_digest: fit.into(),
            layer,
            token_selection: TokenSelection::All,
            token_roles: (0..t).map(|i| if i + 1 == t { TokenRole::Label } else { TokenRole::Feature }).collect(),
            row_roles: vec![Split::Test; n],
            source_rows: (0..n).collect(),
            shape,
            values,
        }
    }

    #[test]
    fn roundtrip_large_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ActStore::open(dir.path(), "r1", "toy").unwrap();
        let rec = record("r1", "abcd", 5, (100, 4, 64), 1);
        let key = store.put(&rec).unwrap();
        assert_eq!(key, "r1/abcd/L05_all");
        let back = store.get(&key).unwrap();
        let bits = |r: &ActivationRecord| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rec));
        assert_eq!(back, rec);
    }

    #[test]
    fn missing_key_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = ActStore::open(dir.path(), "r1", "toy").unwrap();
        assert!(matches!(store.get("r1/none/L00_all"), Err(Error::NotFound(_))));
    }

    #[test]
    fn manifest_lists_put_keys_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ActStore::open(dir.path(), "run", "toy").unwrap();
        for (fit, layer) in [("ff", 3), ("aa", 10), ("aa", 2), ("ff", 0)] {
            store.put(&record("run", fit, layer, (2, 2, 2), 0)).unwrap();
        }
        let expected = vec!["run/aa/L02_all", "run/aa/L10_all", "run/ff/L00_all", "run/ff/L03_all"];
        assert_eq!(store.list(""), expected);
        assert_eq!(store.list("aa/"), &expected[..2]);
        let reopened = ActStore::open_existing(dir.path(), "run").unwrap();
        assert_eq!(reopened.manifest().keys, expected);
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ActStore::open(dir.path(), "r", "toy").unwrap();
        let key = store.put(&record("r", "f", 1, (3, 2, 5), 9)).unwrap();
        let path = dir.path().join(format!("{key}.f32"));
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get(&key), Err(Error::Corruption { .. })));
    }

    #[test]
    fn foreign_run_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ActStore::open(dir.path(), "a", "toy").unwrap();
        assert!(store.put(&record("b", "f", 0, (1, 1, 1), 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_any_shape(n in 1usize..6, t in 1usize..5, k in 1usize..9, seed in any::<u32>(), flip in any::<prop::sample::Index>()) {
            let dir = tempfile::tempdir().unwrap();
            let mut store = ActStore::open(dir.path(), "p", "toy").unwrap();
            let rec = record("p", "d", 0, (n, t, k), seed);
            let key = store.put(&rec).unwrap();
            prop_assert_eq!(&store.get(&key).unwrap(), &rec);
            let path = dir.path().join(format!("{key}.f32"));
            let mut bytes = fs::read(&path).unwrap();
            let i = flip.index(bytes.len());
            bytes[i] ^= 0x80;
            fs::write(&path, bytes).unwrap();
            let corrupt = matches!(store.get(&key), Err(Error::Corruption { .. }));
            prop_assert!(corrupt);
        }
    }
}
