//! Subprocess bridge to the `tabpfn` Python package.
//!
//! Each (fit, test-row set) pair runs the bridge script once; results are
//! cached for the lifetime of the session and calls are serialized.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Deserialize;

use super::{Backend, Capabilities, FitHandle, ModelDescriptor};
use crate::digest;
use crate::error::{Error, Result};
use crate::synthgen::{Split, TabularDataset};
use crate::toymodel::TokenRole;

pub const TABPFN_PACKAGE: &str = "tabpfn";

const SCRIPT: &str = include_str!("tabpfn_bridge.py");

static CALLS: AtomicU64 = AtomicU64::new(0);

fn python() -> String {
    std::env::var("TABPROBE_PYTHON").unwrap_or_else(|_| "python3".to_string())
}

/// True when the package imports in the configured interpreter. Weights may
/// still be missing; that surfaces on the first fit.
pub fn tabpfn_available() -> bool {
    Command::new(python())
        .args(["-c", "import tabpfn"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

#[derive(Debug, Deserialize)]
struct Meta {
    error: Option<String>,
    detail: Option<String>,
    #[serde(default)]
    n_layers: usize,
    #[serde(default)]
    n_test: usize,
    #[serde(default)]
    n_tokens: usize,
    #[serde(default)]
    embed_dim: usize,
    #[serde(default)]
    prediction: Vec<f64>,
    #[serde(default)]
    decoded: Vec<Vec<f64>>,
    #[serde(default)]
    version: String,
}

pub(crate) struct BridgeOutput {
    pub prediction: Vec<f64>,
    /// Per layer, expectation of the decoded distribution, raw units.
    pub decoded: Vec<Vec<f64>>,
    /// Per layer, `(n_test, n_tokens, embed_dim)` row-major.
    pub states: Vec<Vec<f32>>,
    pub n_tokens: usize,
    pub embed_dim: usize,
    version: String,
}

pub(crate) struct Session {
    device: String,
    descriptor: ModelDescriptor,
    cache: Mutex<HashMap<(String, Vec<usize>), Arc<BridgeOutput>>>,
}

fn unavailable(detail: &str) -> Error {
    Error::BackendUnavailable(format!(
        "the `{TABPFN_PACKAGE}` Python package (with TabPFN v2 weights) is required: {detail}"
    ))
}

fn run_bridge(device: &str, x_train: Vec<Vec<f64>>, y_train: Vec<f64>, x_test: Vec<Vec<f64>>) -> Result<BridgeOutput> {
    let n = CALLS.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("tabprobe-bridge-{}-{n}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result = run_in(&dir, device, x_train, y_train, x_test);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn run_in(dir: &Path, device: &str, x_train: Vec<Vec<f64>>, y_train: Vec<f64>, x_test: Vec<Vec<f64>>) -> Result<BridgeOutput> {
    let script = dir.join("bridge.py");
    std::fs::write(&script, SCRIPT).map_err(|e| Error::io(&script, e))?;
    let request = dir.join("request.json");
    let body = serde_json::json!({
        "x_train": x_train, "y_train": y_train, "x_test": x_test, "device": device, "seed": 0,
    });
    std::fs::write(&request, serde_json::to_vec(&body)?).map_err(|e| Error::io(&request, e))?;
    let out = Command::new(python())
        .arg(&script)
        .arg(&request)
        .arg(dir)
        .output()
        .map_err(|e| unavailable(&format!("cannot start {}: {e}", python())))?;
    let meta_path = dir.join("meta.json");
    let meta: Meta = match std::fs::read(&meta_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().join(" | ");
            return Err(unavailable(&format!("bridge failed: {tail}")));
        }
    };
    if let Some(e) = meta.error {
        return Err(unavailable(&format!("{e}: {}", meta.detail.unwrap_or_default())));
    }
    let states_path = dir.join("states.f32");
    let raw = std::fs::read(&states_path).map_err(|e| Error::io(&states_path, e))?;
    let per_layer = meta.n_test * meta.n_tokens * meta.embed_dim;
    if raw.len() != 4 * per_layer * (meta.n_layers + 1) {
        return Err(Error::Corruption { path: states_path, detail: "bridge state size mismatch".into() });
    }
    let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let states = floats.chunks(per_layer.max(1)).take(meta.n_layers + 1).map(<[f32]>::to_vec).collect();
    Ok(BridgeOutput {
        prediction: meta.prediction,
        decoded: meta.decoded,
        states,
        n_tokens: meta.n_tokens,
        embed_dim: meta.embed_dim,
        version: meta.version,
    })
}

fn rows(ds: &TabularDataset, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| ds.row(i).to_vec()).collect()
}

impl Session {
    /// Runs one tiny fit to check the backend and read its dimensions.
    pub fn open(device: &str) -> Result<Self> {
        if !tabpfn_available() {
            return Err(unavailable(&format!("`import {TABPFN_PACKAGE}` failed in {}", python())));
        }
        let x: Vec<Vec<f64>> = (0..24).map(|i| vec![i as f64 / 24.0, ((i * 7) % 24) as f64 / 24.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] - 2.0 * r[1]).collect();
        let probe = run_bridge(device, x[..20].to_vec(), y[..20].to_vec(), x[20..].to_vec())?;
        let version = probe.version.clone();
        let descriptor = ModelDescriptor {
            backend: Backend::TabpfnV2,
            checkpoint_ref: format!("{TABPFN_PACKAGE}=={version}"),
            layer_count: probe.states.len() - 1,
            embed_dim: probe.embed_dim,
            capabilities: Capabilities { has_unembedding_head: true, supports_regression: true },
            model_digest: digest::short_sha(format!("{TABPFN_PACKAGE}-v2-{version}").as_bytes()),
        };
        Ok(Self { device: device.to_string(), descriptor, cache: Mutex::new(HashMap::new()) })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn run(&self, handle: &FitHandle, test_rows: &[usize]) -> Result<Arc<BridgeOutput>> {
        let key = (handle.context_digest.clone(), test_rows.to_vec());
        let mut cache = self.cache.lock().expect("bridge cache poisoned");
        if let Some(out) = cache.get(&key) {
            return Ok(Arc::clone(out));
        }
        let ds = handle.dataset();
        let train = ds.rows_in(Split::Train);
        let out = Arc::new(run_bridge(
            &self.device,
            rows(ds, &train),
            train.iter().map(|&i| ds.z[i]).collect(),
            rows(ds, test_rows),
        )?);
        cache.insert(key, Arc::clone(&out));
        Ok(out)
    }

    /// Post-preprocessing token layout for a dataset; the last token carries
    /// the label.
    pub fn token_roles(&self, dataset: &TabularDataset) -> Result<Vec<TokenRole>> {
        let train = dataset.rows_in(Split::Train);
        let test = dataset.rows_in(Split::Test);
        let probe = run_bridge(
            &self.device,
            rows(dataset, &train),
            train.iter().map(|&i| dataset.z[i]).collect(),
            rows(dataset, &test[..test.len().min(1)]),
        )?;
        Ok((0..probe.n_tokens)
            .map(|t| if t + 1 == probe.n_tokens { TokenRole::Label } else { TokenRole::Feature })
            .collect())
    }
}
