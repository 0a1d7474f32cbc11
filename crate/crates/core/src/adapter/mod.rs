//! One interface over the models we can probe: the built-in toy transformer
//! and an optional bridge to the `tabpfn` Python package.
//!
//! Layer indexing: 0 is the embedding output, `i` the output of block `i`.

mod tabpfn;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationRecord, TokenSelection};
use crate::digest::{self, Hasher};
use crate::error::{Error, Result};
use crate::synthgen::{ColumnRole, Split, TabularDataset};
use crate::toymodel::{load_checkpoint, OutputHead, TokenRole, ToyModel};

pub use tabpfn::{tabpfn_available, TABPFN_PACKAGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Toy,
    TabpfnV2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_unembedding_head: bool,
    pub supports_regression: bool,
}

/// Serializable description of a loaded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub backend: Backend,
    /// Checkpoint path for the toy backend, package version for tabpfn.
    pub checkpoint_ref: String,
    pub layer_count: usize,
    pub embed_dim: usize,
    pub capabilities: Capabilities,
    /// Digest of the weights (toy) or of the package identity (tabpfn).
    pub model_digest: String,
}

enum Inner {
    Toy(Arc<ToyModel>),
    Tabpfn(tabpfn::Session),
}

pub struct ProbeableModel {
    descriptor: ModelDescriptor,
    inner: Inner,
}

/// Which layers to capture.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSelection {
    #[default]
    All,
    Layers(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, layer_count: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((0..=layer_count).collect()),
            LayerSelection::Layers(ls) => {
                if let Some(bad) = ls.iter().find(|&&l| l > layer_count) {
                    return Err(Error::Selection(format!("layer {bad} outside [0, {layer_count}]")));
                }
                if ls.is_empty() {
                    return Err(Error::Selection("empty layer selection".into()));
                }
                let mut out = ls.clone();
                out.sort_unstable();
                out.dedup();
                Ok(out)
            }
        }
    }
}

// "all" or a list of indices
impl Serialize for LayerSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSelection::All => s.serialize_str("all"),
            LayerSelection::Layers(ls) => ls.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Word(String),
            List(Vec<usize>),
        }
        match Repr::deserialize(d)? {
            Repr::Word(w) if w == "all" => Ok(LayerSelection::All),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("unknown layer selection {w:?}"))),
            Repr::List(ls) => Ok(LayerSelection::Layers(ls)),
        }
    }
}

/// A model conditioned on one dataset's train split. Immutable.
#[derive(Debug, Clone)]
pub struct FitHandle {
    pub session_id: String,
    /// Hash of the model digest and the train split.
    pub context_digest: String,
    pub column_roles: Vec<ColumnRole>,
    /// Token layout the backend actually uses; may differ from the dataset's
    /// columns when a backend regroups features.
    pub token_roles: Vec<TokenRole>,
    pub model_digest: String,
    dataset: Arc<TabularDataset>,
}

impl FitHandle {
    pub fn dataset(&self) -> &TabularDataset {
        &self.dataset
    }
}

/// Final mapping from an answer-token state to a prediction.
pub enum HeadDescriptor {
    /// Normalization plus linear map, standardized units.
    Toy(OutputHead),
    /// Bar-distribution head reduced to its expectation; decoding runs in the
    /// backend itself.
    BarDistribution,
}

/// Decoded predictions for every layer, raw units.
#[derive(Debug, Clone)]
pub struct LayerDecoding {
    pub layers: Vec<usize>,
    /// Head including its pre-head normalization.
    pub normalized: Vec<Vec<f64>>,
    /// Linear map alone; equal to `normalized` when the head has no norm.
    pub raw: Vec<Vec<f64>>,
    pub normalization: &'static str,
    /// True when the decoded scalar is a reduction of a distribution head.
    pub approximate: bool,
}

/// Per-layer decoding of the answer-token states for the given rows, computed
/// by each backend in its own units.
pub fn decode_layers(model: &ProbeableModel, handle: &FitHandle, test_rows: Option<&[usize]>) -> Result<LayerDecoding> {
    model.check_handle(handle)?;
    match model.output_head()? {
        HeadDescriptor::Toy(head) => {
            let Inner::Toy(toy) = &model.inner else { unreachable!() };
            let grid = toy.embed(&handle.dataset, test_rows)?;
            let (_, states) = toy.forward(&grid)?;
            let n_test = grid.n_rows() - grid.n_train;
            let label = grid.label_token();
            let denorm = |t: candle_core::Tensor| -> Result<Vec<f64>> {
                let v: Vec<f64> = t.to_dtype(DType::F64)?.to_vec1()?;
                Ok(v.into_iter().map(|p| grid.label_mean + grid.label_std * p).collect())
            };
            let mut normalized = Vec::with_capacity(states.len());
            let mut raw = Vec::with_capacity(states.len());
            for layer in &states {
                let answer = layer.states.narrow(0, grid.n_train, n_test)?.narrow(1, label, 1)?.squeeze(1)?;
                normalized.push(denorm(head.apply(&answer)?)?);
                raw.push(denorm(head.apply_raw(&answer)?)?);
            }
            Ok(LayerDecoding {
                layers: (0..states.len()).collect(),
                normalized,
                raw,
                normalization: "final_norm",
                approximate: false,
            })
        }
        HeadDescriptor::BarDistribution => {
            let Inner::Tabpfn(session) = &model.inner else { unreachable!() };
            let out = session.run(handle, &model.resolve_test_rows(handle, test_rows)?)?;
            Ok(LayerDecoding {
                layers: (0..out.decoded.len()).collect(),
                normalized: out.decoded.clone(),
                raw: out.decoded.clone(),
                normalization: "none",
                approximate: true,
            })
        }
    }
}

fn toy_descriptor(model: &ToyModel, checkpoint_ref: String) -> Result<ModelDescriptor> {
    Ok(ModelDescriptor {
        backend: Backend::Toy,
        checkpoint_ref,
        layer_count: model.config().n_layers,
        embed_dim: model.config().embed_dim,
        capabilities: Capabilities { has_unembedding_head: true, supports_regression: true },
        model_digest: model.parameter_digest()?,
    })
}

impl ProbeableModel {
    /// Parses `toy:<checkpoint>` or `tabpfn-v2[:<device>]`.
    pub fn open(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("toy:") {
            if path.is_empty() {
                return Err(Error::Config("toy backend needs a checkpoint path".into()));
            }
            return Self::from_checkpoint(Path::new(path));
        }
        if spec == "tabpfn-v2" || spec.starts_with("tabpfn-v2:") {
            let device = spec.strip_prefix("tabpfn-v2:").unwrap_or("cpu");
            let session = tabpfn::Session::open(device)?;
            let descriptor = session.descriptor().clone();
            return Ok(Self { descriptor, inner: Inner::Tabpfn(session) });
        }
        Err(Error::Config(format!(
            "unknown backend {spec:?}; expected toy:<checkpoint> or tabpfn-v2[:<device>]"
        )))
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let model = load_checkpoint(path)?;
        let descriptor = toy_descriptor(&model, path.display().to_string())?;
        Ok(Self { descriptor, inner: Inner::Toy(Arc::new(model)) })
    }

    /// Wraps an in-memory toy model; `checkpoint_ref` is recorded verbatim.
    pub fn from_toy(model: ToyModel, checkpoint_ref: impl Into<String>) -> Result<Self> {
        let descriptor = toy_descriptor(&model, checkpoint_ref.into())?;
        Ok(Self { descriptor, inner: Inner::Toy(Arc::new(model)) })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn layer_count(&self) -> usize {
        self.descriptor.layer_count
    }

    pub fn embed_dim(&self) -> usize {
        self.descriptor.embed_dim
    }

    pub fn toy(&self) -> Option<&ToyModel> {
        match &self.inner {
            Inner::Toy(m) => Some(m),
            Inner::Tabpfn(_) => None,
        }
    }

    /// Conditions the model on the dataset's train split. No parameters change.
    pub fn fit_context(&self, dataset: &TabularDataset) -> Result<FitHandle> {
        let train = dataset.rows_in(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("dataset has no train rows".into()));
        }
        let mut h = Hasher::new().str(&self.descriptor.model_digest);
        for name in &dataset.feature_names {
            h = h.str(name);
        }
        h = h.str(&serde_json::to_string(&dataset.column_roles)?);
        for &i in &train {
            h = h.f64s(dataset.row(i)).f64s(&[dataset.z[i]]);
        }
        let context_digest = h.finish();
        let token_roles = match &self.inner {
            Inner::Toy(_) => (0..=dataset.n_features())
                .map(|t| if t == dataset.n_features() { TokenRole::Label } else { TokenRole::Feature })
                .collect(),
            Inner::Tabpfn(s) => s.token_roles(dataset)?,
        };
        Ok(FitHandle {
            session_id: format!("{}-{}", backend_tag(self.descriptor.backend), &context_digest[..8]),
            context_digest,
            column_roles: dataset.column_roles.clone(),
            token_roles,
            model_digest: self.descriptor.model_digest.clone(),
            dataset: Arc::new(dataset.clone()),
        })
    }

    fn check_handle(&self, handle: &FitHandle) -> Result<()> {
        if handle.model_digest != self.descriptor.model_digest {
            return Err(Error::Selection("fit handle belongs to a different model".into()));
        }
        Ok(())
    }

    fn resolve_test_rows(&self, handle: &FitHandle, test_rows: Option<&[usize]>) -> Result<Vec<usize>> {
        let ds = &handle.dataset;
        match test_rows {
            None => Ok(ds.rows_in(Split::Test)),
            Some(rows) => {
                for &r in rows {
                    if r >= ds.n_rows() || ds.split[r] != Split::Test {
                        return Err(Error::Selection(format!("row {r} is not a test row")));
                    }
                }
                Ok(rows.to_vec())
            }
        }
    }

    /// Raw-unit predictions for the selected test rows (all when `None`).
    pub fn predict(&self, handle: &FitHandle, test_rows: Option<&[usize]>) -> Result<Vec<f64>> {
        self.check_handle(handle)?;
        match &self.inner {
            Inner::Toy(m) => {
                let grid = m.embed(&handle.dataset, test_rows)?;
                Ok(m.forward(&grid)?.0)
            }
            Inner::Tabpfn(s) => Ok(s.run(handle, &self.resolve_test_rows(handle, test_rows)?)?.prediction.clone()),
        }
    }

    /// Hidden states of the selected test rows, one record per layer.
    pub fn capture(
        &self,
        handle: &FitHandle,
        test_rows: Option<&[usize]>,
        layers: &LayerSelection,
        tokens: TokenSelection,
        run_id: &str,
    ) -> Result<Vec<ActivationRecord>> {
        self.check_handle(handle)?;
        let layers = layers.resolve(self.layer_count())?;
        let rows = self.resolve_test_rows(handle, test_rows)?;
        let n = rows.len();
        let (per_layer, t, k) = match &self.inner {
            Inner::Toy(m) => {
                let grid = m.embed(&handle.dataset, Some(&rows))?;
                let (_, states) = m.forward(&grid)?;
                let (t, k) = (grid.n_tokens(), self.embed_dim());
                let mut out = Vec::with_capacity(layers.len());
                for &l in &layers {
                    let test = states[l].states.narrow(0, grid.n_train, n)?;
                    out.push(test.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
                }
                (out, t, k)
            }
            Inner::Tabpfn(s) => {
                let res = s.run(handle, &rows)?;
                let out = layers.iter().map(|&l| res.states[l].clone()).collect();
                (out, res.n_tokens, res.embed_dim)
            }
        };
        let mut records = Vec::with_capacity(layers.len());
        for (layer, values) in layers.into_iter().zip(per_layer) {
            let (values, roles) = match tokens {
                TokenSelection::All => (values, handle.token_roles.clone()),
                TokenSelection::AnswerOnly => {
                    let mut ans = Vec::with_capacity(n * k);
                    for i in 0..n {
                        let start = (i * t + t - 1) * k;
                        ans.extend_from_slice(&values[start..start + k]);
                    }
                    (ans, vec![TokenRole::Label])
                }
            };
            let record = ActivationRecord {
                run_id: run_id.to_string(),
                fit_digest: handle.context_digest.clone(),
                layer,
                token_selection: tokens,
                shape: (n, roles.len(), k),
                token_roles: roles,
                row_roles: vec![Split::Test; n],
                source_rows: rows.clone(),
                values,
            };
            record.validate()?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn output_head(&self) -> Result<HeadDescriptor> {
        if !self.descriptor.capabilities.has_unembedding_head {
            return Err(Error::Capability(format!(
                "{:?} backend does not expose its output head",
                self.descriptor.backend
            )));
        }
        match &self.inner {
            Inner::Toy(m) => Ok(HeadDescriptor::Toy(m.output_head())),
            Inner::Tabpfn(_) => Ok(HeadDescriptor::BarDistribution),
        }
    }
}

fn backend_tag(b: Backend) -> &'static str {
    match b {
        Backend::Toy => "toy",
        Backend::TabpfnV2 => "tabpfn",
    }
}

/// Resolves the run-directory root: `TABPROBE_DATA_DIR` or `./runs`.
pub fn data_root() -> PathBuf {
    std::env::var_os("TABPROBE_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Digest of a model descriptor, used to tie results to weights.
pub fn descriptor_digest(d: &ModelDescriptor) -> String {
    digest::json_digest(d)
}
