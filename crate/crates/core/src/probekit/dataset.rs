//! Turning activation records into (features, target) tables.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationRecord, TokenSelection};
use crate::error::{Error, Result};
use crate::synthgen::{Split, TabularDataset, TaskFamily, TaskSpec};

pub const MIN_PROBE_ROWS: usize = 20;
pub const MIN_CROSSFIT_FITS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetName {
    Alpha,
    Beta,
    Answer,
    Intermediary,
    InputA,
    InputB,
    InputC,
    InputAb,
}

impl TargetName {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetName::Alpha => "alpha",
            TargetName::Beta => "beta",
            TargetName::Answer => "answer",
            TargetName::Intermediary => "intermediary",
            TargetName::InputA => "input_a",
            TargetName::InputB => "input_b",
            TargetName::InputC => "input_c",
            TargetName::InputAb => "input_ab",
        }
    }
}

impl std::fmt::Display for TargetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a probing table came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: usize,
    /// `all`, `all_but_switch`, or `answer_only`.
    pub token_selection: String,
    /// Axes of the flattening, outermost first.
    pub flatten_order: String,
    pub source_fits: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ProbingDataset {
    /// `m × p`.
    pub rows: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub target_name: TargetName,
    pub provenance: Provenance,
}

impl ProbingDataset {
    pub fn new(rows: DMatrix<f64>, targets: Vec<f64>, target_name: TargetName, provenance: Provenance) -> Result<Self> {
        if rows.nrows() != targets.len() {
            return Err(Error::Build(format!("{} rows but {} targets", rows.nrows(), targets.len())));
        }
        if rows.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Build("probing data contains non-finite values".into()));
        }
        Ok(Self { rows, targets, target_name, provenance })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.rows.ncols()
    }
}

fn coefficient(spec: &TaskSpec, switch_id: usize, target: TargetName) -> Result<f64> {
    let row = spec
        .coefficient_table
        .get(switch_id)
        .ok_or_else(|| Error::Build(format!("switch id {switch_id} not in the coefficient table")))?;
    match target {
        TargetName::Alpha => Ok(row.alpha),
        TargetName::Beta => Ok(row.beta),
        other => Err(Error::Build(format!("{other} is not a coefficient target"))),
    }
}

/// One row per model fit: the whole `(n, t, k)` record flattened row-major
/// over (sample, token, channel); target is that fit's coefficient.
pub fn build_crossfit(records: &[ActivationRecord], specs: &[TaskSpec], target: TargetName) -> Result<ProbingDataset> {
    if records.len() < MIN_CROSSFIT_FITS {
        return Err(Error::Build(format!(
            "cross-fit probing needs >= {MIN_CROSSFIT_FITS} fits, got {}",
            records.len()
        )));
    }
    if records.len() != specs.len() {
        return Err(Error::Build("one task spec per fit is required".into()));
    }
    let shape = records[0].shape;
    let layer = records[0].layer;
    for r in records {
        if r.shape != shape {
            return Err(Error::Build(format!("fit {} has shape {:?}, expected {shape:?}", r.fit_digest, r.shape)));
        }
        if r.layer != layer {
            return Err(Error::Build("cross-fit records must come from one layer".into()));
        }
    }
    let p = shape.0 * shape.1 * shape.2;
    let rows = DMatrix::from_fn(records.len(), p, |i, j| f64::from(records[i].values[j]));
    let targets = specs
        .iter()
        .map(|s| {
            if s.family != TaskFamily::Linear {
                return Err(Error::Build("cross-fit targets need linear-family specs".into()));
            }
            coefficient(s, 0, target)
        })
        .collect::<Result<Vec<_>>>()?;
    ProbingDataset::new(
        rows,
        targets,
        target,
        Provenance {
            layer,
            token_selection: records[0].token_selection.key_part().to_string(),
            flatten_order: "sample,token,channel".into(),
            source_fits: records.iter().map(|r| r.fit_digest.clone()).collect(),
        },
    )
}

fn require_test_rows(record: &ActivationRecord) -> Result<()> {
    if record.row_roles.iter().any(|r| *r != Split::Test) {
        return Err(Error::Build("probing uses held-out test rows only; record contains train rows".into()));
    }
    Ok(())
}

/// One row per held-out sample of a switch dataset: every token except the
/// switch column's, flattened over (token, channel).
pub fn build_withinfit(
    record: &ActivationRecord,
    dataset: &TabularDataset,
    spec: &TaskSpec,
    target: TargetName,
) -> Result<ProbingDataset> {
    let switch = dataset
        .switch_column()
        .ok_or_else(|| Error::Schema("within-fit probing needs a dataset with a switch column".into()))?;
    if record.token_selection != TokenSelection::All || record.shape.1 != dataset.n_features() + 1 {
        return Err(Error::Build("within-fit probing needs all-token records".into()));
    }
    require_test_rows(record)?;
    let (n, t, k) = record.shape;
    let keep: Vec<usize> = (0..t).filter(|&tok| tok != switch).collect();
    let mut rows = DMatrix::zeros(n, keep.len() * k);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        for (slot, &tok) in keep.iter().enumerate() {
            for (c, v) in record.token(i, tok).iter().enumerate() {
                rows[(i, slot * k + c)] = f64::from(*v);
            }
        }
        let u = dataset.row(record.source_rows[i])[switch];
        targets.push(coefficient(spec, u as usize, target)?);
    }
    ProbingDataset::new(
        rows,
        targets,
        target,
        Provenance {
            layer: record.layer,
            token_selection: "all_but_switch".into(),
            flatten_order: "token,channel".into(),
            source_fits: vec![record.fit_digest.clone()],
        },
    )
}

fn feature_index(dataset: &TabularDataset, name: &str) -> Result<usize> {
    dataset
        .feature_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Build(format!("dataset has no column {name:?}")))
}

/// Per-sample target values for the non-coefficient targets.
pub fn target_values(dataset: &TabularDataset, rows: &[usize], target: TargetName) -> Result<Vec<f64>> {
    let column = |name: &str| -> Result<Vec<f64>> {
        let j = feature_index(dataset, name)?;
        Ok(rows.iter().map(|&i| dataset.row(i)[j]).collect())
    };
    match target {
        TargetName::Answer => Ok(rows.iter().map(|&i| dataset.z[i]).collect()),
        TargetName::Intermediary => {
            let mids = dataset
                .intermediaries
                .as_ref()
                .ok_or_else(|| Error::Build("intermediary target needs a compound-family dataset".into()))?;
            Ok(rows.iter().map(|&i| mids[i]).collect())
        }
        TargetName::InputA => column("a"),
        TargetName::InputB => column("b"),
        TargetName::InputC => column("c"),
        TargetName::InputAb => {
            let (a, b) = (column("a")?, column("b")?);
            Ok(a.iter().zip(&b).map(|(a, b)| a * b).collect())
        }
        TargetName::Alpha | TargetName::Beta => {
            Err(Error::Build(format!("{target} needs build_withinfit or build_crossfit")))
        }
    }
}

/// One row per held-out sample: the record's tokens flattened over
/// (token, channel). An answer-only record gives `p = k`.
pub fn build_pertoken_target(record: &ActivationRecord, dataset: &TabularDataset, target: TargetName) -> Result<ProbingDataset> {
    require_test_rows(record)?;
    let (n, t, k) = record.shape;
    let targets = target_values(dataset, &record.source_rows, target)?;
    let rows = DMatrix::from_fn(n, t * k, |i, j| f64::from(record.row(i)[j]));
    ProbingDataset::new(
        rows,
        targets,
        target,
        Provenance {
            layer: record.layer,
            token_selection: match record.token_selection {
                TokenSelection::All => "all",
                TokenSelection::AnswerOnly => "answer_only",
            }
            .into(),
            flatten_order: "token,channel".into(),
            source_fits: vec![record.fit_digest.clone()],
        },
    )
}

/// Synthetic table whose target is, by construction, a linear function of
/// the features plus Gaussian noise. A correct probe family should not gain
/// from extra depth here.
pub fn linear_encoding_oracle(m: usize, p: usize, noise: f64, seed: u64) -> Result<ProbingDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w: Vec<f64> = (0..p).map(|_| normal()).collect();
    let rows = DMatrix::from_fn(m, p, |_, _| normal());
    let scale = 1.0 / (p as f64).sqrt();
    let targets = (0..m)
        .map(|i| (0..p).map(|j| rows[(i, j)] * w[j]).sum::<f64>() * scale + noise * normal())
        .collect();
    ProbingDataset::new(
        rows,
        targets,
        TargetName::Answer,
        Provenance {
            layer: 0,
            token_selection: "synthetic".into(),
            flatten_order: "feature".into(),
            source_fits: Vec::new(),
        },
    )
}
