//! Probing datasets and probes of configurable depth.
//!
//! Depth 0 is a closed-form ridge regression; depth `d >= 1` is an MLP with
//! `d` hidden ReLU layers. Every probe sees features standardized with
//! statistics of its own train split.

mod dataset;
mod mlp;
mod ridge;

pub use dataset::{
    build_crossfit, build_pertoken_target, build_withinfit, linear_encoding_oracle, target_values, ProbingDataset, Provenance, TargetName,
    MIN_CROSSFIT_FITS, MIN_PROBE_ROWS,
};
pub use mlp::{MlpProbe, MlpSettings};
pub use ridge::{ridge_fit, RidgeModel, Standardizer};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::metrics;

const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    /// Hidden layers; 0 is a linear probe.
    pub depth: usize,
    pub width: usize,
    pub ridge_lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { depth: 0, width: 256, ridge_lambda: 1e-3, max_epochs: 200, patience: 20, seed: 0 }
    }
}

impl ProbeSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn with_depth(depth: usize) -> Self {
        Self { depth, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda > 0.0) {
            return Err(Error::Config(format!("ridge lambda must be > 0, got {}", self.ridge_lambda)));
        }
        if self.depth > 0 && (self.width == 0 || self.max_epochs == 0) {
            return Err(Error::Config("MLP probes need width and epochs > 0".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest::json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultProvenance {
    #[serde(flatten)]
    pub dataset: Provenance,
    pub ridge_lambda: f64,
    pub n_rows: usize,
    pub n_features: usize,
}

/// Metrics of one trained probe. Field set and order are the JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub spec_digest: String,
    pub target_name: TargetName,
    pub layer: usize,
    pub depth: usize,
    pub split_seed: u64,
    pub r2_train: f64,
    pub r2_test: f64,
    pub mse_train: f64,
    pub mse_test: f64,
    pub provenance: ResultProvenance,
}

/// Seeded 80/20 row split.
pub fn split_rows(m: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_test = ((m as f64 * TEST_FRACTION).round() as usize).clamp(1, m.saturating_sub(1));
    let test = order.split_off(m - n_test);
    (order, test)
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows.iter())
}

/// A fitted depth-0 probe together with the split it was fitted on.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub standardizer: Standardizer,
    pub model: RidgeModel,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

pub fn train_linear_probe(data: &ProbingDataset, lambda: f64, split_seed: u64) -> Result<LinearProbe> {
    check_size(data)?;
    let (train_rows, test_rows) = split_rows(data.n_rows(), split_seed);
    let xtr = select_rows(&data.rows, &train_rows);
    let standardizer = Standardizer::fit(&xtr);
    let ytr: Vec<f64> = train_rows.iter().map(|&i| data.targets[i]).collect();
    let model = ridge_fit(&standardizer.apply(&xtr), &ytr, lambda)?;
    Ok(LinearProbe { standardizer, model, train_rows, test_rows })
}

fn check_size(data: &ProbingDataset) -> Result<()> {
    if data.n_rows() < MIN_PROBE_ROWS {
        return Err(Error::Size(format!(
            "probing needs >= {MIN_PROBE_ROWS} rows, got {}",
            data.n_rows()
        )));
    }
    Ok(())
}

/// Trains one probe and scores it on both splits.
pub fn fit_probe(data: &ProbingDataset, spec: &ProbeSpec, split_seed: u64) -> Result<ProbeResult> {
    spec.validate()?;
    check_size(data)?;
    let (train_rows, test_rows) = split_rows(data.n_rows(), split_seed);
    let standardizer = Standardizer::fit(&select_rows(&data.rows, &train_rows));
    let xs = standardizer.apply(&data.rows);
    let targets = |rows: &[usize]| rows.iter().map(|&i| data.targets[i]).collect::<Vec<_>>();
    let (ytr, yte) = (targets(&train_rows), targets(&test_rows));

    let (ptr, pte) = if spec.depth == 0 {
        let model = ridge_fit(&select_rows(&xs, &train_rows), &ytr, spec.ridge_lambda)?;
        (model.predict(&select_rows(&xs, &train_rows)), model.predict(&select_rows(&xs, &test_rows)))
    } else {
        let settings = MlpSettings {
            depth: spec.depth,
            width: spec.width,
            max_epochs: spec.max_epochs,
            patience: spec.patience,
            seed: spec.seed ^ split_seed.rotate_left(17),
        };
        let probe = MlpProbe::fit(&xs, &data.targets, &train_rows, settings)?;
        (probe.predict(&xs, &train_rows)?, probe.predict(&xs, &test_rows)?)
    };
    if ptr.iter().chain(&pte).any(|v| !v.is_finite()) {
        return Err(Error::Divergence("probe produced non-finite predictions".into()));
    }
    Ok(ProbeResult {
        spec_digest: spec.digest(),
        target_name: data.target_name,
        layer: data.provenance.layer,
        depth: spec.depth,
        split_seed,
        r2_train: metrics::r2(&ytr, &ptr),
        r2_test: metrics::r2(&yte, &pte),
        mse_train: metrics::mse(&ytr, &ptr),
        mse_test: metrics::mse(&yte, &pte),
        provenance: ResultProvenance {
            dataset: data.provenance.clone(),
            ridge_lambda: spec.ridge_lambda,
            n_rows: data.n_rows(),
            n_features: data.n_features(),
        },
    })
}

/// One result per (depth, seed); a given seed shares its split across depths.
pub fn complexity_sweep(data: &ProbingDataset, depths: &[usize], seeds: &[u64], base: &ProbeSpec) -> Result<Vec<ProbeResult>> {
    if depths.first() != Some(&0) || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("depths must be strictly ascending and start at 0, got {depths:?}")));
    }
    let mut out = Vec::with_capacity(depths.len() * seeds.len());
    for &seed in seeds {
        for &depth in depths {
            let spec = ProbeSpec { depth, ..base.clone() };
            out.push(fit_probe(data, &spec, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn provenance() -> Provenance {
        Provenance { layer: 0, token_selection: "all".into(), flatten_order: "token,channel".into(), source_fits: vec![] }
    }

    fn gaussian(m: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn split_is_eighty_twenty_and_disjoint() {
        let (tr, te) = split_rows(200, 4);
        assert_eq!((tr.len(), te.len()), (160, 40));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_rows(200, 4), (tr, te));
    }

    #[test]
    fn realizable_linear_target_is_exact() {
        let x = gaussian(120, 6, 1);
        let y: Vec<f64> = (0..120).map(|i| 2.0 * x[(i, 0)] - 0.5 * x[(i, 3)] + 1.0).collect();
        let data = ProbingDataset::new(x, y, TargetName::Answer, provenance()).unwrap();
        let spec = ProbeSpec { ridge_lambda: 1e-12, ..ProbeSpec::linear() };
        let res = fit_probe(&data, &spec, 0).unwrap();
        assert!((res.r2_test - 1.0).abs() < 1e-10, "{}", res.r2_test);
        assert!(res.mse_test < 1e-10);
    }

    #[test]
    fn constant_target_scores_zero() {
        let data = ProbingDataset::new(gaussian(40, 3, 2), vec![1.5; 40], TargetName::Answer, provenance()).unwrap();
        for depth in [0, 1] {
            let spec = ProbeSpec { max_epochs: 5, ..ProbeSpec::with_depth(depth) };
            let res = fit_probe(&data, &spec, 1).unwrap();
            assert_eq!(res.r2_test, 0.0);
            assert_eq!(res.r2_train, 0.0);
        }
    }

    #[test]
    fn too_few_rows() {
        let data = ProbingDataset::new(gaussian(19, 2, 0), vec![0.0; 19], TargetName::Answer, provenance()).unwrap();
        assert!(matches!(fit_probe(&data, &ProbeSpec::linear(), 0), Err(Error::Size(_))));
    }

    #[test]
    fn sweep_contract() {
        let x = gaussian(60, 4, 3);
        let y: Vec<f64> = (0..60).map(|i| x[(i, 1)]).collect();
        let data = ProbingDataset::new(x, y, TargetName::Answer, provenance()).unwrap();
        let base = ProbeSpec { width: 16, max_epochs: 3, ..ProbeSpec::default() };
        let res = complexity_sweep(&data, &[0, 1, 2, 3], &[0, 1, 2], &base).unwrap();
        assert_eq!(res.len(), 12);
        assert!(res.iter().all(|r| r.r2_test <= 1.0));
        assert!(matches!(complexity_sweep(&data, &[1, 2], &[0], &base), Err(Error::Config(_))));
        assert!(matches!(complexity_sweep(&data, &[0, 2, 1], &[0], &base), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let x = gaussian(50, 5, 7);
        let y: Vec<f64> = (0..50).map(|i| x[(i, 0)].sin()).collect();
        let data = ProbingDataset::new(x, y, TargetName::Answer, provenance()).unwrap();
        let spec = ProbeSpec { width: 8, max_epochs: 4, ..ProbeSpec::with_depth(2) };
        assert_eq!(fit_probe(&data, &spec, 3).unwrap(), fit_probe(&data, &spec, 3).unwrap());
    }
}
