//! Logit lens: decode every layer's answer-token state with the model's own
//! output head and score the decoded predictions against the true labels.

use serde::{Deserialize, Serialize};

use crate::adapter::{decode_layers, FitHandle, ProbeableModel};
use crate::error::Result;
use crate::metrics;

pub const DEFAULT_TAU: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensResult {
    pub fit_digest: String,
    pub layers: Vec<usize>,
    /// Decoded predictions per layer, raw units, one entry per test row.
    pub decoded: Vec<Vec<f64>>,
    pub mse_per_layer: Vec<f64>,
    pub r2_per_layer: Vec<f64>,
    /// Smallest layer from which every later layer stays within `tau` times
    /// the final-layer MSE; `None` only for an empty result.
    pub convergence_layer: Option<usize>,
    pub tau: f64,
    pub normalization_variant: String,
    /// The same curves with the pre-head normalization skipped.
    pub raw_mse_per_layer: Vec<f64>,
    pub raw_r2_per_layer: Vec<f64>,
    /// True when the head is a distribution reduced to its expectation.
    pub approximate: bool,
    pub source_rows: Vec<usize>,
}

/// Earliest layer index after which MSE never exceeds `tau · final`.
pub fn convergence_layer(mse: &[f64], tau: f64) -> Option<usize> {
    let last = *mse.last()?;
    let bound = tau * last;
    let mut idx = mse.len() - 1;
    while idx > 0 && mse[idx - 1] <= bound {
        idx -= 1;
    }
    Some(idx)
}

pub fn run_lens(model: &ProbeableModel, handle: &FitHandle, test_rows: Option<&[usize]>, tau: f64) -> Result<LensResult> {
    let dec = decode_layers(model, handle, test_rows)?;
    let ds = handle.dataset();
    let rows = match test_rows {
        Some(r) => r.to_vec(),
        None => ds.rows_in(crate::synthgen::Split::Test),
    };
    let truth: Vec<f64> = rows.iter().map(|&i| ds.z[i]).collect();
    let score = |preds: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        preds.iter().map(|p| (metrics::mse(&truth, p), metrics::r2(&truth, p))).unzip()
    };
    let (mse, r2) = score(&dec.normalized);
    let (raw_mse, raw_r2) = score(&dec.raw);
    Ok(LensResult {
        fit_digest: handle.context_digest.clone(),
        layers: dec.layers,
        convergence_layer: convergence_layer(&mse, tau),
        decoded: dec.normalized,
        mse_per_layer: mse,
        r2_per_layer: r2,
        tau,
        normalization_variant: dec.normalization.to_string(),
        raw_mse_per_layer: raw_mse,
        raw_r2_per_layer: raw_r2,
        approximate: dec.approximate,
        source_rows: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::gen_linear;
    use crate::toymodel::{ModelConfig, ToyModel};

    #[test]
    fn convergence_is_not_transient() {
        assert_eq!(convergence_layer(&[9.0, 1.0, 5.0, 1.05, 1.0], 1.1), Some(3));
        assert_eq!(convergence_layer(&[1.0, 1.0, 1.0], 1.1), Some(0));
        assert_eq!(convergence_layer(&[3.0], 1.1), Some(0));
        assert_eq!(convergence_layer(&[], 1.1), None);
        assert_eq!(convergence_layer(&[2.0, 0.0], 1.1), Some(1));
    }

    #[test]
    fn final_layer_is_the_prediction() {
        let toy = ToyModel::new(ModelConfig { n_layers: 3, embed_dim: 16, n_heads: 2, seed: 2, ..Default::default() }).unwrap();
        let model = ProbeableModel::from_toy(toy, "memory").unwrap();
        let (_, ds) = gen_linear(1.0, -0.5, 30, 8, 4, None).unwrap();
        let handle = model.fit_context(&ds).unwrap();
        let lens = run_lens(&model, &handle, None, DEFAULT_TAU).unwrap();
        assert_eq!(lens.layers, vec![0, 1, 2, 3]);
        assert_eq!(lens.decoded.last().unwrap(), &model.predict(&handle, None).unwrap());
        assert_eq!(lens.normalization_variant, "final_norm");
        let c = lens.convergence_layer.unwrap();
        let last = *lens.mse_per_layer.last().unwrap();
        assert!(lens.mse_per_layer[c..].iter().all(|m| *m <= 1.1 * last));
        let json = serde_json::to_value(&lens).unwrap();
        for key in ["layers", "mse_per_layer", "r2_per_layer", "convergence_layer", "normalization_variant"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
