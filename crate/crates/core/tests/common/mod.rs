//! Oracles shared by the test targets.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabprobe::probekit::{train_linear_probe, ProbingDataset, Provenance, TargetName};
use tabprobe::synthgen::gen_compound;
use tabprobe::toymodel::{ModelConfig, ToyModel};

pub fn table(rows: DMatrix<f64>, targets: Vec<f64>) -> ProbingDataset {
    let provenance = Provenance {
        layer: 0,
        token_selection: "synthetic".into(),
        flatten_order: "feature".into(),
        source_fits: vec![],
    };
    ProbingDataset::new(rows, targets, TargetName::Answer, provenance).unwrap()
}

/// Columns on different scales, targets linear plus a little noise.
pub fn gaussian_table(m: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(m, p, |_, j| rng.random_range(-1.0..1.0) * (1.0 + j as f64));
    let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..m)
        .map(|i| (0..p).map(|j| x[(i, j)] * w[j]).sum::<f64>() + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    (x, y)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Largest relative deviation between the depth-0 probe weights and a
/// hand-built normal-equations solve on the same standardized train split.
pub fn ridge_deviation(m: usize, p: usize, lambda: f64) -> f64 {
    let (x, y) = gaussian_table(m, p, m as u64 * 31 + p as u64);
    let probe = train_linear_probe(&table(x.clone(), y.clone()), lambda, 4).unwrap();
    let tr = &probe.train_rows;
    let n = tr.len() as f64;
    let cols: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let mu = tr.iter().map(|&i| x[(i, j)]).sum::<f64>() / n;
            let var = tr.iter().map(|&i| (x[(i, j)] - mu).powi(2)).sum::<f64>() / n;
            (mu, var.sqrt())
        })
        .collect();
    let z = |i: usize, j: usize| (x[(i, j)] - cols[j].0) / cols[j].1;
    let y_mean = tr.iter().map(|&i| y[i]).sum::<f64>() / n;
    let gram: Vec<Vec<f64>> = (0..p)
        .map(|a| {
            (0..p)
                .map(|b| tr.iter().map(|&i| z(i, a) * z(i, b)).sum::<f64>() + if a == b { lambda } else { 0.0 })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..p).map(|a| tr.iter().map(|&i| z(i, a) * (y[i] - y_mean)).sum()).collect();
    let w = gauss_solve(gram, rhs);
    let scale = w.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let weights = probe.model.weights.iter().zip(&w).map(|(g, e)| (g - e).abs() / scale);
    let intercept = (probe.model.intercept - y_mean).abs() / (1.0 + y_mean.abs());
    weights.fold(intercept, f64::max)
}

/// Largest relative gap between analytic directional derivatives of the
/// training loss and central finite differences, f64, 2-layer k=8 model.
pub fn gradient_deviation(trials: usize) -> f64 {
    let config = ModelConfig { n_layers: 2, embed_dim: 8, n_heads: 2, seed: 11, ..Default::default() };
    let model = ToyModel::new(config).unwrap().to_dtype(DType::F64).unwrap();
    let (_, ds) = gen_compound(12, 5, 2, None).unwrap();
    let grads = model.task_loss(&ds).unwrap().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = |m: &ToyModel| m.task_loss(&ds).unwrap().to_scalar::<f64>().unwrap();
    let originals: Vec<Tensor> = model.vars().iter().map(|v| v.as_tensor().copy().unwrap()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dirs: Vec<Tensor> = model
            .vars()
            .iter()
            .map(|v| {
                let d: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(d, v.shape(), v.device()).unwrap()
            })
            .collect();
        let analytic: f64 = model
            .vars()
            .iter()
            .zip(&dirs)
            .map(|(v, d)| {
                let g = grads.get(v.as_tensor()).expect("every parameter gets a gradient");
                (g * d).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            })
            .sum();
        let eps = 1e-6;
        let shifted = |sign: f64| {
            for ((v, o), d) in model.vars().iter().zip(&originals).zip(&dirs) {
                v.set(&(o + (d * (sign * eps)).unwrap()).unwrap()).unwrap();
            }
            loss(&model)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
        for (v, o) in model.vars().iter().zip(&originals) {
            v.set(o).unwrap();
        }
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
    }
    worst
}
