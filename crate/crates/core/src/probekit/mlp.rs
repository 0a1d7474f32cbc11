//! ReLU MLP probes trained with Adam and early stopping.

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

const BATCH: usize = 64;
const LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct MlpSettings {
    pub depth: usize,
    pub width: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

pub struct MlpProbe {
    layers: Vec<(Tensor, Tensor)>,
    target_mean: f64,
    target_scale: f64,
}

fn to_tensor(x: &DMatrix<f64>, rows: &[usize]) -> Result<Tensor> {
    let p = x.ncols();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        data.extend(x.row(i).iter().map(|v| *v as f32));
    }
    Ok(Tensor::from_vec(data, (rows.len(), p), &Device::Cpu)?)
}

fn forward(layers: &[(Tensor, Tensor)], x: &Tensor) -> candle_core::Result<Tensor> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(w)?.broadcast_add(b)?;
        if i + 1 < layers.len() {
            h = h.relu()?;
        }
    }
    h.squeeze(1)
}

impl MlpProbe {
    /// Trains on `train` rows of standardized `x`, holding out the last fifth
    /// of them (after a seeded shuffle) for early stopping.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], train: &[usize], settings: MlpSettings) -> Result<Self> {
        if settings.depth == 0 {
            return Err(Error::Config("MLP probe needs depth >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut order = train.to_vec();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let n_val = (order.len() / 5).max(1);
        let (fit_rows, val_rows) = order.split_at(order.len() - n_val);
        let fit_y: Vec<f64> = fit_rows.iter().map(|&i| y[i]).collect();
        let mean = fit_y.iter().sum::<f64>() / fit_y.len() as f64;
        let var = fit_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fit_y.len() as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };

        let mut dims = vec![x.ncols()];
        dims.extend(std::iter::repeat_n(settings.width, settings.depth));
        dims.push(1);
        let mut vars = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect();
            vars.push(Var::from_tensor(&Tensor::from_vec(w, (fan_in, fan_out), &Device::Cpu)?)?);
            vars.push(Var::zeros(fan_out, DType::F32, &Device::Cpu)?);
        }
        let mut adam = Adam::new(vars.clone(), AdamConfig { lr: LR, clip_norm: None, ..Default::default() })?;
        let as_layers = |vars: &[Var]| -> Vec<(Tensor, Tensor)> {
            vars.chunks(2).map(|c| (c[0].as_tensor().clone(), c[1].as_tensor().clone())).collect()
        };
        let snapshot = |vars: &[Var]| -> Vec<(Tensor, Tensor)> {
            vars.chunks(2)
                .map(|c| (c[0].as_tensor().copy().unwrap().detach(), c[1].as_tensor().copy().unwrap().detach()))
                .collect()
        };
        let norm_targets = |rows: &[usize]| -> Result<Tensor> {
            let v: Vec<f32> = rows.iter().map(|&i| ((y[i] - mean) / scale) as f32).collect();
            Ok(Tensor::from_vec(v, rows.len(), &Device::Cpu)?)
        };
        let val_x = to_tensor(x, val_rows)?;
        let val_y = norm_targets(val_rows)?;

        let mut best = (f64::INFINITY, snapshot(&vars));
        let mut since_best = 0;
        let mut shuffled = fit_rows.to_vec();
        for _epoch in 0..settings.max_epochs {
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            for chunk in shuffled.chunks(BATCH) {
                let bx = to_tensor(x, chunk)?;
                let by = norm_targets(chunk)?;
                let loss = (forward(&as_layers(&vars), &bx)? - by)?.sqr()?.mean_all()?;
                let value = loss.to_scalar::<f32>()?;
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("MLP probe loss became {value}")));
                }
                adam.step(&loss.backward()?)?;
            }
            let val = (forward(&snapshot(&vars), &val_x)? - &val_y)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
            if !val.is_finite() {
                return Err(Error::Divergence("MLP probe validation loss is not finite".into()));
            }
            if val < best.0 {
                best = (val, snapshot(&vars));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= settings.patience {
                    break;
                }
            }
        }
        Ok(Self { layers: best.1, target_mean: mean, target_scale: scale })
    }

    pub fn predict(&self, x: &DMatrix<f64>, rows: &[usize]) -> Result<Vec<f64>> {
        let out = forward(&self.layers, &to_tensor(x, rows)?)?;
        let out: Vec<f32> = out.to_vec1()?;
        Ok(out.into_iter().map(|v| self.target_mean + self.target_scale * f64::from(v)).collect())
    }
}
