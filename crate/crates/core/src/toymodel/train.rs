//! Meta-training on freshly sampled synthetic tasks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PreparedTask, ToyModel};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::{Adam, AdamConfig};
use crate::synthgen::{self, Split, TabularDataset, TaskFamily, DEFAULT_COEFF_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorComponent {
    pub family: TaskFamily,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub prior_mix: Vec<PriorComponent>,
    pub n_steps: usize,
    /// Tasks per optimizer step.
    pub batch_tasks: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Inclusive range of train-row counts sampled per step.
    pub context_rows: (usize, usize),
    pub test_rows: usize,
    /// Largest number of coefficient pairs in sampled switch tasks.
    pub max_switch_pairs: usize,
    pub coeff_range: (f64, f64),
    pub eval_interval: usize,
    pub eval_tasks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prior_mix: vec![
                PriorComponent { family: TaskFamily::Linear, weight: 0.4 },
                PriorComponent { family: TaskFamily::Compound, weight: 0.3 },
                PriorComponent { family: TaskFamily::Switch, weight: 0.3 },
            ],
            n_steps: 1500,
            batch_tasks: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            clip_norm: 1.0,
            warmup_steps: 200,
            context_rows: (32, 96),
            test_rows: 32,
            max_switch_pairs: 16,
            coeff_range: DEFAULT_COEFF_RANGE,
            eval_interval: 250,
            eval_tasks: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prior_mix.is_empty() || self.prior_mix.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::Config("prior weights must be positive".into()));
        }
        let total: f64 = self.prior_mix.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("prior weights sum to {total}, expected 1")));
        }
        if self.batch_tasks == 0 || self.context_rows.0 < 2 || self.context_rows.0 > self.context_rows.1 {
            return Err(Error::Config("invalid batch size or context range".into()));
        }
        if self.test_rows == 0 || self.max_switch_pairs < 2 {
            return Err(Error::Config("test_rows must be >= 1 and max_switch_pairs >= 2".into()));
        }
        Ok(())
    }
}

/// Held-out in-context regression quality for one family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IclScore {
    pub family: TaskFamily,
    /// Mean over tasks of the per-task test R².
    pub r2: f64,
    /// Mean over tasks of the per-task test MSE, raw units.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub param_digest: String,
    pub step: u64,
    /// Exponential moving average of the standardized training loss.
    pub running_loss: f64,
    pub prior_mix: Vec<PriorComponent>,
    pub eval_history: Vec<(u64, Vec<IclScore>)>,
}

fn sample_family(rng: &mut ChaCha8Rng, mix: &[PriorComponent]) -> TaskFamily {
    let mut u: f64 = rng.random();
    for c in mix {
        if u < c.weight {
            return c.family;
        }
        u -= c.weight;
    }
    mix.last().unwrap().family
}

/// One task drawn from the prior.
pub(crate) fn sample_task(
    rng: &mut ChaCha8Rng,
    family: TaskFamily,
    n_ctx: usize,
    n_test: usize,
    switch_pairs: usize,
    coeff_range: (f64, f64),
) -> Result<TabularDataset> {
    let seed: u64 = rng.random();
    let ds = match family {
        TaskFamily::Linear => {
            let a = rng.random_range(coeff_range.0..coeff_range.1);
            let b = rng.random_range(coeff_range.0..coeff_range.1);
            synthgen::gen_linear(a, b, n_ctx, n_test, seed, None)?.1
        }
        TaskFamily::Compound => synthgen::gen_compound(n_ctx, n_test, seed, None)?.1,
        TaskFamily::Switch => {
            let table = synthgen::random_switch_table(switch_pairs, coeff_range, rng.random());
            let per = (n_ctx / switch_pairs).max(2);
            let per_test = (n_test / switch_pairs).max(1);
            synthgen::gen_switch(&table, per, per_test, seed, None)?.1
        }
    };
    Ok(ds)
}

fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    if step < config.warmup_steps {
        return config.lr * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = (config.n_steps.saturating_sub(config.warmup_steps)).max(1) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    let floor = 0.1;
    config.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Mean held-out R² and MSE of in-context predictions on fresh tasks.
pub fn evaluate_icl(
    model: &ToyModel,
    family: TaskFamily,
    n_tasks: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<IclScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r2 = 0.0;
    let mut mse = 0.0;
    for _ in 0..n_tasks {
        let ds = sample_task(&mut rng, family, n_train, n_test, 4, DEFAULT_COEFF_RANGE)?;
        let pred = model.predict(&ds)?;
        let truth: Vec<f64> = ds.rows_in(Split::Test).iter().map(|&i| ds.z[i]).collect();
        r2 += metrics::r2(&truth, &pred);
        mse += metrics::mse(&truth, &pred);
    }
    Ok(IclScore { family, r2: r2 / n_tasks as f64, mse: mse / n_tasks as f64 })
}

/// Trains a fresh model from `model_config` on the task prior.
pub fn meta_train(model_config: ModelConfig, config: &TrainConfig) -> Result<(ToyModel, TrainState)> {
    config.validate()?;
    let model = ToyModel::new(model_config)?;
    let mut adam = Adam::new(
        model.vars().to_vec(),
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            clip_norm: Some(config.clip_norm),
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut running = f64::NAN;
    let mut history = Vec::new();
    let eval_seed = config.seed ^ 0x5eed_e7a1_0000_0000;

    for step in 0..config.n_steps {
        adam.set_lr(lr_at(config, step));
        let n_ctx = rng.random_range(config.context_rows.0..=config.context_rows.1);
        let pairs = rng.random_range(2..=config.max_switch_pairs);
        let mut groups: BTreeMap<(usize, usize, usize), Vec<PreparedTask>> = BTreeMap::new();
        for _ in 0..config.batch_tasks {
            let family = sample_family(&mut rng, &config.prior_mix);
            let ds = sample_task(&mut rng, family, n_ctx, config.test_rows, pairs, config.coeff_range)?;
            let task = PreparedTask::new(&ds, None)?;
            groups.entry((task.d, task.n_train, task.n_rows())).or_default().push(task);
        }
        let mut total = None;
        for tasks in groups.values() {
            let weight = tasks.len() as f64 / config.batch_tasks as f64;
            let loss = (model.batch_loss(tasks)? * weight)?;
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        let loss = total.expect("non-empty batch");
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value} at step {step}")));
        }
        running = if running.is_nan() { value } else { 0.98 * running + 0.02 * value };
        let grads = loss.backward()?;
        adam.step(&grads)?;

        let done = step + 1;
        if config.eval_interval > 0 && (done % config.eval_interval == 0 || done == config.n_steps) {
            let scores = evaluate_prior(&model, config, eval_seed)?;
            let line: Vec<String> = scores.iter().map(|s| format!("{:?} r2={:.4} mse={:.4}", s.family, s.r2, s.mse)).collect();
            log::info!("step {done}: loss {running:.5} | {}", line.join(" | "));
            history.push((done as u64, scores));
        }
    }

    let state = TrainState {
        param_digest: model.parameter_digest()?,
        step: adam.step_count(),
        running_loss: if running.is_nan() { 0.0 } else { running },
        prior_mix: config.prior_mix.clone(),
        eval_history: history,
    };
    Ok((model, state))
}

fn evaluate_prior(model: &ToyModel, config: &TrainConfig, seed: u64) -> Result<Vec<IclScore>> {
    let n_ctx = config.context_rows.1;
    config
        .prior_mix
        .iter()
        .map(|c| evaluate_icl(model, c.family, config.eval_tasks, n_ctx, config.test_rows, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, TrainConfig) {
        let mc = ModelConfig { n_layers: 2, embed_dim: 16, n_heads: 2, seed: 3, ..Default::default() };
        let tc = TrainConfig {
            n_steps: 3,
            batch_tasks: 4,
            context_rows: (8, 12),
            test_rows: 4,
            eval_interval: 0,
            seed: 17,
            ..Default::default()
        };
        (mc, tc)
    }

    #[test]
    fn zero_steps_is_initialization() {
        let (mc, mut tc) = small();
        tc.n_steps = 0;
        let (model, state) = meta_train(mc.clone(), &tc).unwrap();
        assert_eq!(state.step, 0);
        assert_eq!(model.parameter_digest().unwrap(), ToyModel::new(mc).unwrap().parameter_digest().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (mc, tc) = small();
        let (_, a) = meta_train(mc.clone(), &tc).unwrap();
        let (_, b) = meta_train(mc.clone(), &tc).unwrap();
        assert_eq!(a.param_digest, b.param_digest);
        assert_ne!(a.param_digest, ToyModel::new(mc).unwrap().parameter_digest().unwrap());
        assert!(a.running_loss.is_finite());
    }

    #[test]
    fn prior_weights_are_validated() {
        let (mc, mut tc) = small();
        tc.prior_mix = vec![PriorComponent { family: TaskFamily::Linear, weight: 0.7 }];
        assert!(matches!(meta_train(mc.clone(), &tc), Err(Error::Config(_))));
        tc.prior_mix = vec![
            PriorComponent { family: TaskFamily::Linear, weight: 1.5 },
            PriorComponent { family: TaskFamily::Compound, weight: -0.5 },
        ];
        assert!(meta_train(mc, &tc).is_err());
    }

    #[test]
    fn switch_tasks_train_alongside_others() {
        let (mc, mut tc) = small();
        tc.prior_mix = vec![
            PriorComponent { family: TaskFamily::Switch, weight: 0.5 },
            PriorComponent { family: TaskFamily::Linear, weight: 0.5 },
        ];
        let (_, state) = meta_train(mc, &tc).unwrap();
        assert_eq!(state.step, 3);
    }
}
