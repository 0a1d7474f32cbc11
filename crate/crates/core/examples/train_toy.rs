//! Meta-trains the toy model and reports in-context accuracy per family.
//! Pass a step count to shorten the run; the default config takes ~25 min
//! on one core.
//!
//! cargo run --example train_toy -- [steps] [checkpoint]

use std::path::PathBuf;

use tabprobe::synthgen::TaskFamily;
use tabprobe::toymodel::{evaluate_icl, meta_train, save_checkpoint, ModelConfig, TrainConfig};

fn main() -> tabprobe::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut train = TrainConfig::default();
    if let Some(steps) = args.next() {
        train.n_steps = steps.parse().expect("steps must be an integer");
        train.warmup_steps = train.warmup_steps.min(train.n_steps / 4);
    }
    let path = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tabprobe-toy.ckpt"));
    let (model, state) = meta_train(ModelConfig::default(), &train)?;
    save_checkpoint(&model, &path)?;
    println!("{} parameters, {} steps, digest {}", model.n_parameters(), state.step, state.param_digest);
    for family in [TaskFamily::Linear, TaskFamily::Compound, TaskFamily::Switch] {
        let s = evaluate_icl(&model, family, 32, 64, 32, 12345)?;
        println!("{family:?}: held-out R² {:.4}, MSE {:.4}", s.r2, s.mse);
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}
