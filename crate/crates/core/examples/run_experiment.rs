//! Answer-probe and logit-lens experiments on the same task, then the
//! ordering comparison and a rendered report.
//!
//! cargo run --example run_experiment -- [checkpoint]

use tabprobe::adapter::ProbeableModel;
use tabprobe::expharness::{compare_answer_vs_lens, run_with_model, ExperimentConfig, ExperimentKind};
use tabprobe::probekit::TargetName;
use tabprobe::report;
use tabprobe::toymodel::{ModelConfig, ToyModel};

fn main() -> tabprobe::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => ProbeableModel::open(&format!("toy:{path}"))?,
        None => ProbeableModel::from_toy(ToyModel::new(ModelConfig::default())?, "untrained")?,
    };
    let root = std::env::temp_dir().join(format!("tabprobe-experiment-{}", std::process::id()));
    let config = |kind: ExperimentKind| ExperimentConfig {
        experiment: kind,
        run_id: kind.as_str().into(),
        depths: vec![0],
        ..Default::default()
    };
    let answer = run_with_model(&config(ExperimentKind::AnswerProbe), &model, &root)?;
    let lens = run_with_model(&config(ExperimentKind::LogitLens), &model, &root)?;
    for p in answer.summary.curve(TargetName::Answer).unwrap_or(&[]) {
        println!("layer {}: answer probe R² {:.4}", p.layer, p.r2_mean);
    }
    let ordering = compare_answer_vs_lens(&answer.run_dir, &lens.run_dir)?;
    println!(
        "first layer with probe R² >= {}: {:?}; lens convergence: {:?}",
        ordering.threshold, ordering.probe_layer, ordering.lens_convergence_layer
    );
    for f in report::render(&answer.run_dir, &answer.run_dir.join("report"))? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
