//! Probe complexity on a table that is linear by construction, then a
//! linear probe for a·b on real activations.
//!
//! cargo run --example probe_oracle -- [checkpoint]

use tabprobe::actstore::TokenSelection;
use tabprobe::adapter::{LayerSelection, ProbeableModel};
use tabprobe::probekit::{build_pertoken_target, complexity_sweep, fit_probe, linear_encoding_oracle, ProbeSpec, TargetName};
use tabprobe::synthgen::gen_compound;
use tabprobe::toymodel::{ModelConfig, ToyModel};

fn main() -> tabprobe::Result<()> {
    let oracle = linear_encoding_oracle(400, 32, 0.1, 3)?;
    let results = complexity_sweep(&oracle, &[0, 1, 2, 3], &[0, 1, 2], &ProbeSpec { width: 64, ..ProbeSpec::default() })?;
    for depth in 0..4 {
        let r: Vec<f64> = results.iter().filter(|r| r.depth == depth).map(|r| r.r2_test).collect();
        println!("oracle depth {depth}: mean test R² {:.4}", r.iter().sum::<f64>() / r.len() as f64);
    }

    let model = match std::env::args().nth(1) {
        Some(path) => ProbeableModel::open(&format!("toy:{path}"))?,
        None => ProbeableModel::from_toy(ToyModel::new(ModelConfig::default())?, "untrained")?,
    };
    let (_, ds) = gen_compound(512, 256, 5, None)?;
    let handle = model.fit_context(&ds)?;
    for record in model.capture(&handle, None, &LayerSelection::All, TokenSelection::AnswerOnly, "probe")? {
        let data = build_pertoken_target(&record, &ds, TargetName::Intermediary)?;
        let r = fit_probe(&data, &ProbeSpec::linear(), 0)?;
        println!("layer {}: a·b test R² {:.4}", r.layer, r.r2_test);
    }
    Ok(())
}
