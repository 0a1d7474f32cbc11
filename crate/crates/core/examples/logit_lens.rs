//! Decodes each layer with the output head.
//!
//! cargo run --example logit_lens -- [checkpoint]

use tabprobe::adapter::ProbeableModel;
use tabprobe::lens::{run_lens, DEFAULT_TAU};
use tabprobe::synthgen::gen_compound;
use tabprobe::toymodel::{ModelConfig, ToyModel};

fn main() -> tabprobe::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => ProbeableModel::open(&format!("toy:{path}"))?,
        None => ProbeableModel::from_toy(ToyModel::new(ModelConfig::default())?, "untrained")?,
    };
    let (_, ds) = gen_compound(512, 256, 2, None)?;
    let handle = model.fit_context(&ds)?;
    let lens = run_lens(&model, &handle, None, DEFAULT_TAU)?;
    for (i, layer) in lens.layers.iter().enumerate() {
        println!(
            "layer {layer}: MSE {:.4} R² {:.4} (no norm: MSE {:.4})",
            lens.mse_per_layer[i], lens.r2_per_layer[i], lens.raw_mse_per_layer[i]
        );
    }
    println!("convergence layer (tau {}): {:?}", lens.tau, lens.convergence_layer);
    Ok(())
}
