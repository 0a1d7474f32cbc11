//! Captures every layer of a compound task into an activation store and
//! reads one record back.
//!
//! cargo run --example capture_activations -- [checkpoint]

use tabprobe::actstore::{ActStore, TokenSelection};
use tabprobe::adapter::{descriptor_digest, LayerSelection, ProbeableModel};
use tabprobe::synthgen::gen_compound;
use tabprobe::toymodel::{ModelConfig, ToyModel};

fn main() -> tabprobe::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => ProbeableModel::open(&format!("toy:{path}"))?,
        None => ProbeableModel::from_toy(ToyModel::new(ModelConfig::default())?, "untrained")?,
    };
    let (spec, ds) = gen_compound(128, 64, 1, None)?;
    let handle = model.fit_context(&ds)?;
    let root = tempfile_root();
    let mut store = ActStore::open(&root, "example", &descriptor_digest(model.descriptor()))?;
    store.record_dataset(&spec.digest())?;
    let records = model.capture(&handle, None, &LayerSelection::All, TokenSelection::All, "example")?;
    for r in &records {
        let key = store.put(r)?;
        println!("{key}: shape {:?}", r.shape);
    }
    let back = store.get(&records[3].key())?;
    assert_eq!(back, records[3]);
    println!("layer 3 read back bit-exactly from {}", root.display());
    Ok(())
}

fn tempfile_root() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("tabprobe-capture-{}", std::process::id()))
}
