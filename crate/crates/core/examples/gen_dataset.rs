//! Generates one dataset per task family and prints a few rows.
//!
//! cargo run --example gen_dataset -- [out_dir]

use std::path::PathBuf;

use tabprobe::synthgen::{gen_compound, gen_linear, gen_switch, random_switch_table, Split};

fn main() -> tabprobe::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tabprobe-gen"));
    let table = random_switch_table(4, (-2.0, 2.0), 7);
    let sets = [
        ("linear", gen_linear(1.5, -0.5, 32, 8, 0, None)?),
        ("switch", gen_switch(&table, 8, 2, 0, None)?),
        ("compound", gen_compound(32, 8, 0, None)?),
    ];
    for (name, (spec, ds)) in &sets {
        let dir = out.join(name);
        ds.save(spec, &dir)?;
        println!("{name}: {} train / {} test rows, features {:?}, digest {}", ds.n_train(), ds.n_test(), ds.feature_names, spec.digest());
        for &i in ds.rows_in(Split::Test).iter().take(3) {
            println!("  x={:?} z={:.4}", ds.row(i), ds.z[i]);
        }
        println!("  saved to {}", dir.display());
    }
    Ok(())
}
