//! Renders CSV tables and SVG plots for an existing run directory.
//!
//! cargo run --example render_report -- <run_dir> [out_dir]

use std::path::PathBuf;

fn main() -> tabprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(run) = args.next().map(PathBuf::from) else {
        eprintln!("usage: render_report <run_dir> [out_dir]");
        std::process::exit(2);
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| run.join("report"));
    for f in tabprobe::report::render(&run, &out)? {
        println!("{}", f.display());
    }
    Ok(())
}
