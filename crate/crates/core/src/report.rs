//! Renders a run directory into CSV tables and, with the `plot` feature, SVG
//! line plots (layer vs R², depth vs R², layer vs lens MSE).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::expharness::{GridCell, Summary};
use crate::lens::LensResult;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Build(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Build(format!("csv: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const GRID_HEADER: [&str; 7] = ["target", "layer", "depth", "seed", "status", "r2_test", "mse_test"];

fn grid_row(c: &GridCell) -> Vec<String> {
    vec![
        c.target.clone(),
        c.layer.to_string(),
        c.depth.map(|d| d.to_string()).unwrap_or_default(),
        c.seed.map(|s| s.to_string()).unwrap_or_default(),
        c.status.clone(),
        opt(c.r2_test),
        opt(c.mse_test),
    ]
}

/// Writes `by_layer.csv`, `by_depth.csv`, `lens.csv` (lens runs) and plots
/// into `out_dir`. Returns the files written.
pub fn render(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let summary = Summary::load(run_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    // depth-0 cells at every layer; grid order is already deterministic
    let by_layer: Vec<Vec<String>> = summary
        .grid
        .iter()
        .filter(|c| c.depth.unwrap_or(0) == 0)
        .map(grid_row)
        .collect();
    let path = out_dir.join("by_layer.csv");
    write_csv(&path, &GRID_HEADER, &by_layer)?;
    written.push(path);

    let by_depth: Vec<Vec<String>> = summary
        .grid
        .iter()
        .filter(|c| c.depth.is_some() && summary.best.get(&c.target).is_some_and(|b| b.layer == c.layer))
        .map(grid_row)
        .collect();
    let path = out_dir.join("by_depth.csv");
    write_csv(&path, &GRID_HEADER, &by_depth)?;
    written.push(path);

    let lens_path = run_dir.join("lens.json");
    let lens: Option<LensResult> = match fs::read(&lens_path) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    if let Some(lens) = &lens {
        let rows: Vec<Vec<String>> = lens
            .layers
            .iter()
            .enumerate()
            .map(|(i, &layer)| {
                vec![
                    layer.to_string(),
                    lens.mse_per_layer[i].to_string(),
                    lens.r2_per_layer[i].to_string(),
                    lens.convergence_layer.is_some_and(|c| layer >= c).to_string(),
                ]
            })
            .collect();
        let path = out_dir.join("lens.csv");
        write_csv(&path, &["layer", "mse", "r2", "converged"], &rows)?;
        written.push(path);
    }

    #[cfg(feature = "plot")]
    match plots::draw(&summary, lens.as_ref(), out_dir) {
        Ok(files) => written.extend(files),
        Err(e) => log::warn!("plots skipped: {e}"),
    }
    #[cfg(not(feature = "plot"))]
    log::warn!("built without the plot feature; wrote CSV only");

    Ok(written)
}

#[cfg(feature = "plot")]
mod plots {
    use std::path::{Path, PathBuf};

    use plotters::prelude::*;

    use crate::expharness::{CurvePoint, Summary};
    use crate::lens::LensResult;

    type Series = (String, Vec<(f64, f64)>);

    fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<(), String> {
        let points = series.iter().flat_map(|(_, p)| p.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points.filter(|(_, y)| y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Err(format!("{title}: nothing to plot"));
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
            .map_err(|e| e.to_string())?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| e.to_string())?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| e.to_string())?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| e.to_string())?;
        root.present().map_err(|e| e.to_string())
    }

    fn curve(points: &[CurvePoint], x: impl Fn(&CurvePoint) -> f64, y: impl Fn(&CurvePoint) -> f64) -> Vec<(f64, f64)> {
        points.iter().map(|p| (x(p), y(p))).collect()
    }

    pub fn draw(summary: &Summary, lens: Option<&LensResult>, out: &Path) -> Result<Vec<PathBuf>, String> {
        let mut files = Vec::new();
        let name = summary.experiment.as_str();
        if let Some(lens) = lens {
            let pts: Vec<(f64, f64)> = lens.layers.iter().map(|&l| l as f64).zip(lens.mse_per_layer.iter().copied()).collect();
            let raw: Vec<(f64, f64)> =
                lens.layers.iter().map(|&l| l as f64).zip(lens.raw_mse_per_layer.iter().copied()).collect();
            let path = out.join("lens_mse.svg");
            line_plot(
                &path,
                "logit lens",
                "layer",
                "MSE",
                &[(lens.normalization_variant.clone(), pts), ("no norm".into(), raw)],
            )?;
            files.push(path);
            return Ok(files);
        }
        let layer_series = |y: &dyn Fn(&CurvePoint) -> f64| -> Vec<Series> {
            summary
                .curves
                .by_layer
                .iter()
                .map(|(t, c)| (t.clone(), curve(c, |p| p.layer as f64, y)))
                .collect()
        };
        for (file, label, y) in [
            ("by_layer_r2.svg", "test R²", &(|p: &CurvePoint| p.r2_mean) as &dyn Fn(&CurvePoint) -> f64),
            ("by_layer_mse.svg", "test MSE", &|p: &CurvePoint| p.mse_mean),
        ] {
            let path = out.join(file);
            line_plot(&path, &format!("{name}: linear probe by layer"), "layer", label, &layer_series(y))?;
            files.push(path);
        }
        let depth_series: Vec<Series> = summary
            .curves
            .by_depth
            .iter()
            .map(|(t, c)| (t.clone(), curve(c, |p| p.depth as f64, |p| p.r2_mean)))
            .collect();
        if depth_series.iter().any(|(_, p)| p.len() > 1) {
            let path = out.join("by_depth_r2.svg");
            line_plot(&path, &format!("{name}: probe depth at best layer"), "probe depth", "test R²", &depth_series)?;
            files.push(path);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_summary_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(render(dir.path(), &dir.path().join("out")), Err(Error::NotFound(_))));
    }
}
