//! End-to-end experiments: generate tasks, fit the model in context, capture
//! activations, then probe or lens across the layer × depth × seed grid.
//!
//! Run directory layout:
//!
//! ```text
//! {root}/{run_id}/manifest.json        activation store manifest
//! {root}/{run_id}/{fit}/L..            activation records
//! {root}/{run_id}/fits.json            fit digest -> task spec
//! {root}/{run_id}/results.jsonl        one ProbeResult per completed cell
//! {root}/{run_id}/errors.jsonl         cells that failed, with the error
//! {root}/{run_id}/lens.json            logit_lens runs only
//! {root}/{run_id}/summary.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::actstore::{atomic_write, ActStore, ActivationRecord, TokenSelection};
use crate::adapter::{LayerSelection, ModelDescriptor, ProbeableModel};
use crate::error::{Error, Result};
use crate::lens::{run_lens, LensResult, DEFAULT_TAU};
use crate::probekit::{
    build_crossfit, build_pertoken_target, build_withinfit, fit_probe, ProbeResult, ProbeSpec, ProbingDataset, TargetName,
};
use crate::synthgen::{self, TabularDataset, TaskFamily, TaskSpec, DEFAULT_COEFF_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CoeffCrossfit,
    CoeffSwitch,
    Intermediary,
    AnswerProbe,
    LogitLens,
    InputCopy,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::CoeffCrossfit => "coeff_crossfit",
            ExperimentKind::CoeffSwitch => "coeff_switch",
            ExperimentKind::Intermediary => "intermediary",
            ExperimentKind::AnswerProbe => "answer_probe",
            ExperimentKind::LogitLens => "logit_lens",
            ExperimentKind::InputCopy => "input_copy",
        }
    }

    fn default_family(self) -> TaskFamily {
        match self {
            ExperimentKind::CoeffCrossfit => TaskFamily::Linear,
            ExperimentKind::CoeffSwitch => TaskFamily::Switch,
            _ => TaskFamily::Compound,
        }
    }

    pub fn targets(self) -> Vec<TargetName> {
        match self {
            ExperimentKind::CoeffCrossfit | ExperimentKind::CoeffSwitch => vec![TargetName::Alpha, TargetName::Beta],
            ExperimentKind::Intermediary => vec![TargetName::Intermediary],
            ExperimentKind::AnswerProbe => vec![TargetName::Answer],
            ExperimentKind::LogitLens => vec![],
            ExperimentKind::InputCopy => {
                vec![TargetName::InputA, TargetName::InputB, TargetName::InputC, TargetName::InputAb]
            }
        }
    }

    fn default_tokens(self) -> TokenSelection {
        match self {
            ExperimentKind::AnswerProbe | ExperimentKind::InputCopy | ExperimentKind::LogitLens => TokenSelection::AnswerOnly,
            _ => TokenSelection::All,
        }
    }
}

/// Task parameters forwarded to the generators. Row counts are totals per
/// fit; switch tasks split them evenly across coefficient pairs. Unset counts
/// fall back to per-family defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    /// Overrides the experiment's default family where that is allowed.
    pub family: Option<TaskFamily>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub n_pairs: usize,
    /// Explicit switch table; drawn from `coeff_range` when absent.
    pub table: Option<Vec<(f64, f64)>>,
    pub n_fits: usize,
    pub coeff_range: (f64, f64),
    pub input_ranges: Option<Vec<(f64, f64)>>,
    pub seed: u64,
}

impl TaskParams {
    /// Train and test row totals for one fit of `family`.
    pub fn rows(&self, family: TaskFamily, crossfit: bool) -> (usize, usize) {
        let pairs = self.table.as_ref().map_or(self.n_pairs, Vec::len);
        let (train, test) = if crossfit { (128, 64) } else { synthgen::default_rows(family, pairs) };
        (self.n_train.unwrap_or(train), self.n_test.unwrap_or(test))
    }
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            family: None,
            n_train: None,
            n_test: None,
            n_pairs: 16,
            table: None,
            n_fits: 100,
            coeff_range: DEFAULT_COEFF_RANGE,
            input_ranges: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Backend string, `toy:<checkpoint>` or `tabpfn-v2[:<device>]`.
    pub model: String,
    pub task: TaskParams,
    pub layers: LayerSelection,
    pub depths: Vec<usize>,
    /// Probe split seeds.
    pub seeds: Vec<u64>,
    pub run_id: String,
    pub probe: ProbeSpec,
    /// Token selection override.
    pub tokens: Option<TokenSelection>,
    pub tau: f64,
    /// Worker threads for grid cells; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::CoeffSwitch,
            model: String::new(),
            task: TaskParams::default(),
            layers: LayerSelection::All,
            depths: vec![0, 1, 2, 3],
            seeds: vec![0, 1, 2],
            run_id: "run".into(),
            probe: ProbeSpec::default(),
            tokens: None,
            tau: DEFAULT_TAU,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn family(&self) -> TaskFamily {
        self.task.family.unwrap_or_else(|| self.experiment.default_family())
    }

    pub fn tokens(&self) -> TokenSelection {
        self.tokens.unwrap_or_else(|| self.experiment.default_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let family = self.family();
        let required = match self.experiment {
            ExperimentKind::CoeffCrossfit => Some(TaskFamily::Linear),
            ExperimentKind::CoeffSwitch => Some(TaskFamily::Switch),
            ExperimentKind::Intermediary | ExperimentKind::InputCopy => Some(TaskFamily::Compound),
            ExperimentKind::AnswerProbe | ExperimentKind::LogitLens => None,
        };
        if let Some(req) = required {
            if family != req {
                return Err(Error::Config(format!(
                    "{} needs the {req:?} family, got {family:?}",
                    self.experiment.as_str()
                )));
            }
        }
        if self.experiment != ExperimentKind::LogitLens {
            if self.depths.first() != Some(&0) || self.depths.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("depths must ascend from 0, got {:?}", self.depths)));
            }
            if self.seeds.is_empty() {
                return Err(Error::Config("at least one seed is required".into()));
            }
            self.probe.validate()?;
        }
        if self.experiment == ExperimentKind::CoeffSwitch && self.tokens() != TokenSelection::All {
            return Err(Error::Config("coeff_switch probes all tokens but the switch".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("invalid run id {:?}", self.run_id)));
        }
        if !(self.tau >= 1.0) {
            return Err(Error::Config(format!("tau must be >= 1, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One generated task together with its fit.
struct Fit {
    spec: TaskSpec,
    dataset: TabularDataset,
}

fn generate_fits(config: &ExperimentConfig) -> Result<Vec<Fit>> {
    let t = &config.task;
    let ranges = t.input_ranges.as_deref();
    let crossfit = config.experiment == ExperimentKind::CoeffCrossfit;
    let (n_train, n_test) = t.rows(config.family(), crossfit);
    let fits = match config.experiment {
        ExperimentKind::CoeffCrossfit => {
            synthgen::gen_crossfit_suite(t.n_fits, n_train, n_test, t.seed, ranges, t.coeff_range)?
        }
        _ => vec![match config.family() {
            TaskFamily::Linear => {
                let table = synthgen::random_switch_table(1, t.coeff_range, t.seed);
                synthgen::gen_linear(table[0].0, table[0].1, n_train, n_test, t.seed, ranges)?
            }
            TaskFamily::Compound => synthgen::gen_compound(n_train, n_test, t.seed, ranges)?,
            TaskFamily::Switch => {
                let table = match &t.table {
                    Some(tab) => tab.clone(),
                    None => synthgen::random_switch_table(t.n_pairs, t.coeff_range, t.seed ^ 0x7461_626c_65),
                };
                let s = table.len();
                if s == 0 || n_train % s != 0 || n_test % s != 0 {
                    return Err(Error::Config(format!(
                        "switch row counts ({}, {}) must be multiples of the {s} coefficient pairs",
                        n_train, n_test
                    )));
                }
                synthgen::gen_switch(&table, n_train / s, n_test / s, t.seed, ranges)?
            }
        }],
    };
    Ok(fits.into_iter().map(|(spec, dataset)| Fit { spec, dataset }).collect())
}

/// Status of one (target, layer, depth, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub target: String,
    pub layer: usize,
    pub depth: Option<usize>,
    pub seed: Option<u64>,
    pub status: String,
    pub r2_test: Option<f64>,
    pub mse_test: Option<f64>,
    pub r2_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub depth_fraction: f64,
    pub depth: usize,
    pub r2_mean: f64,
    pub r2_min: f64,
    pub r2_max: f64,
    pub r2_train_mean: Option<f64>,
    pub mse_mean: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Per target: depth-0 probe quality at each layer.
    pub by_layer: BTreeMap<String, Vec<CurvePoint>>,
    /// Per target: probe quality at each depth, at the best layer.
    pub by_depth: BTreeMap<String, Vec<CurvePoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub layer: usize,
    pub depth_fraction: f64,
    pub r2_test: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub fit_digest: String,
    pub spec_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub model: ModelDescriptor,
    pub config: ExperimentConfig,
    pub fits: Vec<FitInfo>,
    pub grid: Vec<GridCell>,
    pub curves: Curves,
    pub best: BTreeMap<String, Best>,
}

impl Summary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("summary.json");
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(format!("no summary.json in {}", run_dir.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn curve(&self, target: TargetName) -> Option<&[CurvePoint]> {
        self.curves.by_layer.get(target.as_str()).map(Vec::as_slice)
    }
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ErrorLine {
    target: String,
    layer: usize,
    depth: usize,
    seed: u64,
    error: String,
}

type CellKey = (String, usize, usize, u64);

/// Opens the model named in the config and runs the experiment.
pub fn run(config: &ExperimentConfig, root: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let model = ProbeableModel::open(&config.model)?;
    run_with_model(config, &model, root)
}

/// Runs the experiment on an already loaded model. Cells whose results are
/// already in the run directory are not recomputed.
pub fn run_with_model(config: &ExperimentConfig, model: &ProbeableModel, root: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let mut store = ActStore::open(root, &config.run_id, &crate::adapter::descriptor_digest(model.descriptor()))?;
    let run_dir = store.run_dir();
    let fits = generate_fits(config)?;
    let layers = config.layers.resolve(model.layer_count())?;

    let mut handles = Vec::with_capacity(fits.len());
    let mut fit_infos = Vec::with_capacity(fits.len());
    for fit in &fits {
        let handle = model.fit_context(&fit.dataset)?;
        store.record_dataset(&fit.spec.digest())?;
        fit_infos.push(FitInfo { fit_digest: handle.context_digest.clone(), spec_digest: fit.spec.digest() });
        handles.push(handle);
    }
    let fits_json: BTreeMap<&str, &TaskSpec> =
        fit_infos.iter().zip(&fits).map(|(i, f)| (i.fit_digest.as_str(), &f.spec)).collect();
    atomic_write(&run_dir.join("fits.json"), &serde_json::to_vec_pretty(&fits_json)?)?;

    if config.experiment == ExperimentKind::LogitLens {
        let lens = run_lens(model, &handles[0], None, config.tau)?;
        atomic_write(&run_dir.join("lens.json"), &serde_json::to_vec_pretty(&lens)?)?;
        let summary = lens_summary(config, model, fit_infos, &lens);
        write_summary(&run_dir, &summary)?;
        return Ok(RunOutcome { run_dir, summary });
    }

    // capture, reusing stored records from an earlier attempt
    let tokens = config.tokens();
    let mut records: Vec<Vec<ActivationRecord>> = Vec::with_capacity(handles.len());
    for handle in &handles {
        let keys: Vec<String> = layers
            .iter()
            .map(|&l| crate::actstore::record_key(&config.run_id, &handle.context_digest, l, tokens))
            .collect();
        let recs = if keys.iter().all(|k| store.contains(k)) {
            keys.iter().map(|k| store.get(k)).collect::<Result<Vec<_>>>()?
        } else {
            let recs = model.capture(handle, None, &LayerSelection::Layers(layers.clone()), tokens, &config.run_id)?;
            for r in &recs {
                store.put(r)?;
            }
            recs
        };
        records.push(recs);
    }

    let results_path = run_dir.join("results.jsonl");
    let mut done: BTreeMap<CellKey, ProbeResult> = BTreeMap::new();
    let spec_digests: BTreeSet<String> = config.depths.iter().map(|&d| ProbeSpec { depth: d, ..config.probe.clone() }.digest()).collect();
    if let Ok(text) = fs::read_to_string(&results_path) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            // a torn final line from an interrupted run is recomputed
            if let Ok(r) = serde_json::from_str::<ProbeResult>(line) {
                if spec_digests.contains(&r.spec_digest) {
                    done.insert((r.target_name.as_str().to_string(), r.layer, r.depth, r.split_seed), r);
                }
            }
        }
    }
    let _ = fs::remove_file(run_dir.join("errors.jsonl"));

    // one job per (target, layer); the probing dataset is shared by its cells
    let targets = config.experiment.targets();
    let jobs: Vec<(TargetName, usize)> =
        targets.iter().flat_map(|&t| (0..layers.len()).map(move |li| (t, li))).collect();
    let writer = Mutex::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results_path)
            .map_err(|e| Error::io(&results_path, e))?,
    );
    let errors: Mutex<Vec<ErrorLine>> = Mutex::new(Vec::new());
    let fresh: Mutex<Vec<ProbeResult>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = match config.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(jobs.len().max(1));

    let work = || {
        loop {
            let j = next.fetch_add(1, Ordering::Relaxed);
            let Some(&(target, li)) = jobs.get(j) else { break };
            let layer = layers[li];
            let pending: Vec<(usize, u64)> = config
                .seeds
                .iter()
                .flat_map(|&s| config.depths.iter().map(move |&d| (d, s)))
                .filter(|&(d, s)| !done.contains_key(&(target.as_str().to_string(), layer, d, s)))
                .collect();
            if pending.is_empty() {
                continue;
            }
            let data = build_dataset(config, &fits, &records, li, target);
            for (depth, seed) in pending {
                let outcome = data.as_ref().map_err(|e| e.to_string()).and_then(|data| {
                    fit_probe(data, &ProbeSpec { depth, ..config.probe.clone() }, seed).map_err(|e| e.to_string())
                });
                match outcome {
                    Ok(result) => {
                        if let Ok(line) = serde_json::to_string(&result) {
                            let mut w = writer.lock().expect("results writer poisoned");
                            let _ = writeln!(w, "{line}");
                        }
                        fresh.lock().expect("results poisoned").push(result);
                    }
                    Err(error) => {
                        log::warn!("{} layer {layer} depth {depth} seed {seed}: {error}", target.as_str());
                        errors.lock().expect("errors poisoned").push(ErrorLine {
                            target: target.as_str().to_string(),
                            layer,
                            depth,
                            seed,
                            error,
                        });
                    }
                }
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(work);
        }
        work();
    });
    drop(writer);

    for r in fresh.into_inner().expect("results poisoned") {
        done.insert((r.target_name.as_str().to_string(), r.layer, r.depth, r.split_seed), r);
    }
    let mut errors = errors.into_inner().expect("errors poisoned");
    errors.sort_by(|a, b| (&a.target, a.layer, a.depth, a.seed).cmp(&(&b.target, b.layer, b.depth, b.seed)));
    if !errors.is_empty() {
        let body: String = errors.iter().filter_map(|e| serde_json::to_string(e).ok()).map(|l| l + "\n").collect();
        atomic_write(&run_dir.join("errors.jsonl"), body.as_bytes())?;
    }

    let summary = probe_summary(config, model, fit_infos, &targets, &layers, &done, &errors);
    write_summary(&run_dir, &summary)?;
    Ok(RunOutcome { run_dir, summary })
}

fn build_dataset(
    config: &ExperimentConfig,
    fits: &[Fit],
    records: &[Vec<ActivationRecord>],
    li: usize,
    target: TargetName,
) -> Result<ProbingDataset> {
    match config.experiment {
        ExperimentKind::CoeffCrossfit => {
            let recs: Vec<ActivationRecord> = records.iter().map(|r| r[li].clone()).collect();
            let specs: Vec<TaskSpec> = fits.iter().map(|f| f.spec.clone()).collect();
            build_crossfit(&recs, &specs, target)
        }
        ExperimentKind::CoeffSwitch => build_withinfit(&records[0][li], &fits[0].dataset, &fits[0].spec, target),
        _ => build_pertoken_target(&records[0][li], &fits[0].dataset, target),
    }
}

fn write_summary(run_dir: &Path, summary: &Summary) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(summary)?;
    bytes.push(b'\n');
    atomic_write(&run_dir.join("summary.json"), &bytes)
}

fn fraction(layer: usize, layer_count: usize) -> f64 {
    layer as f64 / layer_count.max(1) as f64
}

fn point(layer: usize, depth: usize, layer_count: usize, results: &[&ProbeResult]) -> Option<CurvePoint> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let r2: Vec<f64> = results.iter().map(|r| r.r2_test).collect();
    Some(CurvePoint {
        layer,
        depth_fraction: fraction(layer, layer_count),
        depth,
        r2_mean: r2.iter().sum::<f64>() / n,
        r2_min: r2.iter().copied().fold(f64::INFINITY, f64::min),
        r2_max: r2.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        r2_train_mean: Some(results.iter().map(|r| r.r2_train).sum::<f64>() / n),
        mse_mean: results.iter().map(|r| r.mse_test).sum::<f64>() / n,
        n_seeds: results.len(),
    })
}

fn probe_summary(
    config: &ExperimentConfig,
    model: &ProbeableModel,
    fits: Vec<FitInfo>,
    targets: &[TargetName],
    layers: &[usize],
    done: &BTreeMap<CellKey, ProbeResult>,
    errors: &[ErrorLine],
) -> Summary {
    let layer_count = model.layer_count();
    let mut grid = Vec::new();
    let mut curves = Curves::default();
    let mut best = BTreeMap::new();
    for &target in targets {
        let name = target.as_str().to_string();
        for &layer in layers {
            for &depth in &config.depths {
                for &seed in &config.seeds {
                    let key = (name.clone(), layer, depth, seed);
                    let cell = match done.get(&key) {
                        Some(r) => GridCell {
                            target: name.clone(),
                            layer,
                            depth: Some(depth),
                            seed: Some(seed),
                            status: "ok".into(),
                            r2_test: Some(r.r2_test),
                            mse_test: Some(r.mse_test),
                            r2_train: Some(r.r2_train),
                            error: None,
                        },
                        None => {
                            let error = errors
                                .iter()
                                .find(|e| e.target == name && e.layer == layer && e.depth == depth && e.seed == seed)
                                .map(|e| e.error.clone())
                                .unwrap_or_else(|| "not run".into());
                            GridCell {
                                target: name.clone(),
                                layer,
                                depth: Some(depth),
                                seed: Some(seed),
                                status: "error".into(),
                                r2_test: None,
                                mse_test: None,
                                r2_train: None,
                                error: Some(error),
                            }
                        }
                    };
                    grid.push(cell);
                }
            }
        }
        let results_at = |layer: usize, depth: usize| -> Vec<&ProbeResult> {
            config.seeds.iter().filter_map(|&s| done.get(&(name.clone(), layer, depth, s))).collect()
        };
        let by_layer: Vec<CurvePoint> =
            layers.iter().filter_map(|&l| point(l, 0, layer_count, &results_at(l, 0))).collect();
        if let Some(top) = by_layer.iter().max_by(|a, b| a.r2_mean.total_cmp(&b.r2_mean).then(b.layer.cmp(&a.layer))) {
            let by_depth: Vec<CurvePoint> = config
                .depths
                .iter()
                .filter_map(|&d| point(top.layer, d, layer_count, &results_at(top.layer, d)))
                .collect();
            best.insert(
                name.clone(),
                Best { layer: top.layer, depth_fraction: top.depth_fraction, r2_test: top.r2_mean, convergence_layer: None },
            );
            curves.by_depth.insert(name.clone(), by_depth);
        }
        curves.by_layer.insert(name, by_layer);
    }
    Summary {
        experiment: config.experiment,
        model: model.descriptor().clone(),
        config: config.clone(),
        fits,
        grid,
        curves,
        best,
    }
}

fn lens_summary(config: &ExperimentConfig, model: &ProbeableModel, fits: Vec<FitInfo>, lens: &LensResult) -> Summary {
    let layer_count = model.layer_count();
    let grid = lens
        .layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| GridCell {
            target: "lens".into(),
            layer,
            depth: None,
            seed: None,
            status: "ok".into(),
            r2_test: Some(lens.r2_per_layer[i]),
            mse_test: Some(lens.mse_per_layer[i]),
            r2_train: None,
            error: None,
        })
        .collect();
    let curve: Vec<CurvePoint> = lens
        .layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| CurvePoint {
            layer,
            depth_fraction: fraction(layer, layer_count),
            depth: 0,
            r2_mean: lens.r2_per_layer[i],
            r2_min: lens.r2_per_layer[i],
            r2_max: lens.r2_per_layer[i],
            r2_train_mean: None,
            mse_mean: lens.mse_per_layer[i],
            n_seeds: 1,
        })
        .collect();
    let mut best = BTreeMap::new();
    if let Some(top) = curve.iter().max_by(|a, b| a.r2_mean.total_cmp(&b.r2_mean).then(b.layer.cmp(&a.layer))) {
        best.insert(
            "lens".to_string(),
            Best {
                layer: top.layer,
                depth_fraction: top.depth_fraction,
                r2_test: top.r2_mean,
                convergence_layer: lens.convergence_layer,
            },
        );
    }
    let mut curves = Curves::default();
    curves.by_layer.insert("lens".into(), curve);
    Summary {
        experiment: config.experiment,
        model: model.descriptor().clone(),
        config: config.clone(),
        fits,
        grid,
        curves,
        best,
    }
}

/// R² a probe or the lens must reach to count as decoding the answer.
pub const ANSWER_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub fit_digest: String,
    /// Earliest layer whose mean linear answer-probe test R² reaches the threshold.
    pub probe_layer: Option<usize>,
    /// Lens convergence layer; undefined when the final-layer lens R² stays
    /// below the threshold, since the lens then converges to no answer.
    pub lens_convergence_layer: Option<usize>,
    pub gap: Option<i64>,
    pub probe_before_lens: Option<bool>,
    pub threshold: f64,
}

/// Compares where the answer becomes linearly decodable with where the
/// output head starts to agree with the final prediction.
pub fn compare_answer_vs_lens(answer_run: &Path, lens_run: &Path) -> Result<OrderingReport> {
    let answer = Summary::load(answer_run)?;
    let lens_summary = Summary::load(lens_run)?;
    if answer.experiment != ExperimentKind::AnswerProbe {
        return Err(Error::Comparison(format!("{} is not an answer_probe run", answer_run.display())));
    }
    if lens_summary.experiment != ExperimentKind::LogitLens {
        return Err(Error::Comparison(format!("{} is not a logit_lens run", lens_run.display())));
    }
    let lens_path = lens_run.join("lens.json");
    let lens: LensResult =
        serde_json::from_slice(&fs::read(&lens_path).map_err(|e| Error::io(&lens_path, e))?)?;
    let answer_fits: Vec<&str> = answer.fits.iter().map(|f| f.fit_digest.as_str()).collect();
    if answer_fits != [lens.fit_digest.as_str()] {
        return Err(Error::Comparison(format!(
            "fit digests differ: answer run {answer_fits:?}, lens run {}",
            lens.fit_digest
        )));
    }
    let probe_layer = answer
        .curve(TargetName::Answer)
        .and_then(|c| c.iter().find(|p| p.r2_mean >= ANSWER_THRESHOLD))
        .map(|p| p.layer);
    let lens_ok = lens.r2_per_layer.last().is_some_and(|r| *r >= ANSWER_THRESHOLD);
    let lens_convergence_layer = if lens_ok { lens.convergence_layer } else { None };
    let gap = probe_layer.zip(lens_convergence_layer).map(|(p, l)| l as i64 - p as i64);
    Ok(OrderingReport {
        fit_digest: lens.fit_digest,
        probe_layer,
        lens_convergence_layer,
        gap,
        probe_before_lens: gap.map(|g| g > 0),
        threshold: ANSWER_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{ModelConfig, ToyModel};

    fn tiny_model() -> ProbeableModel {
        let toy = ToyModel::new(ModelConfig { n_layers: 2, embed_dim: 8, n_heads: 2, seed: 5, ..Default::default() }).unwrap();
        ProbeableModel::from_toy(toy, "memory").unwrap()
    }

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            task: TaskParams { n_train: Some(24), n_test: Some(40), n_pairs: 2, n_fits: 12, ..Default::default() },
            depths: vec![0, 1],
            seeds: vec![0, 1],
            probe: ProbeSpec { width: 8, max_epochs: 3, patience: 2, ..ProbeSpec::default() },
            workers: 1,
            run_id: kind.as_str().into(),
            ..Default::default()
        }
    }

    #[test]
    fn family_compatibility() {
        let mut c = small(ExperimentKind::Intermediary);
        c.task.family = Some(TaskFamily::Linear);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.task.family = None;
        assert!(c.validate().is_ok());
        let mut c = small(ExperimentKind::AnswerProbe);
        c.task.family = Some(TaskFamily::Linear);
        assert!(c.validate().is_ok());
        c.depths = vec![1, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn switch_run_enumerates_grid_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let config = small(ExperimentKind::CoeffSwitch);
        let first = run_with_model(&config, &model, dir.path()).unwrap();
        // 2 targets × 3 layers × 2 depths × 2 seeds
        assert_eq!(first.summary.grid.len(), 24);
        assert!(first.summary.grid.iter().all(|c| c.status == "ok"));
        assert_eq!(first.summary.curves.by_layer["alpha"].len(), 3);
        let bytes = fs::read(first.run_dir.join("summary.json")).unwrap();

        // drop half the results as if interrupted, then resume
        let results = fs::read_to_string(first.run_dir.join("results.jsonl")).unwrap();
        let kept: Vec<&str> = results.lines().take(10).collect();
        fs::write(first.run_dir.join("results.jsonl"), kept.join("\n") + "\n{\"torn").unwrap();
        let again = run_with_model(&config, &model, dir.path()).unwrap();
        assert_eq!(fs::read(again.run_dir.join("summary.json")).unwrap(), bytes);
    }

    #[test]
    fn errored_cells_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let mut config = small(ExperimentKind::InputCopy);
        // 12 held-out rows cannot support a probe
        config.task.n_test = Some(12);
        let out = run_with_model(&config, &model, dir.path()).unwrap();
        assert!(out.summary.grid.iter().all(|c| c.status == "error" && c.error.is_some()));
        assert!(out.run_dir.join("errors.jsonl").exists());
    }

    #[test]
    fn crossfit_and_lens_runs() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let mut c = small(ExperimentKind::CoeffCrossfit);
        c.depths = vec![0];
        c.task.n_fits = 24;
        let out = run_with_model(&c, &model, dir.path()).unwrap();
        assert_eq!(out.summary.fits.len(), 24);
        for c in &out.summary.grid {
            assert_eq!(c.status, "ok", "{:?}", c.error);
        }

        let lens = run_with_model(&small(ExperimentKind::LogitLens), &model, dir.path()).unwrap();
        assert!(lens.run_dir.join("lens.json").exists());
        assert!(lens.summary.best["lens"].convergence_layer.is_some());
    }

    #[test]
    fn comparison_checks_digests() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let answer = run_with_model(&small(ExperimentKind::AnswerProbe), &model, dir.path()).unwrap();
        let lens = run_with_model(&small(ExperimentKind::LogitLens), &model, dir.path()).unwrap();
        let report = compare_answer_vs_lens(&answer.run_dir, &lens.run_dir).unwrap();
        // untrained: neither threshold is reached
        assert_eq!(report.probe_layer, None);
        assert_eq!(report.lens_convergence_layer, None);
        assert_eq!(report.probe_before_lens, None);

        let mut other = small(ExperimentKind::LogitLens);
        other.task.seed = 99;
        other.run_id = "other".into();
        let other = run_with_model(&other, &model, dir.path()).unwrap();
        assert!(matches!(compare_answer_vs_lens(&answer.run_dir, &other.run_dir), Err(Error::Comparison(_))));
    }
}
