//! Command-line driver. Every subcommand reads an optional JSON `--config`;
//! flags given on the command line override it. Logs go to stderr, outputs
//! to files under the data root (`TABPROBE_DATA_DIR`, default `./runs`).
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::actstore::{atomic_write, ActStore, TokenSelection};
use crate::adapter::{data_root, LayerSelection, ProbeableModel};
use crate::error::{Error, Result};
use crate::expharness::{self, ExperimentConfig, ExperimentKind};
use crate::lens::{run_lens, DEFAULT_TAU};
use crate::probekit::{build_pertoken_target, build_withinfit, complexity_sweep, ProbeSpec, TargetName};
use crate::report;
use crate::synthgen::{self, CoefficientRow, TabularDataset, TaskFamily, TaskSpec, DEFAULT_COEFF_RANGE, DEFAULT_INPUT_RANGE};
use crate::toymodel::{meta_train, save_checkpoint, ModelConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "tabprobe", version, about = "Probe and lens tabular in-context-learning transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the stochastic parts of the stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_family)]
        family: Option<TaskFamily>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Output directory (default: <data root>/datasets/<digest>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meta-train the toy model on the synthetic prior.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint path (default: <data root>/models/toy.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Capture per-layer activations into the activation store.
    Capture {
        #[command(flatten)]
        common: Common,
        /// `toy:<checkpoint>` or `tabpfn-v2[:<device>]`.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, value_parser = parse_tokens)]
        tokens: Option<TokenSelection>,
    },
    /// Train probes on stored activations.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_target)]
        target: Option<TargetName>,
        #[arg(long, value_parser = parse_tokens)]
        tokens: Option<TokenSelection>,
    },
    /// Decode every layer with the model's output head.
    Lens {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run a full experiment over the layer × depth × seed grid.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, value_parser = parse_experiment)]
        experiment: Option<ExperimentKind>,
    },
    /// Compare answer-probe decodability with lens convergence.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Run id (or directory) of an answer_probe experiment.
        #[arg(long)]
        answer_run: Option<String>,
        /// Run id (or directory) of a logit_lens experiment.
        #[arg(long)]
        lens_run: Option<String>,
        /// Report path (default: <lens run>/compare.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a run into CSV tables and plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run id (or directory).
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_json_word<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<TaskFamily, String> {
    parse_json_word(s)
}

fn parse_tokens(s: &str) -> std::result::Result<TokenSelection, String> {
    parse_json_word(s)
}

fn parse_target(s: &str) -> std::result::Result<TargetName, String> {
    parse_json_word(s)
}

fn parse_experiment(s: &str) -> std::result::Result<ExperimentKind, String> {
    parse_json_word(s)
}

/// Config problems the user must fix before anything runs.
struct Usage(String);

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Usage> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub family: TaskFamily,
    /// Row totals; per-family defaults when unset.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    /// Linear coefficients; drawn from `coeff_range` when absent.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Switch table; drawn when absent.
    pub table: Option<Vec<(f64, f64)>>,
    pub n_pairs: usize,
    pub coeff_range: (f64, f64),
    pub input_ranges: Option<Vec<(f64, f64)>>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::Linear,
            n_train: None,
            n_test: None,
            alpha: None,
            beta: None,
            table: None,
            n_pairs: 16,
            coeff_range: DEFAULT_COEFF_RANGE,
            input_ranges: None,
            noise_sigma: 0.0,
            seed: 0,
            out: None,
        }
    }
}

impl GenConfig {
    pub fn spec(&self) -> TaskSpec {
        let drawn = synthgen::random_switch_table(self.n_pairs.max(1), self.coeff_range, self.seed ^ 0x636f_6566);
        let table: Vec<(f64, f64)> = match self.family {
            TaskFamily::Compound => Vec::new(),
            TaskFamily::Linear => vec![(self.alpha.unwrap_or(drawn[0].0), self.beta.unwrap_or(drawn[0].1))],
            TaskFamily::Switch => self.table.clone().unwrap_or(drawn),
        };
        let pairs = table.len().max(1);
        let (n_train, n_test) = synthgen::default_rows(self.family, pairs);
        let (n_train, n_test) = (self.n_train.unwrap_or(n_train), self.n_test.unwrap_or(n_test));
        TaskSpec {
            family: self.family,
            coefficient_table: table
                .iter()
                .enumerate()
                .map(|(u, &(alpha, beta))| CoefficientRow { switch_id: u as u32, alpha, beta })
                .collect(),
            input_ranges: self
                .input_ranges
                .clone()
                .unwrap_or_else(|| vec![DEFAULT_INPUT_RANGE; if self.family == TaskFamily::Compound { 3 } else { 2 }]),
            n_train,
            n_test,
            seed: self.seed,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainToyConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub model: String,
    pub dataset: Option<PathBuf>,
    pub run_id: String,
    pub layers: LayerSelection,
    pub tokens: TokenSelection,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            model: String::new(),
            dataset: None,
            run_id: "capture".into(),
            layers: LayerSelection::All,
            tokens: TokenSelection::All,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeCmdConfig {
    pub run_id: String,
    pub dataset: Option<PathBuf>,
    /// Fit digest inside the run; may be omitted when the run holds one fit.
    pub fit: Option<String>,
    pub target: TargetName,
    /// Which stored records to use; inferred from the run when unset.
    pub tokens: Option<TokenSelection>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub probe: ProbeSpec,
}

impl Default for ProbeCmdConfig {
    fn default() -> Self {
        Self {
            run_id: "capture".into(),
            dataset: None,
            fit: None,
            target: TargetName::Answer,
            tokens: None,
            depths: vec![0],
            seeds: vec![0, 1, 2],
            probe: ProbeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LensCmdConfig {
    pub model: String,
    pub dataset: Option<PathBuf>,
    pub run_id: String,
    pub tau: f64,
}

impl Default for LensCmdConfig {
    fn default() -> Self {
        Self { model: String::new(), dataset: None, run_id: "lens".into(), tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub answer_run: Option<String>,
    pub lens_run: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub run: Option<String>,
    pub out: Option<PathBuf>,
}

fn run_dir(root: &Path, run: &str) -> PathBuf {
    let p = Path::new(run);
    if p.is_dir() && p.join("summary.json").exists() {
        p.to_path_buf()
    } else {
        root.join(run)
    }
}

fn require<T>(value: Option<T>, what: &str) -> std::result::Result<T, Usage> {
    value.ok_or_else(|| Usage(format!("missing {what} (flag or config field)")))
}

fn require_str(value: String, what: &str) -> std::result::Result<String, Usage> {
    if value.is_empty() {
        Err(Usage(format!("missing {what} (flag or config field)")))
    } else {
        Ok(value)
    }
}

fn load_dataset(dir: &Path) -> Result<(TaskSpec, TabularDataset)> {
    TabularDataset::load(dir)
}

enum Outcome {
    Done,
    Usage(String),
}

impl From<Usage> for Outcome {
    fn from(u: Usage) -> Self {
        Outcome::Usage(u.0)
    }
}

macro_rules! usage {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(u) => return Ok(Outcome::from(u)),
        }
    };
}

fn execute(command: Command) -> Result<Outcome> {
    let root = data_root();
    match command {
        Command::Gen { common, family, n_train, n_test, out } => {
            let mut c: GenConfig = usage!(load_config(common.config.as_deref()));
            if let Some(f) = family {
                c.family = f;
            }
            if let Some(n) = n_train {
                c.n_train = Some(n);
            }
            if let Some(n) = n_test {
                c.n_test = Some(n);
            }
            if let Some(s) = common.seed {
                c.seed = s;
            }
            if out.is_some() {
                c.out = out;
            }
            let spec = c.spec();
            let ds = synthgen::generate(&spec)?;
            let dir = c.out.clone().unwrap_or_else(|| root.join("datasets").join(spec.digest()));
            ds.save(&spec, &dir)?;
            log::info!("wrote {} rows to {}", ds.n_rows(), dir.display());
        }
        Command::TrainToy { common, steps, out } => {
            let mut c: TrainToyConfig = usage!(load_config(common.config.as_deref()));
            if let Some(s) = steps {
                c.train.n_steps = s;
            }
            if let Some(s) = common.seed {
                c.train.seed = s;
                c.model.seed = s;
            }
            if out.is_some() {
                c.out = out;
            }
            let path = c.out.clone().unwrap_or_else(|| root.join("models").join("toy.ckpt"));
            let (model, state) = meta_train(c.model.clone(), &c.train)?;
            save_checkpoint(&model, &path)?;
            let state_path = path.with_file_name("train_state.json");
            atomic_write(&state_path, &serde_json::to_vec_pretty(&state)?)?;
            log::info!("checkpoint {} ({} steps, digest {})", path.display(), state.step, state.param_digest);
        }
        Command::Capture { common, model, dataset, run_id, tokens } => {
            let mut c: CaptureConfig = usage!(load_config(common.config.as_deref()));
            if let Some(m) = model {
                c.model = m;
            }
            if dataset.is_some() {
                c.dataset = dataset;
            }
            if let Some(r) = run_id {
                c.run_id = r;
            }
            if let Some(t) = tokens {
                c.tokens = t;
            }
            let backend = usage!(require_str(c.model.clone(), "--model"));
            let dir = usage!(require(c.dataset.clone(), "--dataset"));
            let model = ProbeableModel::open(&backend)?;
            let (spec, ds) = load_dataset(&dir)?;
            let handle = model.fit_context(&ds)?;
            let mut store = ActStore::open(&root, &c.run_id, &crate::adapter::descriptor_digest(model.descriptor()))?;
            store.record_dataset(&spec.digest())?;
            for r in model.capture(&handle, None, &c.layers, c.tokens, &c.run_id)? {
                let key = store.put(&r)?;
                log::info!("stored {key}");
            }
        }
        Command::Probe { common, run_id, dataset, target, tokens } => {
            let mut c: ProbeCmdConfig = usage!(load_config(common.config.as_deref()));
            if let Some(r) = run_id {
                c.run_id = r;
            }
            if dataset.is_some() {
                c.dataset = dataset;
            }
            if let Some(t) = target {
                c.target = t;
            }
            if tokens.is_some() {
                c.tokens = tokens;
            }
            if let Some(s) = common.seed {
                c.probe.seed = s;
            }
            let dir = usage!(require(c.dataset.clone(), "--dataset"));
            let (spec, ds) = load_dataset(&dir)?;
            let store = ActStore::open_existing(&root, &c.run_id)?;
            let all_keys = store.list("");
            let has = |sel: TokenSelection| all_keys.iter().any(|k| k.ends_with(&format!("_{}", sel.key_part())));
            let tokens = c.tokens.unwrap_or(if has(TokenSelection::All) { TokenSelection::All } else { TokenSelection::AnswerOnly });
            let suffix = format!("_{}", tokens.key_part());
            let keys: Vec<String> = all_keys.into_iter().filter(|k| k.ends_with(&suffix)).collect();
            let fits: std::collections::BTreeSet<&str> = keys.iter().filter_map(|k| k.split('/').nth(1)).collect();
            let fit = match (&c.fit, fits.len()) {
                (Some(f), _) => f.clone(),
                (None, 1) => fits.iter().next().unwrap().to_string(),
                (None, n) => return Err(Error::Selection(format!("run holds {n} fits; set `fit` in the config"))),
            };
            let mut lines = String::new();
            for key in keys.iter().filter(|k| k.split('/').nth(1) == Some(fit.as_str())) {
                let record = store.get(key)?;
                let data = match c.target {
                    TargetName::Alpha | TargetName::Beta => build_withinfit(&record, &ds, &spec, c.target)?,
                    t => build_pertoken_target(&record, &ds, t)?,
                };
                for r in complexity_sweep(&data, &c.depths, &c.seeds, &c.probe)? {
                    log::info!("layer {} depth {} seed {}: test R² {:.4}", r.layer, r.depth, r.split_seed, r.r2_test);
                    lines.push_str(&serde_json::to_string(&r)?);
                    lines.push('\n');
                }
            }
            let out = store.run_dir().join(format!("probe_{}.jsonl", c.target.as_str()));
            atomic_write(&out, lines.as_bytes())?;
            log::info!("wrote {}", out.display());
        }
        Command::Lens { common, model, dataset, run_id } => {
            let mut c: LensCmdConfig = usage!(load_config(common.config.as_deref()));
            if let Some(m) = model {
                c.model = m;
            }
            if dataset.is_some() {
                c.dataset = dataset;
            }
            if let Some(r) = run_id {
                c.run_id = r;
            }
            let backend = usage!(require_str(c.model.clone(), "--model"));
            let dir = usage!(require(c.dataset.clone(), "--dataset"));
            let model = ProbeableModel::open(&backend)?;
            let (_, ds) = load_dataset(&dir)?;
            let handle = model.fit_context(&ds)?;
            let lens = run_lens(&model, &handle, None, c.tau)?;
            let out = root.join(&c.run_id).join("lens.json");
            atomic_write(&out, &serde_json::to_vec_pretty(&lens)?)?;
            log::info!("convergence layer {:?}; wrote {}", lens.convergence_layer, out.display());
        }
        Command::Experiment { common, run_id, model, experiment } => {
            let mut c: ExperimentConfig = usage!(load_config(common.config.as_deref()));
            if let Some(r) = run_id {
                c.run_id = r;
            }
            if let Some(m) = model {
                c.model = m;
            }
            if let Some(e) = experiment {
                c.experiment = e;
            }
            if let Some(s) = common.seed {
                c.task.seed = s;
            }
            usage!(require_str(c.model.clone(), "--model"));
            let out = expharness::run(&c, &root)?;
            let failed = out.summary.grid.iter().filter(|g| g.status != "ok").count();
            if failed > 0 {
                log::warn!("{failed} grid cells failed; see errors.jsonl");
            }
            log::info!("wrote {}", out.run_dir.join("summary.json").display());
        }
        Command::Compare { common, answer_run, lens_run, out } => {
            let mut c: CompareConfig = usage!(load_config(common.config.as_deref()));
            if answer_run.is_some() {
                c.answer_run = answer_run;
            }
            if lens_run.is_some() {
                c.lens_run = lens_run;
            }
            if out.is_some() {
                c.out = out;
            }
            let answer = run_dir(&root, &usage!(require(c.answer_run.clone(), "--answer-run")));
            let lens = run_dir(&root, &usage!(require(c.lens_run.clone(), "--lens-run")));
            let report = expharness::compare_answer_vs_lens(&answer, &lens)?;
            let path = c.out.clone().unwrap_or_else(|| lens.join("compare.json"));
            atomic_write(&path, &serde_json::to_vec_pretty(&report)?)?;
            log::info!(
                "answer probe layer {:?}, lens convergence {:?}; wrote {}",
                report.probe_layer,
                report.lens_convergence_layer,
                path.display()
            );
        }
        Command::Report { common, run, out } => {
            let mut c: ReportConfig = usage!(load_config(common.config.as_deref()));
            if run.is_some() {
                c.run = run;
            }
            if out.is_some() {
                c.out = out;
            }
            let dir = run_dir(&root, &usage!(require(c.run.clone(), "--run")));
            let out = c.out.clone().unwrap_or_else(|| dir.join("report"));
            for f in report::render(&dir, &out)? {
                log::info!("wrote {}", f.display());
            }
        }
    }
    Ok(Outcome::Done)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["tabprobe", "frobnicate"]), 2);
        assert_eq!(run(["tabprobe", "gen", "--bogus"]), 2);
        assert_eq!(run(["tabprobe", "capture"]), 2);
        assert_eq!(run(["tabprobe", "report", "--config", "/no/such/config.json"]), 2);
    }

    #[test]
    fn domain_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let run_arg = dir.path().join("empty");
        std::fs::create_dir_all(&run_arg).unwrap();
        assert_eq!(run(["tabprobe", "report", "--run", run_arg.to_str().unwrap()]), 1);
    }

    #[test]
    fn gen_writes_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let code = run([
            "tabprobe", "gen", "--family", "switch", "--n-train", "32", "--n-test", "16", "--seed", "3", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let (spec, ds) = TabularDataset::load(&out).unwrap();
        assert_eq!(spec.seed, 3);
        assert_eq!(ds.n_rows(), 48);
        assert!(ds.switch_column().is_some());
    }
}
