//! Seeded synthetic regression tasks: linear, switch and compound families.
//!
//! Every generator is a pure function of its arguments. Rows are drawn from a
//! ChaCha stream keyed by the seed, so the same call always produces the same
//! bytes on every platform.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};

/// Default per-feature input range.
pub const DEFAULT_INPUT_RANGE: (f64, f64) = (-1.0, 1.0);
/// Default range coefficients are drawn from.
pub const DEFAULT_COEFF_RANGE: (f64, f64) = (-2.0, 2.0);

/// Default (train, test) row totals for one fit: 64 train and 16 test rows
/// per coefficient pair for switch tasks, 512/256 otherwise.
pub fn default_rows(family: TaskFamily, n_pairs: usize) -> (usize, usize) {
    match family {
        TaskFamily::Switch => (64 * n_pairs, 16 * n_pairs),
        _ => (512, 256),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Linear,
    Switch,
    Compound,
}

impl TaskFamily {
    /// Number of feature columns the family produces.
    pub fn n_features(self) -> usize {
        match self {
            TaskFamily::Linear => 2,
            TaskFamily::Switch | TaskFamily::Compound => 3,
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            TaskFamily::Linear => &["x", "y"],
            TaskFamily::Switch => &["x", "y", "u"],
            TaskFamily::Compound => &["a", "b", "c"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub switch_id: u32,
    pub alpha: f64,
    pub beta: f64,
}

/// Declarative description of one generated task.
///
/// `n_train` and `n_test` are total row counts; for the switch family they are
/// the per-pair counts multiplied by the number of pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub coefficient_table: Vec<CoefficientRow>,
    pub input_ranges: Vec<(f64, f64)>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl TaskSpec {
    pub fn digest(&self) -> String {
        digest::json_digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 {
            return Err(Error::Config(format!("n_train must be >= 2, got {}", self.n_train)));
        }
        if self.n_test < 1 {
            return Err(Error::Config("n_test must be >= 1".into()));
        }
        let n_ranged = match self.family {
            TaskFamily::Linear | TaskFamily::Switch => 2,
            TaskFamily::Compound => 3,
        };
        if self.input_ranges.len() != n_ranged {
            return Err(Error::Config(format!(
                "{:?} family needs {n_ranged} input ranges, got {}",
                self.family,
                self.input_ranges.len()
            )));
        }
        for (i, &(lo, hi)) in self.input_ranges.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("input range {i} is not low < high: ({lo}, {hi})")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        match self.family {
            TaskFamily::Linear => {
                if self.coefficient_table.len() != 1 {
                    return Err(Error::Config("linear family takes exactly one (alpha, beta)".into()));
                }
            }
            TaskFamily::Compound => {
                if !self.coefficient_table.is_empty() {
                    return Err(Error::Config("compound family has no coefficient table".into()));
                }
            }
            TaskFamily::Switch => validate_switch_table(&self.coefficient_table)?,
        }
        for row in &self.coefficient_table {
            if !row.alpha.is_finite() || !row.beta.is_finite() {
                return Err(Error::Config("coefficients must be finite".into()));
            }
        }
        Ok(())
    }
}

fn validate_switch_table(table: &[CoefficientRow]) -> Result<()> {
    if table.len() < 2 {
        return Err(Error::Config("switch table needs at least 2 coefficient pairs".into()));
    }
    for (i, row) in table.iter().enumerate() {
        if row.switch_id as usize != i {
            return Err(Error::Config(format!(
                "switch ids must be consecutive from 0, found {} at position {i}",
                row.switch_id
            )));
        }
    }
    for (i, a) in table.iter().enumerate() {
        for b in &table[i + 1..] {
            if a.alpha == b.alpha && a.beta == b.beta {
                return Err(Error::Config(format!(
                    "duplicate coefficient pair ({}, {}) for switch ids {} and {}",
                    a.alpha, a.beta, a.switch_id, b.switch_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Input,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Realized rows of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub feature_names: Vec<String>,
    /// Row-major `n_rows × n_features`.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub column_roles: Vec<ColumnRole>,
    pub split: Vec<Split>,
    /// `a·b` per row, compound family only.
    pub intermediaries: Option<Vec<f64>>,
    pub spec_digest: String,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.z.len()
    }

    pub fn n_features(&self) -> usize {
        self.column_roles.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn switch_column(&self) -> Option<usize> {
        self.column_roles.iter().position(|r| *r == ColumnRole::Switch)
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn n_train(&self) -> usize {
        self.split.iter().filter(|s| **s == Split::Train).count()
    }

    pub fn n_test(&self) -> usize {
        self.n_rows() - self.n_train()
    }

    /// Column `j` over all rows.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    /// Writes `data.csv` and `spec.json` into `dir`.
    pub fn save(&self, spec: &TaskSpec, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::new();
        for name in &self.feature_names {
            csv.push_str(name);
            csv.push(',');
        }
        csv.push_str("z,split");
        if self.intermediaries.is_some() {
            csv.push_str(",intermediary");
        }
        csv.push('\n');
        for i in 0..self.n_rows() {
            for v in self.row(i) {
                write!(csv, "{v},").unwrap();
            }
            write!(csv, "{},{}", self.z[i], self.split[i].as_str()).unwrap();
            if let Some(m) = &self.intermediaries {
                write!(csv, ",{}", m[i]).unwrap();
            }
            csv.push('\n');
        }
        let path = dir.join("data.csv");
        fs::write(&path, csv).map_err(|e| Error::io(path, e))?;

        let mut value = serde_json::to_value(spec)?;
        value["digest"] = serde_json::Value::String(spec.digest());
        let path = dir.join("spec.json");
        fs::write(&path, serde_json::to_string_pretty(&value)?).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a dataset directory written by [`TabularDataset::save`].
    pub fn load(dir: &Path) -> Result<(TaskSpec, TabularDataset)> {
        let path = dir.join("spec.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text)?;
        let path = dir.join("data.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Schema("empty data.csv".into()))?
            .split(',')
            .collect();
        let z_col = header
            .iter()
            .position(|h| *h == "z")
            .ok_or_else(|| Error::Schema("data.csv lacks a z column".into()))?;
        let has_mid = header.last() == Some(&"intermediary");
        let feature_names: Vec<String> = header[..z_col].iter().map(|s| s.to_string()).collect();
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut split = Vec::new();
        let mut mids = Vec::new();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Schema(format!("unparseable number {s:?} in data.csv")))
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::Schema(format!("ragged row in data.csv: {line}")));
            }
            for c in &cells[..z_col] {
                x.push(parse(c)?);
            }
            z.push(parse(cells[z_col])?);
            split.push(match cells[z_col + 1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Schema(format!("unknown split {other:?}"))),
            });
            if has_mid {
                mids.push(parse(cells[z_col + 2])?);
            }
        }
        let column_roles = feature_names
            .iter()
            .map(|n| if spec.family == TaskFamily::Switch && n == "u" { ColumnRole::Switch } else { ColumnRole::Input })
            .collect();
        let ds = TabularDataset {
            feature_names,
            x,
            z,
            column_roles,
            split,
            intermediaries: has_mid.then_some(mids),
            spec_digest: spec.digest(),
        };
        Ok((spec, ds))
    }
}

fn sample_inputs(rng: &mut ChaCha8Rng, ranges: &[(f64, f64)]) -> Vec<f64> {
    ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
    } else {
        0.0
    }
}

/// Realizes any validated spec.
pub fn generate(spec: &TaskSpec) -> Result<TabularDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Separate stream so the noise knob never shifts the sampled inputs.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_655f_7267);
    let family = spec.family;
    let names: Vec<String> = family.feature_names().iter().map(|s| s.to_string()).collect();
    let d = family.n_features();
    let n = spec.n_train + spec.n_test;
    let mut x = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut mids = Vec::new();
    let mut roles = vec![ColumnRole::Input; d];

    match family {
        TaskFamily::Linear => {
            let c = spec.coefficient_table[0];
            for i in 0..n {
                let v = sample_inputs(&mut rng, &spec.input_ranges);
                z.push(c.alpha * v[0] + c.beta * v[1] + noise(&mut noise_rng, spec.noise_sigma));
                x.extend_from_slice(&v);
                split.push(if i < spec.n_train { Split::Train } else { Split::Test });
            }
        }
        TaskFamily::Compound => {
            for i in 0..n {
                let v = sample_inputs(&mut rng, &spec.input_ranges);
                let ab = v[0] * v[1];
                mids.push(ab);
                z.push(ab + v[2] + noise(&mut noise_rng, spec.noise_sigma));
                x.extend_from_slice(&v);
                split.push(if i < spec.n_train { Split::Train } else { Split::Test });
            }
        }
        TaskFamily::Switch => {
            roles[2] = ColumnRole::Switch;
            let s = spec.coefficient_table.len();
            if spec.n_train % s != 0 || spec.n_test % s != 0 {
                return Err(Error::Config(format!(
                    "switch row counts ({}, {}) must be multiples of the {s} pairs",
                    spec.n_train, spec.n_test
                )));
            }
            // Stratified: every pair contributes the same number of rows to
            // each split; the order within each split is a seeded shuffle.
            for (count, which) in [(spec.n_train / s, Split::Train), (spec.n_test / s, Split::Test)] {
                let mut ids: Vec<usize> = (0..s).flat_map(|u| std::iter::repeat_n(u, count)).collect();
                shuffle(&mut rng, &mut ids);
                for u in ids {
                    let c = spec.coefficient_table[u];
                    let v = sample_inputs(&mut rng, &spec.input_ranges);
                    z.push(c.alpha * v[0] + c.beta * v[1] + noise(&mut noise_rng, spec.noise_sigma));
                    x.extend_from_slice(&[v[0], v[1], u as f64]);
                    split.push(which);
                }
            }
        }
    }

    Ok(TabularDataset {
        feature_names: names,
        x,
        z,
        column_roles: roles,
        split,
        intermediaries: (family == TaskFamily::Compound).then_some(mids),
        spec_digest: spec.digest(),
    })
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn default_ranges(ranges: Option<&[(f64, f64)]>, n: usize) -> Vec<(f64, f64)> {
    ranges.map(<[_]>::to_vec).unwrap_or_else(|| vec![DEFAULT_INPUT_RANGE; n])
}

/// `z = alpha·x + beta·y` on two uniform inputs.
pub fn gen_linear(
    alpha: f64,
    beta: f64,
    n_train: usize,
    n_test: usize,
    seed: u64,
    ranges: Option<&[(f64, f64)]>,
) -> Result<(TaskSpec, TabularDataset)> {
    let spec = TaskSpec {
        family: TaskFamily::Linear,
        coefficient_table: vec![CoefficientRow { switch_id: 0, alpha, beta }],
        input_ranges: default_ranges(ranges, 2),
        n_train,
        n_test,
        seed,
        noise_sigma: 0.0,
    };
    let ds = generate(&spec)?;
    Ok((spec, ds))
}

/// One dataset holding several linear functions selected by an integer switch
/// column `u`.
pub fn gen_switch(
    table: &[(f64, f64)],
    n_per_pair: usize,
    n_test_per_pair: usize,
    seed: u64,
    ranges: Option<&[(f64, f64)]>,
) -> Result<(TaskSpec, TabularDataset)> {
    let spec = TaskSpec {
        family: TaskFamily::Switch,
        coefficient_table: table
            .iter()
            .enumerate()
            .map(|(u, &(alpha, beta))| CoefficientRow { switch_id: u as u32, alpha, beta })
            .collect(),
        input_ranges: default_ranges(ranges, 2),
        n_train: n_per_pair * table.len(),
        n_test: n_test_per_pair * table.len(),
        seed,
        noise_sigma: 0.0,
    };
    let ds = generate(&spec)?;
    Ok((spec, ds))
}

/// `z = a·b + c`, with `a·b` kept as the intermediary.
pub fn gen_compound(
    n_train: usize,
    n_test: usize,
    seed: u64,
    ranges: Option<&[(f64, f64)]>,
) -> Result<(TaskSpec, TabularDataset)> {
    let spec = TaskSpec {
        family: TaskFamily::Compound,
        coefficient_table: Vec::new(),
        input_ranges: default_ranges(ranges, 3),
        n_train,
        n_test,
        seed,
        noise_sigma: 0.0,
    };
    let ds = generate(&spec)?;
    Ok((spec, ds))
}

/// Draws `n` distinct coefficient pairs uniformly from `coeff_range`.
pub fn random_switch_table(n: usize, coeff_range: (f64, f64), seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: Vec<(f64, f64)> = Vec::with_capacity(n);
    while table.len() < n {
        let pair = (
            rng.random_range(coeff_range.0..coeff_range.1),
            rng.random_range(coeff_range.0..coeff_range.1),
        );
        if !table.contains(&pair) {
            table.push(pair);
        }
    }
    table
}

/// Independent linear datasets, one per future model fit.
pub fn gen_crossfit_suite(
    n_datasets: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    ranges: Option<&[(f64, f64)]>,
    coeff_range: (f64, f64),
) -> Result<Vec<(TaskSpec, TabularDataset)>> {
    if n_datasets < 10 {
        return Err(Error::Config(format!("cross-fit suite needs >= 10 datasets, got {n_datasets}")));
    }
    if !(coeff_range.0 < coeff_range.1) {
        return Err(Error::Config("coefficient range must have low < high".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_datasets)
        .map(|_| {
            let alpha = rng.random_range(coeff_range.0..coeff_range.1);
            let beta = rng.random_range(coeff_range.0..coeff_range.1);
            let ds_seed = rng.random::<u64>();
            gen_linear(alpha, beta, n_train, n_test, ds_seed, ranges)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_with(ds: &TabularDataset, pred: impl Fn(&[f64]) -> bool) -> usize {
        (0..ds.n_rows()).find(|&i| pred(ds.row(i))).expect("row exists")
    }

    #[test]
    fn linear_formula_examples() {
        // Evaluate the family formula at the literal points by constraining
        // the ranges to a single point neighbourhood.
        let (_, ds) = gen_linear(1.0, 0.0, 4, 1, 7, None).unwrap();
        for i in 0..ds.n_rows() {
            assert_eq!(ds.z[i], ds.row(i)[0]);
        }
        let (_, ds) = gen_linear(0.0, 0.0, 16, 4, 3, None).unwrap();
        assert!(ds.z.iter().all(|&z| z == 0.0));
        let (_, ds) = gen_linear(2.0, 3.0, 8, 2, 1, None).unwrap();
        for i in 0..ds.n_rows() {
            let r = ds.row(i);
            assert_eq!(ds.z[i], 2.0 * r[0] + 3.0 * r[1]);
        }
        assert_eq!(2.0 * 1.0 + 3.0 * 1.0, 5.0);
        assert_eq!(1.0f64 * 0.7 + 0.0 * -0.3, 0.7);
    }

    #[test]
    fn switch_rows_follow_their_pair() {
        let table = [(1.0, 2.0), (3.0, -1.0)];
        let (spec, ds) = gen_switch(&table, 32, 8, 11, None).unwrap();
        assert_eq!(ds.switch_column(), Some(2));
        for i in 0..ds.n_rows() {
            let r = ds.row(i);
            let (a, b) = table[r[2] as usize];
            assert_eq!(ds.z[i], a * r[0] + b * r[1]);
        }
        // literal rows: (x=1,y=1,u=0) -> 3 ; (x=2,y=0,u=1) -> 6
        assert_eq!(table[0].0 * 1.0 + table[0].1 * 1.0, 3.0);
        assert_eq!(table[1].0 * 2.0 + table[1].1 * 0.0, 6.0);
        assert_eq!(spec.n_train, 64);
        let u0 = row_with(&ds, |r| r[2] == 0.0);
        assert_eq!(ds.row(u0)[2], 0.0);
    }

    #[test]
    fn switch_counts_and_stratification() {
        let table = random_switch_table(10, DEFAULT_COEFF_RANGE, 5);
        let (_, ds) = gen_switch(&table, 64, 4, 2, None).unwrap();
        assert_eq!(ds.n_train(), 640);
        let mut per_u = [0usize; 10];
        for i in ds.rows_in(Split::Train) {
            per_u[ds.row(i)[2] as usize] += 1;
        }
        assert!(per_u.iter().all(|&c| c == 64));
        let mut seen: Vec<u64> = ds.column(2).iter().map(|u| *u as u64).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn switch_rejects_duplicates_and_singletons() {
        assert!(matches!(gen_switch(&[(1.0, 2.0), (1.0, 2.0)], 4, 1, 0, None), Err(Error::Config(_))));
        assert!(matches!(gen_switch(&[(1.0, 2.0)], 4, 1, 0, None), Err(Error::Config(_))));
    }

    #[test]
    fn compound_formula_and_intermediary() {
        let (_, ds) = gen_compound(64, 16, 9, None).unwrap();
        let mids = ds.intermediaries.as_ref().unwrap();
        for i in 0..ds.n_rows() {
            let r = ds.row(i);
            assert_eq!(mids[i], r[0] * r[1]);
            assert_eq!(ds.z[i], mids[i] + r[2]);
        }
        for (a, b, c, z, m) in [(2.0, 3.0, 1.0, 7.0, 6.0), (0.0, 5.0, -2.0, -2.0, 0.0), (-1.0, -1.0, 0.0, 1.0, 1.0)] {
            let ab: f64 = a * b;
            assert_eq!(ab, m);
            assert_eq!(ab + c, z);
        }
    }

    #[test]
    fn invalid_configurations() {
        assert!(gen_linear(1.0, 1.0, 1, 1, 0, None).is_err());
        assert!(gen_linear(1.0, 1.0, 2, 0, 0, None).is_err());
        assert!(gen_linear(1.0, 1.0, 2, 1, 0, Some(&[(1.0, 1.0), (0.0, 1.0)])).is_err());
        assert!(gen_compound(8, 2, 0, Some(&[(0.0, 1.0)])).is_err());
    }

    #[test]
    fn crossfit_suite_contract() {
        let suite = gen_crossfit_suite(50, 16, 4, 21, None, (-2.0, 2.0)).unwrap();
        assert_eq!(suite.len(), 50);
        assert!(suite.iter().all(|(s, _)| (-2.0..=2.0).contains(&s.coefficient_table[0].alpha)));
        let again = gen_crossfit_suite(50, 16, 4, 21, None, (-2.0, 2.0)).unwrap();
        let alphas = |s: &Vec<(TaskSpec, TabularDataset)>| s.iter().map(|(t, _)| t.coefficient_table[0].alpha).collect::<Vec<_>>();
        assert_eq!(alphas(&suite), alphas(&again));
        assert!(matches!(gen_crossfit_suite(2, 16, 4, 21, None, (-2.0, 2.0)), Err(Error::Config(_))));
    }

    #[test]
    fn noise_knob_perturbs_targets() {
        let (mut spec, clean) = gen_linear(1.0, 1.0, 32, 8, 4, None).unwrap();
        spec.noise_sigma = 0.1;
        let noisy = generate(&spec).unwrap();
        assert_eq!(clean.x, noisy.x);
        assert_ne!(clean.z, noisy.z);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, ds) = gen_compound(16, 4, 2, None).unwrap();
        ds.save(&spec, dir.path()).unwrap();
        let (spec2, ds2) = TabularDataset::load(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(ds, ds2);
        let header = fs::read_to_string(dir.path().join("data.csv")).unwrap();
        assert!(header.starts_with("a,b,c,z,split,intermediary\n"));
    }
}
