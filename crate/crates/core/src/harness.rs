//! Experiment grids over modes, configurations and seeds.
//!
//! Every (dataset, mode, configuration, seed) cell is cached as
//! `cells/<sha256>.json` under the output directory, keyed on the dataset's
//! statistics, the full configuration and the mode. Re-running a plan skips
//! finished cells and retries failed ones. Aggregation only reads cell
//! records, so re-aggregating cached cells reproduces the table exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_snapshots, StatsManifest};
use crate::error::{Error, Result};
use crate::evaluator::Metrics;
use crate::kg::{GrowingKg, SnapshotStats};
use crate::scorer::ScoreFunction;
use crate::trainer::{run_continual, RunReport, TrainingConfig, TrainingMode};

// Standard sweep values. Plans outside them need `extended`.
pub const R_BASE_RANGE: [usize; 5] = [10, 50, 100, 150, 200];
pub const LAYER_RANGE: [usize; 4] = [2, 5, 10, 20];
pub const LEARNING_RATE_RANGE: [f64; 3] = [0.1, 0.2, 0.3];
/// 258 is kept next to 256 for plans that were written with it.
pub const BATCH_RANGE: [usize; 4] = [256, 258, 512, 1024];

/// Values swept per dimension; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigGrid {
    pub r_base: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub scorer: Vec<ScoreFunction>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub datasets: Vec<PathBuf>,
    pub modes: Vec<TrainingMode>,
    #[serde(default)]
    pub grid: ConfigGrid,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: TrainingConfig,
    pub output_dir: PathBuf,
    /// Allows grid values outside the standard sweep values.
    #[serde(default)]
    pub extended: bool,
}

impl ExperimentPlan {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() || self.datasets.is_empty() {
            return Err(Error::InvalidConfig(
                "a plan needs at least one dataset, mode and seed".into(),
            ));
        }
        if !self.extended {
            let g = &self.grid;
            let out_of_range = g.r_base.iter().find(|v| !R_BASE_RANGE.contains(v)).map(|v| format!("r_base {v}"))
                .or_else(|| g.num_layers.iter().find(|v| !LAYER_RANGE.contains(v)).map(|v| format!("layers {v}")))
                .or_else(|| g.learning_rate.iter().find(|v| !LEARNING_RATE_RANGE.contains(v)).map(|v| format!("learning rate {v}")))
                .or_else(|| g.batch_size.iter().find(|v| !BATCH_RANGE.contains(v)).map(|v| format!("batch size {v}")));
            if let Some(what) = out_of_range {
                return Err(Error::InvalidConfig(format!(
                    "{what} is outside the standard sweep values; set \"extended\": true to allow it"
                )));
            }
        }
        self.base.validate()
    }

    /// Every configuration of the grid, seed and mode excluded.
    pub fn configs(&self) -> Vec<TrainingConfig> {
        fn or_base<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let b = &self.base;
        let mut out = Vec::new();
        for &r_base in &or_base(&self.grid.r_base, b.r_base) {
            for &num_layers in &or_base(&self.grid.num_layers, b.num_layers) {
                for &learning_rate in &or_base(&self.grid.learning_rate, b.learning_rate) {
                    for &batch_size in &or_base(&self.grid.batch_size, b.batch_size) {
                        for &scorer in &or_base(&self.grid.scorer, b.scorer) {
                            out.push(TrainingConfig {
                                r_base,
                                num_layers,
                                learning_rate,
                                batch_size,
                                scorer,
                                ..b.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub dataset: String,
    /// Full configuration including mode and seed.
    pub config: TrainingConfig,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

/// Content hash of a cell.
pub fn cell_key(stats: &[SnapshotStats], config: &TrainingConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        stats: &'a [SnapshotStats],
        config: &'a TrainingConfig,
    }
    let bytes = serde_json::to_vec(&Key { stats, config })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// One aggregated row: a dataset, mode and configuration averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub mode: TrainingMode,
    pub r_base: usize,
    pub num_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scorer: ScoreFunction,
    pub seeds: Vec<u64>,
    /// Average over all test sets after the last snapshot.
    pub metrics: Metrics,
    /// Mean MRR of the test sets of snapshots before the last one.
    pub old_mrr: Option<f64>,
    pub train_seconds: f64,
    /// Trainable parameters summed over snapshots after the first.
    pub incremental_params: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub baseline: TrainingMode,
    pub r_base: usize,
    pub num_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scorer: ScoreFunction,
    pub time_saving: Option<f64>,
    pub mrr_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: String,
    pub dataset: String,
    pub mode: TrainingMode,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub comparisons: Vec<Comparison>,
    pub failures: Vec<CellFailure>,
}

/// `1 − t_fast / t_base`; `None` when the baseline took no time.
pub fn time_saving(t_fast: f64, t_base: f64) -> Option<f64> {
    (t_base > 0.0).then(|| 1.0 - t_fast / t_base)
}

fn old_mrr(report: &RunReport) -> Option<f64> {
    let eval = report.final_eval()?;
    let old: Vec<f64> = eval
        .per_snapshot
        .iter()
        .filter(|(&j, _)| j < eval.snapshot)
        .map(|(_, m)| m.mrr)
        .collect();
    (!old.is_empty()).then(|| old.iter().sum::<f64>() / old.len() as f64)
}

type GroupKey = (String, TrainingMode, usize, usize, u64, usize, ScoreFunction);

fn group_key(dataset: &str, c: &TrainingConfig) -> GroupKey {
    (
        dataset.to_owned(),
        c.mode,
        c.r_base,
        c.num_layers,
        c.learning_rate.to_bits(),
        c.batch_size,
        c.scorer,
    )
}

/// Aggregates cell records into a table; a pure function of its input.
pub fn aggregate(cells: &[CellRecord]) -> ComparisonTable {
    let mut sorted: Vec<&CellRecord> = cells.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.dataset, a.config.mode.name(), &a.key).cmp(&(&b.dataset, b.config.mode.name(), &b.key))
    });
    let mut groups: BTreeMap<GroupKey, Vec<&CellRecord>> = BTreeMap::new();
    let mut failures = Vec::new();
    for cell in sorted {
        match (&cell.report, &cell.error) {
            (Some(_), None) => {
                groups.entry(group_key(&cell.dataset, &cell.config)).or_default().push(cell);
            }
            _ => failures.push(CellFailure {
                key: cell.key.clone(),
                dataset: cell.dataset.clone(),
                mode: cell.config.mode,
                seed: cell.config.seed,
                error: cell.error.clone().unwrap_or_else(|| "missing report".into()),
            }),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let mut members = members.clone();
        members.sort_by_key(|c| c.config.seed);
        let reports: Vec<&RunReport> = members.iter().filter_map(|c| c.report.as_ref()).collect();
        let n = reports.len() as f64;
        let finals: Vec<Metrics> = reports.iter().filter_map(|r| r.final_eval()).map(|e| e.average).collect();
        let olds: Vec<f64> = reports.iter().filter_map(|r| old_mrr(r)).collect();
        let c = &members[0].config;
        rows.push(TableRow {
            dataset: members[0].dataset.clone(),
            mode: c.mode,
            r_base: c.r_base,
            num_layers: c.num_layers,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            scorer: c.scorer,
            seeds: members.iter().map(|m| m.config.seed).collect(),
            metrics: Metrics::mean(&finals),
            old_mrr: (!olds.is_empty()).then(|| olds.iter().sum::<f64>() / olds.len() as f64),
            train_seconds: reports.iter().map(|r| r.total_train_seconds).sum::<f64>() / n,
            incremental_params: reports
                .iter()
                .map(|r| r.trainable_params().iter().skip(1).sum::<usize>() as f64)
                .sum::<f64>()
                / n,
        });
    }

    let mut comparisons = Vec::new();
    let index: BTreeMap<GroupKey, &TableRow> = rows
        .iter()
        .map(|r| {
            let c = TrainingConfig {
                mode: r.mode,
                r_base: r.r_base,
                num_layers: r.num_layers,
                learning_rate: r.learning_rate,
                batch_size: r.batch_size,
                scorer: r.scorer,
                ..TrainingConfig::default()
            };
            (group_key(&r.dataset, &c), r)
        })
        .collect();
    for fast in rows.iter().filter(|r| r.mode == TrainingMode::FastKge) {
        for baseline in [TrainingMode::NoIncLora, TrainingMode::NoGl] {
            let key = (
                fast.dataset.clone(),
                baseline,
                fast.r_base,
                fast.num_layers,
                fast.learning_rate.to_bits(),
                fast.batch_size,
                fast.scorer,
            );
            if let Some(base) = index.get(&key) {
                comparisons.push(Comparison {
                    dataset: fast.dataset.clone(),
                    baseline,
                    r_base: fast.r_base,
                    num_layers: fast.num_layers,
                    learning_rate: fast.learning_rate,
                    batch_size: fast.batch_size,
                    scorer: fast.scorer,
                    time_saving: time_saving(fast.train_seconds, base.train_seconds),
                    mrr_delta: fast.metrics.mrr - base.metrics.mrr,
                });
            }
        }
    }
    ComparisonTable {
        rows,
        comparisons,
        failures,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,mode,r_base,num_layers,learning_rate,batch_size,scorer,seeds,mrr,hits1,hits3,hits10,old_mrr,train_seconds,incremental_params\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.dataset),
                r.mode,
                r.r_base,
                r.num_layers,
                r.learning_rate,
                r.batch_size,
                r.scorer,
                r.seeds.len(),
                r.metrics.mrr,
                r.metrics.hits1,
                r.metrics.hits3,
                r.metrics.hits10,
                r.old_mrr.map_or_else(String::new, |v| v.to_string()),
                r.train_seconds,
                r.incremental_params
            );
        }
        out
    }

    pub fn row(&self, dataset: &str, mode: TrainingMode) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.mode == mode)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub const PLOT_FILES: [&str; 3] = ["mrr_vs_r_base.csv", "mrr_vs_layers.csv", "mrr_vs_scorer.csv"];

/// Writes one CSV series file per swept dimension into `dir`. Points with
/// the same x are averaged over the other dimensions. A dimension with
/// fewer than two distinct values yields a header-only file.
pub fn emit_plots(table: &ComparisonTable, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::InvalidConfig("cannot plot an empty table".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    type Extract = fn(&TableRow) -> String;
    let dims: [(&str, &str, Extract); 3] = [
        (PLOT_FILES[0], "r_base", |r| r.r_base.to_string()),
        (PLOT_FILES[1], "num_layers", |r| r.num_layers.to_string()),
        (PLOT_FILES[2], "scorer", |r| r.scorer.to_string()),
    ];
    let mut written = Vec::new();
    for (file, x_name, x_of) in dims {
        let mut out = format!("dataset,mode,{x_name},mrr,incremental_params,train_seconds\n");
        let distinct: BTreeSet<String> = table.rows.iter().map(x_of).collect();
        if distinct.len() >= 2 {
            // (dataset, mode, numeric x or name) → (mrr, params, seconds, count) sums
            type Point<'a> = (String, &'a str, (u64, String));
            let mut points: BTreeMap<Point, (f64, f64, f64, usize)> = BTreeMap::new();
            for r in &table.rows {
                let x = x_of(r);
                let sort_x = (x.parse::<u64>().unwrap_or(u64::MAX), x);
                let p = points.entry((r.dataset.clone(), r.mode.name(), sort_x)).or_default();
                p.0 += r.metrics.mrr;
                p.1 += r.incremental_params;
                p.2 += r.train_seconds;
                p.3 += 1;
            }
            for ((dataset, mode, (_, x)), (mrr, params, secs, n)) in points {
                let n = n as f64;
                let _ = writeln!(out, "{},{mode},{x},{},{},{}", csv_field(&dataset), mrr / n, params / n, secs / n);
            }
        }
        let path = dir.join(file);
        write_file(&path, &out)?;
        written.push(path);
    }
    Ok(written)
}

fn run_cell(kg: &GrowingKg, config: &TrainingConfig) -> std::result::Result<RunReport, String> {
    run_continual(kg, config).map(|(report, _)| report).map_err(|e| e.to_string())
}

/// Runs (or resumes) every cell of `plan`, writes `table.json`, `table.csv`
/// and `plots/*.csv` under the output directory, and returns the table.
/// Cells run one after another so their timings are comparable.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ComparisonTable> {
    plan.validate()?;
    let out = &plan.output_dir;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let mut cells = Vec::new();
    for path in &plan.datasets {
        let dataset = dataset_name(path);
        let kg = load_snapshots(path).map(|kg| {
            let stats = kg.stats();
            (kg, stats)
        });
        for base in plan.configs() {
            for &mode in &plan.modes {
                for &seed in &plan.seeds {
                    let config = TrainingConfig { mode, seed, ..base.clone() };
                    let record = match &kg {
                        Ok((kg, stats)) => {
                            let key = cell_key(stats, &config)?;
                            let cache = cells_dir.join(format!("{key}.json"));
                            let cached = fs::read_to_string(&cache)
                                .ok()
                                .and_then(|t| serde_json::from_str::<CellRecord>(&t).ok())
                                .filter(|c| c.error.is_none() && c.report.is_some());
                            match cached {
                                Some(c) => {
                                    log::info!("cell {dataset}/{mode}/seed {seed}: cached");
                                    c
                                }
                                None => {
                                    log::info!("cell {dataset}/{mode}/seed {seed}: running");
                                    let result = run_cell(kg, &config);
                                    let record = CellRecord {
                                        key,
                                        dataset: dataset.clone(),
                                        config,
                                        error: result.as_ref().err().cloned(),
                                        report: result.ok(),
                                    };
                                    write_file(&cache, &serde_json::to_string_pretty(&record)?)?;
                                    record
                                }
                            }
                        }
                        Err(e) => CellRecord {
                            key: String::new(),
                            dataset: dataset.clone(),
                            config,
                            report: None,
                            error: Some(format!("loading {}: {e}", path.display())),
                        },
                    };
                    if let Some(e) = &record.error {
                        log::warn!("cell {dataset}/{mode}/seed {seed} failed: {e}");
                    }
                    cells.push(record);
                }
            }
        }
    }
    let table = aggregate(&cells);
    write_file(&out.join("table.json"), &serde_json::to_string_pretty(&table)?)?;
    write_file(&out.join("table.csv"), &table.to_csv())?;
    if !table.rows.is_empty() {
        emit_plots(&table, &out.join("plots"))?;
    }
    Ok(table)
}

/// Stats manifest of a loaded dataset, as used for cell keys.
pub fn dataset_manifest(kg: &GrowingKg) -> StatsManifest {
    StatsManifest { snapshots: kg.stats() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_saving_example() {
        let s = time_saving(405.0, 819.0).unwrap();
        assert!((s - 0.5055).abs() < 1e-4, "{s}");
        assert_eq!(time_saving(1.0, 0.0), None);
    }

    #[test]
    fn grid_expansion() {
        let plan = ExperimentPlan {
            datasets: vec!["d".into()],
            modes: vec![TrainingMode::FastKge],
            grid: ConfigGrid {
                r_base: vec![10, 50],
                num_layers: vec![2, 5, 10],
                ..ConfigGrid::default()
            },
            seeds: default_seeds(),
            base: TrainingConfig::default(),
            output_dir: "out".into(),
            extended: false,
        };
        plan.validate().unwrap();
        assert_eq!(plan.configs().len(), 6);
        let bad = ExperimentPlan {
            grid: ConfigGrid { r_base: vec![7], ..ConfigGrid::default() },
            ..plan.clone()
        };
        assert!(bad.validate().is_err());
        assert!(ExperimentPlan { extended: true, ..bad }.validate().is_ok());
        assert!(ExperimentPlan { seeds: vec![], ..plan }.validate().is_err());
    }

    #[test]
    fn plan_json_defaults() {
        let plan: ExperimentPlan =
            serde_json::from_str(r#"{"datasets":["a"],"modes":["fastkge","no_gl"],"output_dir":"o"}"#).unwrap();
        assert_eq!(plan.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(plan.base, TrainingConfig::default());
    }
}
