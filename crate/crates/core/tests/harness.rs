mod common;

use std::fs;
use std::path::Path;

use ckge_core::harness::{cell_key, CellRecord, ConfigGrid, PLOT_FILES};
use ckge_core::synthetic::{generate, SyntheticSpec};
use ckge_core::*;
use common::{desk_config, heavy};

fn tiny_dataset(root: &Path) -> GrowingKg {
    let kg = generate(&SyntheticSpec {
        width: 8,
        height: 5,
        num_relations: 4,
        num_triples: 120,
        initial_fraction: 0.5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    write_dataset(&kg, root).unwrap();
    kg
}

fn plan(data: &Path, out: &Path) -> ExperimentPlan {
    ExperimentPlan {
        datasets: vec![data.to_path_buf()],
        modes: vec![TrainingMode::FastKge, TrainingMode::NoIncLora],
        grid: ConfigGrid::default(),
        seeds: vec![0, 1],
        base: TrainingConfig {
            max_epochs: 5,
            r_base: 4,
            num_layers: 2,
            ..desk_config(TrainingMode::FastKge, 0)
        },
        output_dir: out.to_path_buf(),
        extended: true,
    }
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn runs_caches_and_resumes() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    let kg = tiny_dataset(&data);
    let out = dir.path().join("out");
    let p = plan(&data, &out);

    let table = run_plan(&p).unwrap();
    assert!(table.failures.is_empty(), "{:?}", table.failures);
    assert_eq!(table.rows.len(), 2);
    let fast = table.row("tiny", TrainingMode::FastKge).unwrap();
    assert_eq!(fast.seeds, vec![0, 1]);
    assert!(fast.old_mrr.is_some());
    let base = table.row("tiny", TrainingMode::NoIncLora).unwrap();
    assert!(fast.incremental_params < base.incremental_params);
    assert_eq!(table.comparisons.len(), 1);
    assert_eq!(table.comparisons[0].baseline, TrainingMode::NoIncLora);
    assert!(out.join("table.json").is_file());
    assert_eq!(lines(&out.join("table.csv")), 3);
    // a single grid point per dimension: nothing to plot
    for f in PLOT_FILES {
        assert_eq!(lines(&out.join("plots").join(f)), 1, "{f}");
    }

    // rerun: every cell comes from the cache
    let cells: Vec<_> = fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 4);
    let stamps: Vec<_> = cells.iter().map(|c| fs::metadata(c).unwrap().modified().unwrap()).collect();
    assert_eq!(run_plan(&p).unwrap(), table);
    let again: Vec<_> = cells.iter().map(|c| fs::metadata(c).unwrap().modified().unwrap()).collect();
    assert_eq!(stamps, again);

    // a recorded failure is retried
    let config = TrainingConfig {
        mode: TrainingMode::FastKge,
        seed: 1,
        ..p.base.clone()
    };
    let key = cell_key(&kg.stats(), &config).unwrap();
    let path = out.join("cells").join(format!("{key}.json"));
    let failed = CellRecord {
        key: key.clone(),
        dataset: "tiny".into(),
        config,
        report: None,
        error: Some("interrupted".into()),
    };
    fs::write(&path, serde_json::to_string(&failed).unwrap()).unwrap();
    let table = run_plan(&p).unwrap();
    assert!(table.failures.is_empty());
    let record: CellRecord = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!(record.report.is_some() && record.error.is_none());
}

#[test]
fn swept_dimension_gets_a_series() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    tiny_dataset(&data);
    let mut p = plan(&data, &dir.path().join("out"));
    p.seeds = vec![0];
    p.grid.r_base = vec![2, 4];
    let table = run_plan(&p).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.comparisons.len(), 2);
    let plots = p.output_dir.join("plots");
    assert_eq!(lines(&plots.join("mrr_vs_r_base.csv")), 1 + 4);
    assert_eq!(lines(&plots.join("mrr_vs_layers.csv")), 1);
    assert_eq!(lines(&plots.join("mrr_vs_scorer.csv")), 1);
}

#[test]
fn broken_dataset_is_reported_not_fatal() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    tiny_dataset(&data);
    let mut p = plan(&data, &dir.path().join("out"));
    p.seeds = vec![0];
    p.datasets.push(dir.path().join("missing"));
    let table = run_plan(&p).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.failures.len(), 2);
    assert!(table.failures.iter().all(|f| f.dataset == "missing"));
}

#[test]
fn grid_values_are_checked_unless_extended() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = plan(dir.path(), dir.path());
    p.extended = false;
    p.grid.r_base = vec![10, 50];
    p.grid.num_layers = vec![2, 5];
    assert!(p.validate().is_ok());
    p.grid.r_base = vec![7];
    assert!(matches!(p.validate(), Err(Error::InvalidConfig(_))));
    assert!(run_plan(&p).is_err());
    p.extended = true;
    assert!(p.validate().is_ok());
}

#[test]
fn plan_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    fs::write(
        &path,
        r#"{"datasets": ["data/a"], "modes": ["fastkge", "no_inclora"], "output_dir": "out",
            "grid": {"r_base": [50, 100]}, "base": {"dim": 32}}"#,
    )
    .unwrap();
    let p = ExperimentPlan::from_file(&path).unwrap();
    assert_eq!(p.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(p.base.dim, 32);
    assert_eq!(p.base.margin, TrainingConfig::default().margin);
    assert_eq!(p.configs().len(), 2);
}
