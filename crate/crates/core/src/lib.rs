//! Continual knowledge graph embedding with incremental low-rank adapters.
//!
//! A knowledge graph grows in snapshots. The first snapshot is embedded
//! densely; the new entities of each later snapshot are layered by their
//! distance from the old graph and stored as one low-rank factor pair per
//! layer, with ranks scaled by the layer's degree centrality. Old parameters
//! are frozen, so earlier snapshots never degrade.
//!
//! ```no_run
//! use ckge_core::{load_snapshots, run_continual, TrainingConfig};
//!
//! let kg = load_snapshots("data/fb".as_ref())?;
//! let (report, _store) = run_continual(&kg, &TrainingConfig::default())?;
//! println!("{:.4}", report.final_eval().unwrap().average.mrr);
//! # Ok::<(), ckge_core::Error>(())
//! ```

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod kg;
pub mod layering;
pub mod matrix;
pub mod scorer;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::{load_store, save_snapshot};
pub use dataset::{build_growing_dataset, load_snapshots, write_dataset, DatasetSpec, GrowingDataset};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalReport, Metrics, RankSetting};
pub use harness::{emit_plots, run_plan, ComparisonTable, ExperimentPlan};
pub use kg::{EntityId, GrowingKg, RelationId, Snapshot, SnapshotDelta, Triple, Vocabulary};
pub use layering::{build_layer_plan, sort_new_entities, LayerPlan};
pub use matrix::Matrix;
pub use scorer::ScoreFunction;
pub use store::{compose, AdapterStore, EmbeddingView, LoraFactor, LoraGroup};
pub use trainer::{run_continual, ContinualTrainer, RunReport, TrainStats, TrainingConfig, TrainingMode};
