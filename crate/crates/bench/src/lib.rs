//! Fixtures for the kernel benchmarks.

use ckge_core::store::{allocate_ranks, create_group, GroupOffsets};
use ckge_core::synthetic::{generate, SyntheticSpec};
use ckge_core::trainer::plan_for_snapshot;
use ckge_core::{AdapterStore, GrowingKg, Matrix, TrainingConfig, TrainingMode};

/// Training setup the benchmarks share with the efficiency tests.
pub fn desk_config(mode: TrainingMode) -> TrainingConfig {
    TrainingConfig {
        dim: 16,
        margin: 16.0,
        learning_rate: 0.01,
        batch_size: 32,
        r_base: 16,
        num_layers: 3,
        mode,
        ..TrainingConfig::default()
    }
}

pub fn lattice() -> GrowingKg {
    generate(&SyntheticSpec::default()).expect("default lattice")
}

/// A store over `kg` with dense origin tables and one untrained group per
/// later snapshot, built without running the optimizer.
pub fn layered_store(kg: &GrowingKg, dim: usize) -> AdapterStore {
    let cfg = TrainingConfig {
        dim,
        ..desk_config(TrainingMode::FastKge)
    };
    let s0 = kg.snapshot(0);
    let wave = |i: usize, j: usize| ((i * 31 + j * 17) % 101) as f64 / 101.0 - 0.5;
    let mut store = AdapterStore::new(dim);
    store.origin_entities = Matrix::from_fn(s0.entity_count, dim, wave);
    store.origin_relations = Matrix::from_fn(s0.relation_count, dim, wave);
    for i in 1..kg.len() {
        let plan = plan_for_snapshot(kg, i, &cfg).expect("plan");
        let ranks = allocate_ranks(&plan, cfg.r_base, dim);
        let offsets = GroupOffsets {
            entity: kg.previous_entity_count(i),
            relation: kg.previous_relation_count(i),
        };
        store
            .groups
            .push(create_group(i, &plan, &ranks, dim, cfg.relation_rank, offsets, i as u64).expect("group"));
    }
    store
}
