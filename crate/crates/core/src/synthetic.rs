//! Seeded generator of small growing graphs with exact translational
//! structure.
//!
//! Entities are the points of a `width × height` lattice and relation `r`
//! is a fixed displacement: `(h, r, t)` is a fact when `t = h + v_r`, so a
//! model with `h + r ≈ t` can fit the graph and generalize to held-out
//! facts. The lattice grows column by column: snapshot 0 owns the first
//! `initial_fraction` of the columns and later snapshots split the rest
//! evenly. Each later snapshot also unlocks one new relation while any
//! remain. A fact belongs to the earliest snapshot that has both of its
//! entities and its relation; `num_triples` facts are sampled overall.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ensure_train_support, split_sizes, GrowingDataset, SplitSnapshot};
use crate::error::{Error, Result};
use crate::kg::{GrowingKg, Triple, Vocabulary};

const DISPLACEMENTS: [(i64, i64); 16] = [
    (1, 0),
    (0, 1),
    (1, 1),
    (1, -1),
    (2, 0),
    (0, 2),
    (2, 1),
    (1, 2),
    (2, -1),
    (1, -2),
    (3, 0),
    (0, 3),
    (2, 2),
    (2, -2),
    (3, 1),
    (1, 3),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub num_relations: usize,
    pub num_triples: usize,
    pub num_snapshots: usize,
    pub initial_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 20,
            height: 15,
            num_relations: 10,
            num_triples: 1500,
            num_snapshots: 3,
            initial_fraction: 0.6,
            seed: 0,
        }
    }
}

/// Snapshot that first owns each column.
fn column_snapshots(width: usize, snapshots: usize, initial_fraction: f64) -> Vec<usize> {
    let first = ((initial_fraction * width as f64).round() as usize).clamp(1, width);
    let rest = snapshots - 1;
    let left = width - first;
    let mut out = vec![0; first];
    for k in 0..rest {
        out.extend(std::iter::repeat_n(k + 1, left / rest + usize::from(k < left % rest)));
    }
    out
}

/// Generates the graph; ids are relabelled in first-appearance order.
pub fn generate(spec: &SyntheticSpec) -> Result<GrowingKg> {
    let s = spec;
    if s.num_snapshots == 0
        || s.width < s.num_snapshots
        || s.height == 0
        || s.num_relations == 0
        || s.num_relations > DISPLACEMENTS.len()
        || !(0.0..=1.0).contains(&s.initial_fraction)
    {
        return Err(Error::InvalidConfig(format!("unusable synthetic graph settings {s:?}")));
    }
    let columns = column_snapshots(s.width, s.num_snapshots, s.initial_fraction);
    let unlocked_later = (s.num_snapshots - 1).min(s.num_relations - 1);
    let first_new_relation = s.num_relations - unlocked_later;
    let relation_snapshot = |r: usize| r.saturating_sub(first_new_relation - 1).min(s.num_snapshots - 1);
    let id = |x: usize, y: usize| x * s.height + y;

    let mut per_snapshot: Vec<Vec<Triple>> = vec![Vec::new(); s.num_snapshots];
    for x in 0..s.width {
        for y in 0..s.height {
            for (r, &(dx, dy)) in DISPLACEMENTS[..s.num_relations].iter().enumerate() {
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                if tx < 0 || ty < 0 || tx >= s.width as i64 || ty >= s.height as i64 {
                    continue;
                }
                let (tx, ty) = (tx as usize, ty as usize);
                let i = columns[x].max(columns[tx]).max(relation_snapshot(r));
                per_snapshot[i].push(Triple::new(id(x, y), r, id(tx, ty)));
            }
        }
    }
    let available: usize = per_snapshot.iter().map(Vec::len).sum();
    if s.num_triples > available {
        return Err(Error::TooFewTriples(format!(
            "the lattice has {available} facts, {} requested",
            s.num_triples
        )));
    }

    // Sample without replacement across all snapshots.
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut all: Vec<(usize, Triple)> = per_snapshot
        .iter()
        .enumerate()
        .flat_map(|(i, ts)| ts.iter().map(move |&t| (i, t)))
        .collect();
    all.shuffle(&mut rng);
    let keep: HashSet<Triple> = all[..s.num_triples].iter().map(|&(_, t)| t).collect();

    let mut snapshots = Vec::with_capacity(s.num_snapshots);
    let mut supported_e = HashSet::new();
    let mut supported_r = HashSet::new();
    let mut warnings = Vec::new();
    for (i, ts) in per_snapshot.into_iter().enumerate() {
        let mut triples: Vec<Triple> = ts.into_iter().filter(|t| keep.contains(t)).collect();
        if triples.len() < 5 {
            return Err(Error::TooFewTriples(format!("synthetic snapshot {i} has {} facts", triples.len())));
        }
        triples.shuffle(&mut rng);
        let [n_train, n_valid, _] = split_sizes(triples.len(), [3, 1, 1]);
        let test = triples.split_off(n_train + n_valid);
        let valid = triples.split_off(n_train);
        let mut snap = SplitSnapshot { train: triples, valid, test };
        ensure_train_support(&mut snap, &supported_e, &supported_r, i, &mut warnings);
        for t in &snap.train {
            supported_e.insert(t.head);
            supported_e.insert(t.tail);
            supported_r.insert(t.relation);
        }
        snapshots.push(snap);
    }
    let mut entities = Vocabulary::new();
    for x in 0..s.width {
        for y in 0..s.height {
            entities.intern(&format!("p{x}_{y}"));
        }
    }
    let mut relations = Vocabulary::new();
    for &(dx, dy) in &DISPLACEMENTS[..s.num_relations] {
        relations.intern(&format!("d{dx}_{dy}"));
    }
    GrowingDataset {
        snapshots,
        initial_components: 1,
        warnings,
    }
    .into_kg(&entities, &relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_split() {
        assert_eq!(column_snapshots(5, 3, 0.6), vec![0, 0, 0, 1, 2]);
        let c = column_snapshots(20, 3, 0.6);
        assert_eq!(c.iter().filter(|&&i| i == 0).count(), 12);
        assert_eq!(c.iter().filter(|&&i| i == 2).count(), 4);
    }

    #[test]
    fn default_shape() {
        let kg = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(kg.len(), 3);
        let total: usize = kg.snapshots().iter().map(|s| s.num_triples()).sum();
        assert_eq!(total, 1500);
        let last = kg.snapshot(2);
        assert!(last.entity_count > 250 && last.entity_count <= 300);
        assert_eq!(last.relation_count, 10);
        assert!(!kg.delta(1).new_entities.is_empty());
        assert_eq!(kg.delta(1).new_relations.len(), 1);
        assert_eq!(kg.delta(2).new_relations.len(), 1);
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticSpec::default()).unwrap();
        let b = generate(&SyntheticSpec::default()).unwrap();
        let c = generate(&SyntheticSpec { seed: 1, ..SyntheticSpec::default() }).unwrap();
        assert_eq!(a.snapshots(), b.snapshots());
        assert_ne!(a.snapshots(), c.snapshots());
    }
}
