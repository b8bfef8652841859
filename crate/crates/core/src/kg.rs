//! Growing knowledge graph data model: triples, vocabularies and snapshot deltas.
//!
//! Entity and relation ids are dense and assigned in first-appearance order,
//! so the entities introduced by snapshot `i` occupy the id range
//! `[entity_count(i - 1), entity_count(i))`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

impl From<(usize, usize, usize)> for Triple {
    fn from((h, r, t): (usize, usize, usize)) -> Self {
        Triple::new(h, r, t)
    }
}

/// Name ↔ dense id mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `name`, assigning the next free id on first sight.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One snapshot of a growing KG. The splits hold the snapshot's own triples
/// (the increment over earlier snapshots), counts are cumulative.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub index: usize,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub entity_count: usize,
    pub relation_count: usize,
}

impl Snapshot {
    pub fn new(
        index: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        entity_count: usize,
        relation_count: usize,
    ) -> Result<Self> {
        let snapshot = Self {
            index,
            train: dedup(train),
            valid: dedup(valid),
            test: dedup(test),
            entity_count,
            relation_count,
        };
        for t in snapshot.triples() {
            check_ids(t, entity_count, relation_count)?;
        }
        Ok(snapshot)
    }

    /// Snapshot whose triples all live in the train split.
    pub fn from_triples(
        index: usize,
        triples: Vec<Triple>,
        entity_count: usize,
        relation_count: usize,
    ) -> Result<Self> {
        Self::new(
            index,
            triples,
            Vec::new(),
            Vec::new(),
            entity_count,
            relation_count,
        )
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn num_triples(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn stats(&self) -> SnapshotStats {
        SnapshotStats {
            index: self.index,
            num_entities: self.entity_count,
            num_relations: self.relation_count,
            num_triples: self.num_triples(),
        }
    }
}

/// Per-snapshot cumulative entity/relation counts and current triple count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub index: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_triples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SnapshotDelta {
    /// Ascending.
    pub new_entities: Vec<EntityId>,
    /// Ascending.
    pub new_relations: Vec<RelationId>,
    pub new_triples: Vec<Triple>,
}

impl SnapshotDelta {
    pub fn is_empty(&self) -> bool {
        self.new_entities.is_empty() && self.new_relations.is_empty() && self.new_triples.is_empty()
    }
}

fn check_ids(t: &Triple, entity_count: usize, relation_count: usize) -> Result<()> {
    if t.head >= entity_count || t.tail >= entity_count {
        return Err(Error::InconsistentId(format!(
            "triple ({}, {}, {}) references an entity beyond the {entity_count} declared",
            t.head, t.relation, t.tail
        )));
    }
    if t.relation >= relation_count {
        return Err(Error::InconsistentId(format!(
            "triple ({}, {}, {}) references a relation beyond the {relation_count} declared",
            t.head, t.relation, t.tail
        )));
    }
    Ok(())
}

fn dedup(triples: Vec<Triple>) -> Vec<Triple> {
    let mut seen = HashSet::with_capacity(triples.len());
    triples.into_iter().filter(|t| seen.insert(*t)).collect()
}

/// Ids `>= first_new` must form the contiguous range `[first_new, first_new + k)`.
fn new_ids(ids: impl Iterator<Item = usize>, first_new: usize, kind: &str) -> Result<Vec<usize>> {
    let mut fresh: Vec<usize> = ids.filter(|&id| id >= first_new).collect();
    fresh.sort_unstable();
    fresh.dedup();
    if let Some((k, &id)) = fresh
        .iter()
        .enumerate()
        .find(|&(k, &id)| id != first_new + k)
    {
        return Err(Error::InconsistentId(format!(
            "new {kind} ids must be dense from {first_new}; found {id} where {} was expected",
            first_new + k
        )));
    }
    Ok(fresh)
}

/// Entities, relations and triples of `current_triples` absent from `previous`.
pub fn compute_delta(previous: &Snapshot, current_triples: &[Triple]) -> Result<SnapshotDelta> {
    let known: HashSet<Triple> = previous.triples().copied().collect();
    delta_against(
        &known,
        previous.entity_count,
        previous.relation_count,
        current_triples,
    )
}

pub(crate) fn delta_against(
    known: &HashSet<Triple>,
    previous_entities: usize,
    previous_relations: usize,
    current_triples: &[Triple],
) -> Result<SnapshotDelta> {
    let new_entities = new_ids(
        current_triples.iter().flat_map(|t| [t.head, t.tail]),
        previous_entities,
        "entity",
    )?;
    let new_relations = new_ids(
        current_triples.iter().map(|t| t.relation),
        previous_relations,
        "relation",
    )?;
    let mut seen = HashSet::new();
    let new_triples = current_triples
        .iter()
        .filter(|t| !known.contains(t) && seen.insert(**t))
        .copied()
        .collect();
    Ok(SnapshotDelta {
        new_entities,
        new_relations,
        new_triples,
    })
}

/// Number of distinct entities sharing a triple with `entity`, ignoring
/// direction. Self-loops contribute nothing.
pub fn neighbors_in(triples: &[Triple], entity: EntityId) -> usize {
    let mut seen = HashSet::new();
    for t in triples {
        if t.head == entity && t.tail != entity {
            seen.insert(t.tail);
        } else if t.tail == entity && t.head != entity {
            seen.insert(t.head);
        }
    }
    seen.len()
}

/// Undirected adjacency over a triple list; neighbor lists are sorted and
/// free of duplicates and self-loops.
#[derive(Debug, Clone, Default)]
pub struct Adjacency {
    neighbors: BTreeMap<EntityId, Vec<EntityId>>,
}

impl Adjacency {
    pub fn from_triples(triples: &[Triple]) -> Self {
        let mut neighbors: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
        for t in triples {
            if t.head == t.tail {
                neighbors.entry(t.head).or_default();
                continue;
            }
            neighbors.entry(t.head).or_default().push(t.tail);
            neighbors.entry(t.tail).or_default().push(t.head);
        }
        for list in neighbors.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    pub fn neighbors(&self, entity: EntityId) -> &[EntityId] {
        self.neighbors.get(&entity).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, entity: EntityId) -> usize {
        self.neighbors(entity).len()
    }

    /// Entities that occur in at least one triple, ascending.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.neighbors.keys().copied()
    }
}

/// A sequence of snapshots with precomputed deltas and name vocabularies.
#[derive(Debug, Clone)]
pub struct GrowingKg {
    snapshots: Vec<Snapshot>,
    deltas: Vec<SnapshotDelta>,
    pub entities: Vocabulary,
    pub relations: Vocabulary,
}

impl GrowingKg {
    pub fn new(
        snapshots: Vec<Snapshot>,
        entities: Vocabulary,
        relations: Vocabulary,
    ) -> Result<Self> {
        let mut deltas = Vec::with_capacity(snapshots.len());
        let mut known = HashSet::new();
        let (mut prev_e, mut prev_r) = (0, 0);
        for (i, s) in snapshots.iter().enumerate() {
            if s.index != i {
                return Err(Error::InconsistentId(format!(
                    "snapshot at position {i} has index {}",
                    s.index
                )));
            }
            if s.entity_count < prev_e || s.relation_count < prev_r {
                return Err(Error::InconsistentId(format!(
                    "cumulative counts shrink at snapshot {i}"
                )));
            }
            let current: Vec<Triple> = s.triples().copied().collect();
            let delta = delta_against(&known, prev_e, prev_r, &current)?;
            if prev_e + delta.new_entities.len() != s.entity_count
                || prev_r + delta.new_relations.len() != s.relation_count
            {
                return Err(Error::InconsistentId(format!(
                    "snapshot {i} declares {} entities / {} relations but its triples introduce {} / {} new ones on top of {prev_e} / {prev_r}",
                    s.entity_count,
                    s.relation_count,
                    delta.new_entities.len(),
                    delta.new_relations.len()
                )));
            }
            known.extend(current);
            prev_e = s.entity_count;
            prev_r = s.relation_count;
            deltas.push(delta);
        }
        Ok(Self {
            snapshots,
            deltas,
            entities,
            relations,
        })
    }

    /// Builds a KG from id-labelled snapshots without name vocabularies.
    pub fn from_snapshots(snapshots: Vec<Snapshot>) -> Result<Self> {
        Self::new(snapshots, Vocabulary::new(), Vocabulary::new())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, i: usize) -> &Snapshot {
        &self.snapshots[i]
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn delta(&self, i: usize) -> &SnapshotDelta {
        &self.deltas[i]
    }

    /// Entity count before snapshot `i` (0 for the first snapshot).
    pub fn previous_entity_count(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.snapshots[i - 1].entity_count
        }
    }

    pub fn previous_relation_count(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.snapshots[i - 1].relation_count
        }
    }

    /// All triples (every split) of snapshots `0..=i`.
    pub fn known_triples(&self, i: usize) -> HashSet<Triple> {
        self.snapshots[..=i]
            .iter()
            .flat_map(|s| s.triples().copied())
            .collect()
    }

    /// Training triples of snapshots `0..=i`.
    pub fn train_triples_upto(&self, i: usize) -> HashSet<Triple> {
        self.snapshots[..=i]
            .iter()
            .flat_map(|s| s.train.iter().copied())
            .collect()
    }

    pub fn stats(&self) -> Vec<SnapshotStats> {
        self.snapshots.iter().map(Snapshot::stats).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, r: usize, t: usize) -> Triple {
        Triple::new(h, r, t)
    }

    #[test]
    fn delta_adds_one_entity() {
        let prev = Snapshot::from_triples(0, vec![t(0, 0, 1)], 2, 1).unwrap();
        let d = compute_delta(&prev, &[t(0, 0, 1), t(1, 0, 2)]).unwrap();
        assert_eq!(d.new_entities, vec![2]);
        assert!(d.new_relations.is_empty());
        assert_eq!(d.new_triples, vec![t(1, 0, 2)]);
    }

    #[test]
    fn identical_triples_give_empty_delta() {
        let prev = Snapshot::from_triples(0, vec![t(0, 0, 1), t(1, 0, 0)], 2, 1).unwrap();
        let d = compute_delta(&prev, &[t(1, 0, 0), t(0, 0, 1)]).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn gap_in_new_ids_is_rejected() {
        let prev = Snapshot::from_triples(0, vec![t(0, 0, 1)], 2, 1).unwrap();
        let err = compute_delta(&prev, &[t(1, 0, 3)]).unwrap_err();
        assert!(matches!(err, Error::InconsistentId(_)));
    }

    #[test]
    fn snapshot_rejects_out_of_range_ids() {
        assert!(matches!(
            Snapshot::from_triples(0, vec![t(0, 1, 1)], 2, 1),
            Err(Error::InconsistentId(_))
        ));
        assert!(matches!(
            Snapshot::from_triples(0, vec![t(0, 0, 2)], 2, 1),
            Err(Error::InconsistentId(_))
        ));
    }

    #[test]
    fn wordnet_scale_delta_counts() {
        // Snapshot 0: 24,567 entities / 11 relations / 55,801 triples.
        // Snapshot 1: 9,300 triples bringing the vocabulary to 28,660 entities.
        let (e0, r0, n0) = (24_567usize, 11usize, 55_801usize);
        let mut prev = Vec::with_capacity(n0);
        for k in 0..n0 {
            prev.push(t(k % e0, k % r0, (k * 7 + 1) % e0));
        }
        let prev = Snapshot::from_triples(0, prev, e0, r0).unwrap();
        let mut cur = Vec::with_capacity(9_300);
        for k in 0..9_300usize {
            let new = e0 + (k % 4_093);
            cur.push(t(new, k % r0, (k * 13) % e0));
        }
        let d = compute_delta(&prev, &cur).unwrap();
        assert_eq!(d.new_entities.len(), 4_093);
        assert_eq!(e0 + d.new_entities.len(), 28_660);
        assert_eq!(d.new_relations.len(), 0);
        assert_eq!(d.new_triples.len(), 9_300);
    }

    #[test]
    fn neighbor_counts() {
        let (a, b, c) = (0, 1, 2);
        assert_eq!(neighbors_in(&[t(a, 0, b), t(a, 0, c)], a), 2);
        assert_eq!(neighbors_in(&[t(a, 0, a)], a), 0);
        assert_eq!(neighbors_in(&[t(a, 0, b), t(c, 0, a), t(a, 1, b)], a), 2);
        assert_eq!(neighbors_in(&[t(b, 0, c)], a), 0);
    }

    #[test]
    fn adjacency_matches_neighbors_in() {
        let triples = vec![t(0, 0, 1), t(2, 0, 0), t(0, 1, 1), t(3, 0, 3)];
        let adj = Adjacency::from_triples(&triples);
        for e in 0..4 {
            assert_eq!(adj.degree(e), neighbors_in(&triples, e));
        }
        assert_eq!(adj.entities().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn growing_kg_checks_counts() {
        let s0 = Snapshot::from_triples(0, vec![t(0, 0, 1)], 2, 1).unwrap();
        let s1 = Snapshot::from_triples(1, vec![t(1, 0, 2)], 3, 1).unwrap();
        let kg = GrowingKg::from_snapshots(vec![s0.clone(), s1]).unwrap();
        assert_eq!(kg.delta(0).new_entities, vec![0, 1]);
        assert_eq!(kg.delta(1).new_entities, vec![2]);

        let bad = Snapshot::from_triples(1, vec![t(1, 0, 1)], 3, 1).unwrap();
        assert!(GrowingKg::from_snapshots(vec![s0, bad]).is_err());
    }
}
