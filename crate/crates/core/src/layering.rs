//! Ordering and partitioning a snapshot's new entities into layers.
//!
//! New entities are ranked by hop distance from the old graph (a
//! multi-source BFS over the new triples, seeded from every old entity they
//! mention), then by degree centrality within the new triples, then by id.
//! The ranked sequence is cut into `N` contiguous layers whose sizes differ
//! by at most one, earlier layers taking the remainder.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{neighbors_in, Adjacency, EntityId, RelationId, Triple};

/// Hop distance from the old graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Hops(u32),
    Unreachable,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Hops(h) => write!(f, "{h}"),
            Distance::Unreachable => f.write_str("unreachable"),
        }
    }
}

/// `neighbors / (delta_entity_count - 1)`; zero when there is only one new entity.
pub fn degree_centrality(delta_triples: &[Triple], entity: EntityId, delta_entity_count: usize) -> f64 {
    centrality_from_degree(neighbors_in(delta_triples, entity), delta_entity_count)
}

fn centrality_from_degree(neighbors: usize, delta_entity_count: usize) -> f64 {
    if delta_entity_count <= 1 {
        0.0
    } else {
        neighbors as f64 / (delta_entity_count - 1) as f64
    }
}

/// New entities in layering order with their distances and centralities
/// (all three vectors aligned).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SortedEntities {
    pub order: Vec<EntityId>,
    pub distances: Vec<Distance>,
    pub centrality: Vec<f64>,
}

impl SortedEntities {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Sorts `new_entities` by (distance ascending, centrality descending, id).
///
/// Every entity id below `old_entity_count` that occurs in `delta_triples` is
/// a BFS seed at distance 0. Traversal uses only `delta_triples`, undirected.
pub fn sort_new_entities(
    old_entity_count: usize,
    new_entities: &[EntityId],
    delta_triples: &[Triple],
) -> SortedEntities {
    let adj = Adjacency::from_triples(delta_triples);
    let mut dist: BTreeMap<EntityId, u32> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for e in adj.entities().filter(|&e| e < old_entity_count) {
        dist.insert(e, 0);
        queue.push_back(e);
    }
    while let Some(e) = queue.pop_front() {
        let next = dist[&e] + 1;
        for &n in adj.neighbors(e) {
            if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(n) {
                slot.insert(next);
                queue.push_back(n);
            }
        }
    }

    let count = new_entities.len();
    let mut rows: Vec<(Distance, f64, EntityId)> = new_entities
        .iter()
        .map(|&e| {
            let d = dist.get(&e).map_or(Distance::Unreachable, |&h| Distance::Hops(h));
            (d, centrality_from_degree(adj.degree(e), count), e)
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| b.1.total_cmp(&a.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    SortedEntities {
        order: rows.iter().map(|r| r.2).collect(),
        distances: rows.iter().map(|r| r.0).collect(),
        centrality: rows.iter().map(|r| r.1).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub entity_layers: Vec<Vec<EntityId>>,
    pub relation_layer: Vec<RelationId>,
    pub per_layer_dc_sum: Vec<f64>,
    pub distances: BTreeMap<EntityId, Distance>,
}

impl LayerPlan {
    pub fn num_layers(&self) -> usize {
        self.entity_layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.entity_layers.iter().map(Vec::len).collect()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_layers.iter().map(Vec::len).sum()
    }

    /// Layers concatenated in order.
    pub fn entity_order(&self) -> Vec<EntityId> {
        self.entity_layers.concat()
    }

    pub fn is_empty(&self) -> bool {
        self.num_entities() == 0 && self.relation_layer.is_empty()
    }

    /// Writes the `layers_<i>.json` debug dump into `dir`.
    pub fn dump(&self, dir: &Path, snapshot: usize) -> Result<()> {
        #[derive(Serialize)]
        struct Layer<'a> {
            entities: &'a [EntityId],
            distances: Vec<Distance>,
            dc_sum: f64,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            snapshot: usize,
            layers: Vec<Layer<'a>>,
            relations: &'a [RelationId],
        }
        let dump = Dump {
            snapshot,
            layers: self
                .entity_layers
                .iter()
                .zip(&self.per_layer_dc_sum)
                .map(|(layer, &dc_sum)| Layer {
                    entities: layer,
                    distances: layer.iter().map(|e| self.distances[e]).collect(),
                    dc_sum,
                })
                .collect(),
            relations: &self.relation_layer,
        };
        let path = dir.join(format!("layers_{snapshot}.json"));
        fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
    }
}

/// Cuts the sorted sequence into `num_layers` contiguous layers.
///
/// An empty sequence yields a plan with `num_layers` empty layers.
pub fn build_layer_plan(
    sorted: &SortedEntities,
    new_relations: &[RelationId],
    num_layers: usize,
) -> Result<LayerPlan> {
    if num_layers == 0 {
        return Err(Error::InvalidConfig("number of layers must be at least 1".into()));
    }
    let n = sorted.len();
    if n > 0 && num_layers > n {
        return Err(Error::InvalidConfig(format!(
            "{num_layers} layers requested for {n} new entities"
        )));
    }
    let (base, extra) = (n / num_layers, n % num_layers);
    let mut entity_layers = Vec::with_capacity(num_layers);
    let mut per_layer_dc_sum = Vec::with_capacity(num_layers);
    let mut start = 0;
    for k in 0..num_layers {
        let size = base + usize::from(k < extra);
        entity_layers.push(sorted.order[start..start + size].to_vec());
        per_layer_dc_sum.push(sorted.centrality[start..start + size].iter().sum());
        start += size;
    }
    let mut relation_layer = new_relations.to_vec();
    relation_layer.sort_unstable();
    relation_layer.dedup();
    Ok(LayerPlan {
        entity_layers,
        relation_layer,
        per_layer_dc_sum,
        distances: sorted
            .order
            .iter()
            .copied()
            .zip(sorted.distances.iter().copied())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, r: usize, t: usize) -> Triple {
        Triple::new(h, r, t)
    }

    fn sorted_of(order: Vec<usize>, dc: Vec<f64>) -> SortedEntities {
        SortedEntities {
            distances: vec![Distance::Hops(1); order.len()],
            order,
            centrality: dc,
        }
    }

    #[test]
    fn centrality_values() {
        // entity 0 linked to 1, 2, 3; 7 new entities overall.
        let ts = [t(0, 0, 1), t(0, 0, 2), t(3, 0, 0)];
        assert_eq!(degree_centrality(&ts, 0, 7), 0.5);
        assert_eq!(degree_centrality(&ts, 9, 7), 0.0);
        let star = [t(0, 0, 1), t(0, 0, 2), t(0, 0, 3), t(0, 0, 4)];
        assert_eq!(degree_centrality(&star, 0, 5), 1.0);
        assert_eq!(degree_centrality(&ts, 0, 1), 0.0);
    }

    #[test]
    fn chain_order() {
        // old entity 0; new entities 1 (a) and 2 (b).
        let s = sort_new_entities(1, &[2, 1], &[t(0, 0, 1), t(1, 0, 2)]);
        assert_eq!(s.order, vec![1, 2]);
        assert_eq!(s.distances, vec![Distance::Hops(1), Distance::Hops(2)]);
    }

    #[test]
    fn centrality_breaks_ties() {
        // old 0; new 1..=5. Entity 2 has more new-graph neighbors than 1.
        let ts = [
            t(0, 0, 1),
            t(0, 0, 2),
            t(2, 0, 3),
            t(2, 0, 4),
            t(1, 0, 5),
        ];
        let s = sort_new_entities(1, &[1, 2, 3, 4, 5], &ts);
        assert_eq!(&s.order[..2], &[2, 1]);
        assert!(s.centrality[0] > s.centrality[1]);
    }

    #[test]
    fn isolated_component_sorts_last() {
        // old 0; 1-2-3 hang off 0, 4-5-6 form a separate component.
        let ts = [
            t(0, 0, 1),
            t(1, 0, 2),
            t(2, 0, 3),
            t(4, 0, 5),
            t(5, 0, 6),
            t(6, 0, 4),
        ];
        let s = sort_new_entities(1, &[1, 2, 3, 4, 5, 6], &ts);
        assert_eq!(s.order, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(&s.distances[3..], &[Distance::Unreachable; 3]);
    }

    #[test]
    fn even_layers() {
        let s = sorted_of((0..10).collect(), vec![0.1; 10]);
        let plan = build_layer_plan(&s, &[], 5).unwrap();
        assert_eq!(plan.layer_sizes(), vec![2; 5]);
        assert_eq!(plan.entity_order(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn remainder_goes_first() {
        let s = sorted_of((0..7).collect(), vec![0.0; 7]);
        let plan = build_layer_plan(&s, &[3, 1], 5).unwrap();
        assert_eq!(plan.layer_sizes(), vec![2, 2, 1, 1, 1]);
        assert_eq!(plan.relation_layer, vec![1, 3]);
    }

    #[test]
    fn dc_sums() {
        let s = sorted_of(vec![0, 1, 2, 3], vec![0.3, 0.3, 0.2, 0.2]);
        let plan = build_layer_plan(&s, &[], 2).unwrap();
        assert!((plan.per_layer_dc_sum[0] - 0.6).abs() < 1e-12);
        assert!((plan.per_layer_dc_sum[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_and_invalid_layer_counts() {
        let plan = build_layer_plan(&SortedEntities::default(), &[0], 3).unwrap();
        assert_eq!(plan.num_entities(), 0);
        assert_eq!(plan.num_layers(), 3);
        let s = sorted_of(vec![0, 1], vec![0.0; 2]);
        assert!(build_layer_plan(&s, &[], 3).is_err());
        assert!(build_layer_plan(&s, &[], 0).is_err());
    }
}
