//! Incremental low-rank adapter store.
//!
//! Every snapshot after the first stores the embeddings of its new entities
//! as a group of factor pairs `(A_k, B_k)`, one per layer, whose product *is*
//! the layer's embedding block. New relations get one factor of a fixed rank.
//! Full embedding tables are the origin tables followed by each group's
//! composed rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::layering::LayerPlan;
use crate::matrix::Matrix;

/// Largest rank whose factorization is strictly smaller than the dense
/// `n × d` block: `r (n + d) < n d`. Zero when no such rank exists.
pub fn max_rank(n: usize, d: usize) -> usize {
    if n == 0 || d == 0 {
        return 0;
    }
    (n * d - 1) / (n + d)
}

/// One adapter. For a regular factor `a` is `n × r` and `b` is `r × d`.
/// With `dense_fallback` set, `a` is empty and `b` holds the `n × d` rows
/// directly (a single-row layer admits no rank that saves parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub row_offset: usize,
    pub trainable: bool,
    pub dense_fallback: bool,
}

impl LoraFactor {
    pub fn low_rank(a: Matrix, b: Matrix, row_offset: usize) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "factor ranks disagree: A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            rank: a.cols(),
            a,
            b,
            row_offset,
            trainable: true,
            dense_fallback: false,
        })
    }

    pub fn dense(rows: Matrix, row_offset: usize) -> Self {
        Self {
            rank: rows.rows().min(rows.cols()),
            a: Matrix::zeros(rows.rows(), 0),
            b: rows,
            row_offset,
            trainable: true,
            dense_fallback: true,
        }
    }

    pub fn rows(&self) -> usize {
        if self.dense_fallback {
            self.b.rows()
        } else {
            self.a.rows()
        }
    }

    pub fn dim(&self) -> usize {
        self.b.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Writes embedding row `local` into `dst`.
    pub fn row_into(&self, local: usize, dst: &mut [f64]) {
        if self.dense_fallback {
            dst.copy_from_slice(self.b.row(local));
        } else {
            self.a.row_times(local, &self.b, dst);
        }
    }

    pub fn compose(&self) -> Matrix {
        if self.dense_fallback {
            self.b.clone()
        } else {
            self.a.matmul(&self.b).expect("factor shapes checked at construction")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGroup {
    pub snapshot_index: usize,
    /// Global entity id of each slot, in layer order.
    pub entity_order: Vec<EntityId>,
    pub entity_factors: Vec<LoraFactor>,
    pub relation_factor: Option<LoraFactor>,
}

impl LoraGroup {
    pub fn factors(&self) -> impl Iterator<Item = &LoraFactor> {
        self.entity_factors.iter().chain(self.relation_factor.as_ref())
    }

    pub fn factors_mut(&mut self) -> impl Iterator<Item = &mut LoraFactor> {
        self.entity_factors
            .iter_mut()
            .chain(self.relation_factor.as_mut())
    }

    pub fn num_entities(&self) -> usize {
        self.entity_factors.iter().map(LoraFactor::rows).sum()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_factor.as_ref().map_or(0, LoraFactor::rows)
    }

    pub fn parameter_count(&self) -> usize {
        self.factors().map(LoraFactor::parameter_count).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.factors().all(|f| !f.trainable)
    }
}

/// Freezes every factor of `group`. Idempotent.
pub fn freeze_group(group: &mut LoraGroup) {
    for f in group.factors_mut() {
        f.trainable = false;
    }
}

/// Unrounded ranks `r_base · Sum_k / Avg_dc` with `Avg_dc = ΣSum / N`.
/// All-zero sums give `r_base` everywhere.
pub fn raw_ranks(dc_sums: &[f64], r_base: usize) -> Vec<f64> {
    let total: f64 = dc_sums.iter().sum();
    if dc_sums.is_empty() || total <= 0.0 {
        return vec![r_base as f64; dc_sums.len()];
    }
    let avg = total / dc_sums.len() as f64;
    dc_sums.iter().map(|&s| r_base as f64 * s / avg).collect()
}

/// Per-layer ranks: raw ranks rounded half-up, then clamped into
/// `[1, max_rank(n_k, d)]`. Empty layers get rank 0.
pub fn allocate_ranks(plan: &LayerPlan, r_base: usize, dim: usize) -> Vec<usize> {
    raw_ranks(&plan.per_layer_dc_sum, r_base)
        .into_iter()
        .zip(&plan.entity_layers)
        .map(|(raw, layer)| clamp_rank((raw + 0.5).floor() as usize, layer.len(), dim))
        .collect()
}

pub(crate) fn clamp_rank(rank: usize, n: usize, dim: usize) -> usize {
    if n == 0 {
        0
    } else {
        rank.clamp(1, max_rank(n, dim).max(1))
    }
}

/// Origin-table initialization scale.
pub fn origin_bound(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

pub(crate) fn init_factor(n: usize, rank: usize, dim: usize, row_offset: usize, rng: &mut ChaCha8Rng) -> LoraFactor {
    if max_rank(n, dim) == 0 {
        return LoraFactor::dense(Matrix::uniform(n, dim, origin_bound(dim), rng), row_offset);
    }
    let rank = clamp_rank(rank, n, dim);
    let a = Matrix::uniform(n, rank, 1.0 / (rank as f64).sqrt(), rng);
    let b = Matrix::uniform(rank, dim, 1.0 / (dim as f64).sqrt(), rng);
    LoraFactor::low_rank(a, b, row_offset).expect("shapes agree")
}

/// Where a group's rows start in the global tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupOffsets {
    pub entity: usize,
    pub relation: usize,
}

/// Creates a trainable group: one factor per non-empty entity layer with the
/// given rank, plus one relation factor of `relation_rank` when the plan has
/// new relations. Ranks are clamped to the savings bound.
pub fn create_group(
    snapshot_index: usize,
    plan: &LayerPlan,
    ranks: &[usize],
    dim: usize,
    relation_rank: usize,
    offsets: GroupOffsets,
    seed: u64,
) -> Result<LoraGroup> {
    if ranks.len() != plan.num_layers() {
        return Err(Error::Shape(format!(
            "{} ranks for {} layers",
            ranks.len(),
            plan.num_layers()
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entity_factors = Vec::new();
    let mut slot = offsets.entity;
    for (layer, &rank) in plan.entity_layers.iter().zip(ranks) {
        if layer.is_empty() {
            continue;
        }
        entity_factors.push(init_factor(layer.len(), rank, dim, slot, &mut rng));
        slot += layer.len();
    }
    let relation_factor = (!plan.relation_layer.is_empty()).then(|| {
        init_factor(
            plan.relation_layer.len(),
            relation_rank,
            dim,
            offsets.relation,
            &mut rng,
        )
    });
    Ok(LoraGroup {
        snapshot_index,
        entity_order: plan.entity_order(),
        entity_factors,
        relation_factor,
    })
}

/// Parameters of the still-trainable factors of the groups for `snapshot_index`.
pub fn trainable_parameter_count(groups: &[LoraGroup], snapshot_index: usize) -> usize {
    groups
        .iter()
        .filter(|g| g.snapshot_index == snapshot_index)
        .flat_map(LoraGroup::factors)
        .filter(|f| f.trainable)
        .map(LoraFactor::parameter_count)
        .sum()
}

/// Full, read-only embedding tables; row `g` belongs to id `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingView {
    pub entities: Matrix,
    pub relations: Matrix,
}

impl EmbeddingView {
    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn checksum(&self) -> u64 {
        self.entities.checksum() ^ self.relations.checksum().rotate_left(1)
    }
}

/// Composed entity rows of `group`, scattered so row `j` is entity `start + j`.
pub(crate) fn group_entity_block(group: &LoraGroup, start: usize, dim: usize) -> Result<Matrix> {
    let n = group.num_entities();
    if group.entity_order.len() != n {
        return Err(Error::OffsetGap(format!(
            "group {} orders {} entities but its factors cover {n}",
            group.snapshot_index,
            group.entity_order.len()
        )));
    }
    let mut expect = start;
    for f in &group.entity_factors {
        if f.row_offset != expect {
            return Err(Error::OffsetGap(format!(
                "group {} factor starts at slot {} where {expect} was expected",
                group.snapshot_index, f.row_offset
            )));
        }
        if f.dim() != dim {
            return Err(Error::Shape(format!(
                "factor width {} differs from embedding dimension {dim}",
                f.dim()
            )));
        }
        expect += f.rows();
    }
    let mut block = Matrix::zeros(n, dim);
    let mut filled = vec![false; n];
    let mut slot = 0;
    for f in &group.entity_factors {
        let composed = f.compose();
        for local in 0..f.rows() {
            let id = group.entity_order[slot];
            let Some(j) = id.checked_sub(start).filter(|&j| j < n && !filled[j]) else {
                return Err(Error::OffsetGap(format!(
                    "group {} maps a slot to entity {id}, outside [{start}, {}) or repeated",
                    group.snapshot_index,
                    start + n
                )));
            };
            filled[j] = true;
            block.row_mut(j).copy_from_slice(composed.row(local));
            slot += 1;
        }
    }
    Ok(block)
}

/// Origin tables followed by every group's composed rows, in group order.
pub fn compose(
    origin_entities: &Matrix,
    origin_relations: &Matrix,
    groups: &[LoraGroup],
) -> Result<EmbeddingView> {
    let dim = origin_entities.cols();
    if origin_relations.cols() != dim {
        return Err(Error::Shape(format!(
            "origin widths differ: {} vs {}",
            dim,
            origin_relations.cols()
        )));
    }
    let mut entities = origin_entities.clone();
    let mut relations = origin_relations.clone();
    for group in groups {
        let block = group_entity_block(group, entities.rows(), dim)?;
        entities.push_rows(&block)?;
        if let Some(f) = &group.relation_factor {
            if f.row_offset != relations.rows() {
                return Err(Error::OffsetGap(format!(
                    "group {} relation factor starts at {} where {} was expected",
                    group.snapshot_index,
                    f.row_offset,
                    relations.rows()
                )));
            }
            if f.dim() != dim {
                return Err(Error::Shape(format!(
                    "relation factor width {} differs from {dim}",
                    f.dim()
                )));
            }
            relations.push_rows(&f.compose())?;
        }
    }
    Ok(EmbeddingView {
        entities,
        relations,
    })
}

/// Origin tables plus the list of groups, i.e. everything a run learns.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStore {
    pub dim: usize,
    pub origin_entities: Matrix,
    pub origin_relations: Matrix,
    pub groups: Vec<LoraGroup>,
}

impl AdapterStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            origin_entities: Matrix::zeros(0, dim),
            origin_relations: Matrix::zeros(0, dim),
            groups: Vec::new(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.origin_entities.rows() + self.groups.iter().map(LoraGroup::num_entities).sum::<usize>()
    }

    pub fn num_relations(&self) -> usize {
        self.origin_relations.rows() + self.groups.iter().map(LoraGroup::num_relations).sum::<usize>()
    }

    pub fn view(&self) -> Result<EmbeddingView> {
        compose(&self.origin_entities, &self.origin_relations, &self.groups)
    }

    /// Appends freshly initialized dense rows to the origin tables.
    pub fn grow_origin(&mut self, entities: usize, relations: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if !self.groups.is_empty() && (entities > 0 || relations > 0) {
            return Err(Error::InvalidConfig(
                "origin rows cannot grow once adapter groups exist".into(),
            ));
        }
        let bound = origin_bound(self.dim);
        self.origin_entities
            .push_rows(&Matrix::uniform(entities, self.dim, bound, rng))?;
        self.origin_relations
            .push_rows(&Matrix::uniform(relations, self.dim, bound, rng))?;
        Ok(())
    }

    pub fn trainable_parameter_count(&self, snapshot_index: usize) -> usize {
        trainable_parameter_count(&self.groups, snapshot_index)
    }
}
