//! Snapshot-by-snapshot training.
//!
//! Snapshot 0 trains dense origin tables. Later snapshots, depending on the
//! mode:
//!
//! * `FastKge` layers the new entities, allocates ranks adaptively and trains
//!   one factor per layer plus a relation factor; everything older is frozen.
//! * `NoGl` trains a single entity factor of rank `r_base`.
//! * `NoIncLora` appends dense rows and fine-tunes every parameter.
//!
//! The loss is the margin ranking loss `max(0, E(pos) − E(neg) + γ)` summed
//! over the batch, optimized with Adam. Embedding rows of factorized
//! entities are composed per batch from `A[row] · B`, and row gradients are
//! pushed back as `∂A[row] += g Bᵀ`, `∂B += A[row]ᵀ g`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, evaluate_triples, EvalReport, RankSetting};
use crate::kg::{GrowingKg, Triple};
use crate::layering::{build_layer_plan, sort_new_entities, LayerPlan};
use crate::matrix::Matrix;
use crate::scorer::ScoreFunction;
use crate::store::{
    allocate_ranks, clamp_rank, create_group, freeze_group, group_entity_block, AdapterStore,
    EmbeddingView, GroupOffsets, LoraGroup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    #[serde(rename = "fastkge")]
    FastKge,
    #[serde(rename = "no_inclora")]
    NoIncLora,
    #[serde(rename = "no_gl")]
    NoGl,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::FastKge, TrainingMode::NoIncLora, TrainingMode::NoGl];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::FastKge => "fastkge",
            TrainingMode::NoIncLora => "no_inclora",
            TrainingMode::NoGl => "no_gl",
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dim: usize,
    pub r_base: usize,
    pub relation_rank: usize,
    pub num_layers: usize,
    pub negatives_per_positive: usize,
    pub negative_retries: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub mode: TrainingMode,
    pub scorer: ScoreFunction,
    /// Setting of the per-snapshot evaluation reports.
    pub eval_setting: RankSetting,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            learning_rate: 0.1,
            batch_size: 512,
            dim: 200,
            r_base: 100,
            relation_rank: 20,
            num_layers: 5,
            negatives_per_positive: 1,
            negative_retries: 10,
            early_stop_patience: 3,
            max_epochs: 200,
            mode: TrainingMode::FastKge,
            scorer: ScoreFunction::TransEL1,
            eval_setting: RankSetting::Raw,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.margin > 0.0, "margin must be positive"),
            (self.learning_rate > 0.0, "learning rate must be positive"),
            (self.batch_size >= 1, "batch size must be at least 1"),
            (self.dim >= 1, "embedding dimension must be at least 1"),
            (self.r_base >= 1, "base rank must be at least 1"),
            (self.relation_rank >= 1, "relation rank must be at least 1"),
            (self.num_layers >= 1, "number of layers must be at least 1"),
            (self.negatives_per_positive >= 1, "need at least one negative per positive"),
            (self.early_stop_patience >= 1, "patience must be at least 1"),
            (self.max_epochs >= 1, "max epochs must be at least 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::InvalidConfig((*msg).into()));
        }
        self.scorer.check_dim(self.dim)
    }
}

/// `max(0, pos − neg + γ)` on lower-is-better energies. NaN passes
/// through so divergence stays visible.
pub fn margin_loss(pos_energy: f64, neg_energy: f64, margin: f64) -> f64 {
    let x = pos_energy - neg_energy + margin;
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Corrupts the head or tail (fair coin) with a uniform entity from
/// `0..vocab_size`, redrawing up to `retries` times while the corruption is
/// a known triple. Returns the last draw if every retry collides.
pub fn sample_negative<R: Rng + ?Sized>(
    triple: Triple,
    vocab_size: usize,
    is_known: impl Fn(&Triple) -> bool,
    retries: usize,
    rng: &mut R,
) -> Triple {
    let mut candidate = triple;
    for _ in 0..=retries {
        let e = rng.gen_range(0..vocab_size);
        candidate = if rng.gen_bool(0.5) {
            Triple::new(e, triple.relation, triple.tail)
        } else {
            Triple::new(triple.head, triple.relation, e)
        };
        if candidate != triple && !is_known(&candidate) {
            break;
        }
    }
    candidate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Frozen(usize),
    Dense(usize),
    Factor { factor: usize, local: usize },
}

/// The parameters that a single snapshot trains, together with read access
/// to every frozen row they interact with.
///
/// Trainable tensors are, in order: dense entity table, dense relation
/// table (dense models only), then `A` and `B` of each entity factor and
/// of the relation factor.
#[derive(Debug, Clone)]
pub struct TrainableModel {
    dim: usize,
    frozen: EmbeddingView,
    dense: Option<(Matrix, Matrix)>,
    group: Option<LoraGroup>,
    entity_slots: Vec<Slot>,
    relation_slots: Vec<Slot>,
}

/// One buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    fn zero(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

impl TrainableModel {
    /// Every row trainable.
    pub fn dense(entities: Matrix, relations: Matrix) -> Result<Self> {
        if entities.cols() != relations.cols() {
            return Err(Error::Shape("entity and relation widths differ".into()));
        }
        Ok(Self {
            dim: entities.cols(),
            frozen: EmbeddingView {
                entities: Matrix::zeros(0, entities.cols()),
                relations: Matrix::zeros(0, entities.cols()),
            },
            entity_slots: (0..entities.rows()).map(Slot::Dense).collect(),
            relation_slots: (0..relations.rows()).map(Slot::Dense).collect(),
            dense: Some((entities, relations)),
            group: None,
        })
    }

    /// Rows of `frozen` stay fixed; `group` supplies the rows after them.
    pub fn with_group(frozen: EmbeddingView, group: LoraGroup) -> Result<Self> {
        let dim = frozen.dim();
        let (n_e, n_r) = (frozen.num_entities(), frozen.num_relations());
        // validates offsets and the slot permutation
        group_entity_block(&group, n_e, dim)?;
        let mut entity_slots: Vec<Slot> = (0..n_e).map(Slot::Frozen).collect();
        entity_slots.resize(n_e + group.num_entities(), Slot::Frozen(usize::MAX));
        let mut slot = 0;
        for (factor, f) in group.entity_factors.iter().enumerate() {
            for local in 0..f.rows() {
                entity_slots[group.entity_order[slot]] = Slot::Factor { factor, local };
                slot += 1;
            }
        }
        let mut relation_slots: Vec<Slot> = (0..n_r).map(Slot::Frozen).collect();
        if let Some(f) = &group.relation_factor {
            if f.row_offset != n_r || f.dim() != dim {
                return Err(Error::OffsetGap(format!(
                    "relation factor starts at {} after {n_r} frozen rows",
                    f.row_offset
                )));
            }
            let factor = group.entity_factors.len();
            relation_slots.extend((0..f.rows()).map(|local| Slot::Factor { factor, local }));
        }
        Ok(Self {
            dim,
            frozen,
            dense: None,
            group: Some(group),
            entity_slots,
            relation_slots,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entity_slots.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_slots.len()
    }

    pub fn group(&self) -> Option<&LoraGroup> {
        self.group.as_ref()
    }

    pub fn into_dense(self) -> Option<(Matrix, Matrix)> {
        self.dense
    }

    pub fn into_group(self) -> Option<LoraGroup> {
        self.group
    }

    fn factor(&self, index: usize) -> &crate::store::LoraFactor {
        let g = self.group.as_ref().expect("factor slots imply a group");
        if index < g.entity_factors.len() {
            &g.entity_factors[index]
        } else {
            g.relation_factor.as_ref().expect("relation slot implies a relation factor")
        }
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some((e, r)) = &self.dense {
            out.push(e.as_slice());
            out.push(r.as_slice());
        }
        if let Some(g) = &self.group {
            for f in g.factors() {
                out.push(f.a.as_slice());
                out.push(f.b.as_slice());
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some((e, r)) = &mut self.dense {
            out.push(e.as_mut_slice());
            out.push(r.as_mut_slice());
        }
        if let Some(g) = &mut self.group {
            for f in g.factors_mut() {
                out.push(f.a.as_mut_slice());
                out.push(f.b.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn row_into(&self, slot: Slot, relation: bool, dst: &mut [f64]) {
        match slot {
            Slot::Frozen(i) => {
                let m = if relation { &self.frozen.relations } else { &self.frozen.entities };
                dst.copy_from_slice(m.row(i));
            }
            Slot::Dense(i) => {
                let (e, r) = self.dense.as_ref().expect("dense slots imply dense tables");
                dst.copy_from_slice(if relation { r.row(i) } else { e.row(i) });
            }
            Slot::Factor { factor, local } => self.factor(factor).row_into(local, dst),
        }
    }

    pub fn entity_row(&self, id: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.row_into(self.entity_slots[id], false, &mut v);
        v
    }

    pub fn relation_row(&self, id: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.row_into(self.relation_slots[id], true, &mut v);
        v
    }

    /// Full composed view of the current parameters.
    pub fn view(&self) -> EmbeddingView {
        let mut entities = Matrix::zeros(self.num_entities(), self.dim);
        for (id, &slot) in self.entity_slots.iter().enumerate() {
            self.row_into(slot, false, entities.row_mut(id));
        }
        let mut relations = Matrix::zeros(self.num_relations(), self.dim);
        for (id, &slot) in self.relation_slots.iter().enumerate() {
            self.row_into(slot, true, relations.row_mut(id));
        }
        EmbeddingView { entities, relations }
    }

    fn tensor_index(&self, slot: Slot, relation: bool) -> Option<usize> {
        let dense_tensors = if self.dense.is_some() { 2 } else { 0 };
        match slot {
            Slot::Frozen(_) => None,
            Slot::Dense(_) => Some(usize::from(relation)),
            Slot::Factor { factor, .. } => Some(dense_tensors + 2 * factor),
        }
    }

    /// Pushes the gradient of one composed row back onto its parameters.
    fn backprop_row(&self, slot: Slot, relation: bool, g: &[f64], grads: &mut Gradients) {
        let Some(t) = self.tensor_index(slot, relation) else {
            return;
        };
        match slot {
            Slot::Frozen(_) => {}
            Slot::Dense(i) => {
                let dst = &mut grads.tensors[t][i * self.dim..(i + 1) * self.dim];
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Slot::Factor { factor, local } => {
                let f = self.factor(factor);
                let d = self.dim;
                if f.dense_fallback {
                    let dst = &mut grads.tensors[t + 1][local * d..(local + 1) * d];
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    return;
                }
                let r = f.rank;
                let a_row = f.a.row(local);
                let (ga, gb) = {
                    let (lo, hi) = grads.tensors.split_at_mut(t + 1);
                    (&mut lo[t], &mut hi[0])
                };
                for k in 0..r {
                    let b_row = f.b.row(k);
                    ga[local * r + k] += g.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                    let ak = a_row[k];
                    if ak != 0.0 {
                        gb[k * d..(k + 1) * d]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(dst, x)| *dst += ak * x);
                    }
                }
            }
        }
    }

    /// Summed margin loss of `(positive, negative)` pairs; gradients are
    /// accumulated into `grads` (which is not cleared first).
    pub fn accumulate_loss_and_gradients(
        &self,
        pairs: &[(Triple, Triple)],
        scorer: ScoreFunction,
        margin: f64,
        grads: &mut Gradients,
    ) -> f64 {
        self.accumulate_with(&mut BatchWorkspace::default(), pairs, scorer, margin, grads)
    }

    /// As [`accumulate_loss_and_gradients`](Self::accumulate_loss_and_gradients),
    /// reusing `ws` across batches.
    pub fn accumulate_with(
        &self,
        ws: &mut BatchWorkspace,
        pairs: &[(Triple, Triple)],
        scorer: ScoreFunction,
        margin: f64,
        grads: &mut Gradients,
    ) -> f64 {
        let d = self.dim;
        ws.gather(pairs, self.num_entities(), self.num_relations());
        ws.ent_rows.resize(ws.ent_ids.len() * d, 0.0);
        for (k, &e) in ws.ent_ids.iter().enumerate() {
            self.row_into(self.entity_slots[e], false, &mut ws.ent_rows[k * d..(k + 1) * d]);
        }
        ws.rel_rows.resize(ws.rel_ids.len() * d, 0.0);
        for (k, &r) in ws.rel_ids.iter().enumerate() {
            self.row_into(self.relation_slots[r], true, &mut ws.rel_rows[k * d..(k + 1) * d]);
        }
        ws.ent_frozen.clear();
        ws.ent_frozen.extend(ws.ent_ids.iter().map(|&e| matches!(self.entity_slots[e], Slot::Frozen(_))));
        ws.rel_frozen.clear();
        ws.rel_frozen.extend(ws.rel_ids.iter().map(|&r| matches!(self.relation_slots[r], Slot::Frozen(_))));
        ws.ent_grads.clear();
        ws.ent_grads.resize(ws.ent_rows.len(), 0.0);
        ws.rel_grads.clear();
        ws.rel_grads.resize(ws.rel_rows.len(), 0.0);
        let (mut gh, mut gr, mut gt) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        fn row(buf: &[f64], k: usize, d: usize) -> &[f64] {
            &buf[k * d..(k + 1) * d]
        }
        fn add(buf: &mut [f64], k: usize, d: usize, g: &[f64]) {
            buf[k * d..(k + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }

        let mut loss = 0.0;
        for (p, n) in pairs {
            let (ph, pr, pt) = ws.positions(p);
            let (nh, nr, nt) = ws.positions(n);
            let (er, rr) = (&ws.ent_rows, &ws.rel_rows);
            let pos = scorer.energy(row(er, ph, d), row(rr, pr, d), row(er, pt, d));
            let neg = scorer.energy(row(er, nh, d), row(rr, nr, d), row(er, nt, d));
            let l = margin_loss(pos, neg, margin);
            loss += l;
            if l <= 0.0 {
                continue;
            }
            for (scale, (h, r, t)) in [(1.0, (ph, pr, pt)), (-1.0, (nh, nr, nt))] {
                // gradients of an all-frozen triple would be discarded
                if ws.ent_frozen[h] && ws.ent_frozen[t] && ws.rel_frozen[r] {
                    continue;
                }
                gh.iter_mut().for_each(|x| *x = 0.0);
                gr.iter_mut().for_each(|x| *x = 0.0);
                gt.iter_mut().for_each(|x| *x = 0.0);
                scorer.energy_grad(row(er, h, d), row(rr, r, d), row(er, t, d), scale, &mut gh, &mut gr, &mut gt);
                add(&mut ws.ent_grads, h, d, &gh);
                add(&mut ws.ent_grads, t, d, &gt);
                add(&mut ws.rel_grads, r, d, &gr);
            }
        }
        for (k, &e) in ws.ent_ids.iter().enumerate() {
            self.backprop_row(self.entity_slots[e], false, &ws.ent_grads[k * d..(k + 1) * d], grads);
        }
        for (k, &r) in ws.rel_ids.iter().enumerate() {
            self.backprop_row(self.relation_slots[r], true, &ws.rel_grads[k * d..(k + 1) * d], grads);
        }
        loss
    }

    /// Loss and freshly allocated gradients.
    pub fn loss_and_gradients(&self, pairs: &[(Triple, Triple)], scorer: ScoreFunction, margin: f64) -> (f64, Gradients) {
        let mut grads = self.zero_gradients();
        let loss = self.accumulate_loss_and_gradients(pairs, scorer, margin, &mut grads);
        (loss, grads)
    }

    /// Summed margin loss only.
    pub fn loss(&self, pairs: &[(Triple, Triple)], scorer: ScoreFunction, margin: f64) -> f64 {
        pairs
            .iter()
            .map(|(p, n)| {
                let pos = scorer.energy(&self.entity_row(p.head), &self.relation_row(p.relation), &self.entity_row(p.tail));
                let neg = scorer.energy(&self.entity_row(n.head), &self.relation_row(n.relation), &self.entity_row(n.tail));
                margin_loss(pos, neg, margin)
            })
            .sum()
    }
}

/// Scratch buffers for one batch: the distinct rows it touches, their
/// composed values and their gradients.
#[derive(Debug, Clone, Default)]
pub struct BatchWorkspace {
    ent_pos: Vec<usize>,
    rel_pos: Vec<usize>,
    ent_ids: Vec<usize>,
    rel_ids: Vec<usize>,
    ent_rows: Vec<f64>,
    rel_rows: Vec<f64>,
    ent_grads: Vec<f64>,
    rel_grads: Vec<f64>,
    ent_frozen: Vec<bool>,
    rel_frozen: Vec<bool>,
}

impl BatchWorkspace {
    fn gather(&mut self, pairs: &[(Triple, Triple)], entities: usize, relations: usize) {
        for &e in &self.ent_ids {
            self.ent_pos[e] = usize::MAX;
        }
        for &r in &self.rel_ids {
            self.rel_pos[r] = usize::MAX;
        }
        self.ent_ids.clear();
        self.rel_ids.clear();
        self.ent_pos.resize(entities, usize::MAX);
        self.rel_pos.resize(relations, usize::MAX);
        for (p, n) in pairs {
            for e in [p.head, p.tail, n.head, n.tail] {
                if self.ent_pos[e] == usize::MAX {
                    self.ent_pos[e] = self.ent_ids.len();
                    self.ent_ids.push(e);
                }
            }
            for r in [p.relation, n.relation] {
                if self.rel_pos[r] == usize::MAX {
                    self.rel_pos[r] = self.rel_ids.len();
                    self.rel_ids.push(r);
                }
            }
        }
    }

    fn positions(&self, t: &Triple) -> (usize, usize, usize) {
        (self.ent_pos[t.head], self.rel_pos[t.relation], self.ent_pos[t.tail])
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Gradients) {
        if self.m.is_empty() {
            self.m = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub snapshot: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_mrr: Option<f64>,
    /// Summed loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Optimization time, excluding validation passes.
    pub train_seconds: f64,
    pub validation_seconds: f64,
    pub trainable_params: usize,
    pub layer_sizes: Vec<usize>,
    pub layer_ranks: Vec<usize>,
}

fn derived_seed(seed: u64, snapshot: usize, stream: u64) -> u64 {
    seed ^ (snapshot as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

/// Layer plan for snapshot `i` in the given mode (`NoGl` uses one layer).
pub fn plan_for_snapshot(kg: &GrowingKg, i: usize, cfg: &TrainingConfig) -> Result<LayerPlan> {
    let delta = kg.delta(i);
    let sorted = sort_new_entities(kg.previous_entity_count(i), &delta.new_entities, &kg.snapshot(i).train);
    let layers = match cfg.mode {
        TrainingMode::NoGl => 1,
        _ => cfg.num_layers.min(sorted.len()).max(1),
    };
    build_layer_plan(&sorted, &delta.new_relations, layers)
}

/// Trains a growing KG one snapshot at a time, keeping the learned
/// parameters in an [`AdapterStore`].
#[derive(Debug, Clone)]
pub struct ContinualTrainer {
    cfg: TrainingConfig,
    store: AdapterStore,
    trained: usize,
}

impl ContinualTrainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            store: AdapterStore::new(cfg.dim),
            cfg,
            trained: 0,
        })
    }

    /// Resumes from a store holding snapshots `0..trained`.
    pub fn resume(cfg: TrainingConfig, store: AdapterStore, trained: usize) -> Result<Self> {
        cfg.validate()?;
        if store.dim != cfg.dim {
            return Err(Error::Shape(format!("store width {} vs configured {}", store.dim, cfg.dim)));
        }
        Ok(Self { cfg, store, trained })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn store(&self) -> &AdapterStore {
        &self.store
    }

    pub fn into_store(self) -> AdapterStore {
        self.store
    }

    pub fn snapshots_trained(&self) -> usize {
        self.trained
    }

    pub fn view(&self) -> Result<EmbeddingView> {
        self.store.view()
    }

    /// Trains snapshot `i`, which must be the next untrained one.
    pub fn train_snapshot(&mut self, kg: &GrowingKg, i: usize) -> Result<TrainStats> {
        if i != self.trained || i >= kg.len() {
            return Err(Error::InvalidConfig(format!(
                "snapshot {i} cannot be trained next ({} trained, graph has {})",
                self.trained,
                kg.len()
            )));
        }
        let setup = Instant::now();
        let snap = kg.snapshot(i);
        let new_e = snap.entity_count - kg.previous_entity_count(i);
        let new_r = snap.relation_count - kg.previous_relation_count(i);
        let mut init_rng = ChaCha8Rng::seed_from_u64(derived_seed(self.cfg.seed, i, INIT_STREAM));
        let dense = i == 0 || self.cfg.mode == TrainingMode::NoIncLora;
        let (mut model, layer_sizes, layer_ranks) = if dense {
            self.store.grow_origin(new_e, new_r, &mut init_rng)?;
            let e = std::mem::replace(&mut self.store.origin_entities, Matrix::zeros(0, self.cfg.dim));
            let r = std::mem::replace(&mut self.store.origin_relations, Matrix::zeros(0, self.cfg.dim));
            (TrainableModel::dense(e, r)?, Vec::new(), Vec::new())
        } else {
            let plan = plan_for_snapshot(kg, i, &self.cfg)?;
            let ranks = match self.cfg.mode {
                TrainingMode::NoGl => plan
                    .entity_layers
                    .iter()
                    .map(|l| clamp_rank(self.cfg.r_base, l.len(), self.cfg.dim))
                    .collect(),
                _ => allocate_ranks(&plan, self.cfg.r_base, self.cfg.dim),
            };
            let offsets = GroupOffsets {
                entity: kg.previous_entity_count(i),
                relation: kg.previous_relation_count(i),
            };
            let group = create_group(
                i,
                &plan,
                &ranks,
                self.cfg.dim,
                self.cfg.relation_rank,
                offsets,
                init_rng.gen(),
            )?;
            let sizes: Vec<usize> = group.entity_factors.iter().map(|f| f.rows()).collect();
            let ranks: Vec<usize> = group.entity_factors.iter().map(|f| f.rank).collect();
            (TrainableModel::with_group(self.store.view()?, group)?, sizes, ranks)
        };
        let mut stats = TrainStats {
            snapshot: i,
            epochs: 0,
            best_epoch: 0,
            best_valid_mrr: None,
            loss_curve: Vec::new(),
            train_seconds: 0.0,
            validation_seconds: 0.0,
            trainable_params: model.parameter_count(),
            layer_sizes,
            layer_ranks,
        };
        stats.train_seconds += setup.elapsed().as_secs_f64();

        if stats.trainable_params > 0 && !snap.train.is_empty() {
            self.optimize(kg, i, &mut model, &mut stats)?;
        }

        if dense {
            let (e, r) = model.into_dense().expect("dense model");
            self.store.origin_entities = e;
            self.store.origin_relations = r;
        } else {
            let mut group = model.into_group().expect("group model");
            freeze_group(&mut group);
            self.store.groups.push(group);
        }
        self.trained += 1;
        Ok(stats)
    }

    fn optimize(&self, kg: &GrowingKg, i: usize, model: &mut TrainableModel, stats: &mut TrainStats) -> Result<()> {
        let cfg = &self.cfg;
        let snap = kg.snapshot(i);
        let mut known: Vec<Triple> = kg.train_triples_upto(i).into_iter().collect();
        known.sort_unstable();
        let is_known = |t: &Triple| known.binary_search(t).is_ok();
        let vocab = snap.entity_count;
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, i, SAMPLE_STREAM));
        let mut adam = Adam::new(cfg.learning_rate);
        let mut grads = model.zero_gradients();
        let mut ws = BatchWorkspace::default();
        let mut order: Vec<Triple> = snap.train.clone();
        let mut pairs = Vec::with_capacity(cfg.batch_size * cfg.negatives_per_positive);
        let mut best_mrr = f64::NEG_INFINITY;
        let mut best_params: Option<Vec<Vec<f64>>> = None;

        for epoch in 1..=cfg.max_epochs {
            let started = Instant::now();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                pairs.clear();
                for &p in batch {
                    for _ in 0..cfg.negatives_per_positive {
                        let n = if vocab >= 2 {
                            sample_negative(p, vocab, is_known, cfg.negative_retries, &mut rng)
                        } else {
                            p
                        };
                        pairs.push((p, n));
                    }
                }
                grads.zero();
                epoch_loss += model.accumulate_with(&mut ws, &pairs, cfg.scorer, cfg.margin, &mut grads);
                adam.step(model.parameters_mut(), &grads);
            }
            stats.train_seconds += started.elapsed().as_secs_f64();
            stats.epochs = epoch;
            stats.loss_curve.push(epoch_loss);
            if !epoch_loss.is_finite() {
                return Err(Error::Diverged {
                    snapshot: i,
                    epoch,
                    detail: format!("epoch loss is {epoch_loss}"),
                });
            }
            if snap.valid.is_empty() {
                stats.best_epoch = epoch;
                continue;
            }
            let started = Instant::now();
            let view = model.view();
            let mrr = evaluate_triples(&view, &snap.valid, cfg.scorer, RankSetting::Raw, None, view.num_entities())?.mrr;
            stats.validation_seconds += started.elapsed().as_secs_f64();
            if mrr > best_mrr {
                best_mrr = mrr;
                stats.best_epoch = epoch;
                stats.best_valid_mrr = Some(mrr);
                best_params = Some(model.parameters().iter().map(|p| p.to_vec()).collect());
            } else if epoch - stats.best_epoch >= cfg.early_stop_patience {
                break;
            }
        }
        if let Some(best) = best_params {
            if stats.best_epoch != stats.epochs {
                for (dst, src) in model.parameters_mut().into_iter().zip(best) {
                    dst.copy_from_slice(&src);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub train: TrainStats,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainingConfig,
    pub snapshots: Vec<SnapshotReport>,
    /// Sum of per-snapshot training time; excludes loading and evaluation.
    pub total_train_seconds: f64,
}

impl RunReport {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.snapshots.last().map(|s| &s.eval)
    }

    /// Trainable parameters per snapshot.
    pub fn trainable_params(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.train.trainable_params).collect()
    }
}

/// Trains every snapshot in order, evaluating after each one. `on_snapshot`
/// sees the trainer after each snapshot (for checkpoints).
pub fn run_continual_with(
    kg: &GrowingKg,
    cfg: &TrainingConfig,
    mut on_snapshot: impl FnMut(&ContinualTrainer, &SnapshotReport) -> Result<()>,
) -> Result<(RunReport, AdapterStore)> {
    if kg.is_empty() {
        return Err(Error::InvalidConfig("the graph has no snapshots".into()));
    }
    let mut trainer = ContinualTrainer::new(cfg.clone())?;
    let mut snapshots = Vec::with_capacity(kg.len());
    for i in 0..kg.len() {
        let train = trainer.train_snapshot(kg, i)?;
        let view = trainer.view()?;
        let eval = evaluate(&view, kg, i, cfg.scorer, cfg.eval_setting)?;
        log::info!(
            "snapshot {i}: {} epochs, {:.3}s, {} params, avg MRR {:.4}",
            train.epochs,
            train.train_seconds,
            train.trainable_params,
            eval.average.mrr
        );
        let report = SnapshotReport { train, eval };
        on_snapshot(&trainer, &report)?;
        snapshots.push(report);
    }
    let total_train_seconds = snapshots.iter().map(|s| s.train.train_seconds).sum();
    Ok((
        RunReport {
            config: cfg.clone(),
            snapshots,
            total_train_seconds,
        },
        trainer.into_store(),
    ))
}

pub fn run_continual(kg: &GrowingKg, cfg: &TrainingConfig) -> Result<(RunReport, AdapterStore)> {
    run_continual_with(kg, cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::kg::Snapshot;

    #[test]
    fn hinge_examples() {
        assert_eq!(margin_loss(0.5, 1.0, 1.0), 0.5);
        assert_eq!(margin_loss(0.0, 5.0, 1.0), 0.0);
        assert_eq!(margin_loss(2.0, 2.0, 1.0), 1.0);
    }

    #[test]
    fn negative_never_returns_known_when_avoidable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Triple::new(0, 0, 1);
        let known: HashSet<Triple> = [t].into();
        for _ in 0..1000 {
            let n = sample_negative(t, 10, |x| known.contains(x), 10, &mut rng);
            assert_ne!(n, t);
            assert!(n.head == t.head || n.tail == t.tail);
            assert_eq!(n.relation, 0);
        }
    }

    #[test]
    fn two_entity_vocabulary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Triple::new(0, 0, 1);
        let known: HashSet<Triple> = [t].into();
        for _ in 0..200 {
            let n = sample_negative(t, 2, |x| known.contains(x), 10, &mut rng);
            assert!(n.head < 2 && n.tail < 2);
        }
    }

    #[test]
    fn modes_parse() {
        for m in TrainingMode::ALL {
            assert_eq!(m.name().parse::<TrainingMode>().unwrap(), m);
        }
        assert!("lora".parse::<TrainingMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig { early_stop_patience: 0, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
        let odd = TrainingConfig { dim: 5, scorer: ScoreFunction::RotatE, ..TrainingConfig::default() };
        assert!(matches!(odd.validate(), Err(Error::OddDimension(..))));
    }

    #[test]
    fn tiny_graph_loss_decreases() {
        let train = vec![
            Triple::new(0, 0, 1),
            Triple::new(1, 0, 2),
            Triple::new(2, 0, 3),
            Triple::new(3, 0, 4),
        ];
        let s0 = Snapshot::from_triples(0, train, 5, 1).unwrap();
        let kg = GrowingKg::from_snapshots(vec![s0]).unwrap();
        let cfg = TrainingConfig {
            dim: 8,
            batch_size: 4,
            max_epochs: 200,
            learning_rate: 0.01,
            ..TrainingConfig::default()
        };
        let mut trainer = ContinualTrainer::new(cfg).unwrap();
        let stats = trainer.train_snapshot(&kg, 0).unwrap();
        assert_eq!(stats.epochs, 200);
        assert!(stats.loss_curve.last().unwrap() < &stats.loss_curve[0]);
        assert!(trainer.train_snapshot(&kg, 0).is_err());
    }
}
