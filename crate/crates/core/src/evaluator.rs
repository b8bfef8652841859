//! Link-prediction evaluation over a composed embedding view.
//!
//! Each test triple yields a head query `(?, r, t)` and a tail query
//! `(h, r, ?)`. Candidates are all entities of the view (or a prefix of them
//! when a smaller candidate vocabulary is requested). Ties use the mean-rank
//! convention, rounded to the pessimistic side.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, GrowingKg, Triple};
use crate::scorer::{score_against_all_heads, score_against_all_tails, ScoreFunction};
use crate::store::EmbeddingView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSetting {
    #[default]
    Raw,
    Filtered,
}

impl fmt::Display for RankSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankSetting::Raw => "raw",
            RankSetting::Filtered => "filtered",
        })
    }
}

impl FromStr for RankSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(RankSetting::Raw),
            "filtered" => Ok(RankSetting::Filtered),
            _ => Err(Error::InvalidConfig(format!("unknown ranking setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySide {
    Head,
    Tail,
}

/// Rank of `truth` among `plausibility` (higher is better), skipping
/// candidates for which `skip` returns true. The truth itself is never skipped.
pub fn rank_of(plausibility: &[f64], truth: EntityId, skip: impl Fn(EntityId) -> bool) -> usize {
    let target = plausibility[truth];
    let (mut better, mut equal) = (0usize, 0usize);
    for (c, &p) in plausibility.iter().enumerate() {
        if c != truth && skip(c) {
            continue;
        }
        if p > target {
            better += 1;
        } else if p == target {
            equal += 1;
        }
    }
    // mean of positions better+1 ..= better+equal, .5 rounded up
    better + (equal + 2) / 2
}

/// Plausibility of every candidate `< num_candidates` for one side of `triple`.
pub(crate) fn candidate_plausibility(
    view: &EmbeddingView,
    triple: Triple,
    side: QuerySide,
    f: ScoreFunction,
    num_candidates: usize,
) -> Result<Vec<f64>> {
    let mut scores = match side {
        QuerySide::Tail => score_against_all_tails(view, triple.head, triple.relation, f)?,
        QuerySide::Head => score_against_all_heads(view, triple.relation, triple.tail, f)?,
    };
    scores.truncate(num_candidates);
    if !f.higher_is_better() {
        scores.iter_mut().for_each(|s| *s = -*s);
    }
    Ok(scores)
}

/// 1-based rank of the missing entity of `triple` on `side`.
///
/// In the filtered setting every other candidate forming a triple in
/// `known` is removed first.
pub fn rank_query(
    view: &EmbeddingView,
    triple: Triple,
    side: QuerySide,
    f: ScoreFunction,
    setting: RankSetting,
    known: Option<&HashSet<Triple>>,
) -> Result<usize> {
    rank_query_among(view, triple, side, f, setting, known, view.num_entities())
}

fn rank_query_among(
    view: &EmbeddingView,
    triple: Triple,
    side: QuerySide,
    f: ScoreFunction,
    setting: RankSetting,
    known: Option<&HashSet<Triple>>,
    num_candidates: usize,
) -> Result<usize> {
    let truth = match side {
        QuerySide::Head => triple.head,
        QuerySide::Tail => triple.tail,
    };
    if truth >= num_candidates {
        return Err(Error::UnknownId {
            kind: "entity",
            id: truth,
            size: num_candidates,
        });
    }
    let plaus = candidate_plausibility(view, triple, side, f, num_candidates)?;
    let rank = match (setting, known) {
        (RankSetting::Filtered, Some(known)) => rank_of(&plaus, truth, |c| {
            let candidate = match side {
                QuerySide::Head => Triple::new(c, triple.relation, triple.tail),
                QuerySide::Tail => Triple::new(triple.head, triple.relation, c),
            };
            known.contains(&candidate)
        }),
        (RankSetting::Filtered, None) => {
            return Err(Error::InvalidConfig(
                "filtered ranking needs the set of known triples".into(),
            ))
        }
        (RankSetting::Raw, _) => rank_of(&plaus, truth, |_| false),
    };
    Ok(rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
        }
    }

    /// Unweighted mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let items: Vec<&Metrics> = items.into_iter().collect();
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        Self {
            mrr: items.iter().map(|m| m.mrr).sum::<f64>() / n,
            hits1: items.iter().map(|m| m.hits1).sum::<f64>() / n,
            hits3: items.iter().map(|m| m.hits3).sum::<f64>() / n,
            hits10: items.iter().map(|m| m.hits10).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub snapshot: usize,
    pub triple: Triple,
    pub side: QuerySide,
    pub rank: usize,
}

/// Ranks of both queries of every triple, in triple order (tail query first).
pub fn rank_triples(
    view: &EmbeddingView,
    triples: &[Triple],
    f: ScoreFunction,
    setting: RankSetting,
    known: Option<&HashSet<Triple>>,
    num_candidates: usize,
) -> Result<Vec<(Triple, QuerySide, usize)>> {
    let per_triple: Vec<Result<[(Triple, QuerySide, usize); 2]>> = triples
        .par_iter()
        .map(|&t| {
            let tail = rank_query_among(view, t, QuerySide::Tail, f, setting, known, num_candidates)?;
            let head = rank_query_among(view, t, QuerySide::Head, f, setting, known, num_candidates)?;
            Ok([(t, QuerySide::Tail, tail), (t, QuerySide::Head, head)])
        })
        .collect();
    let mut out = Vec::with_capacity(triples.len() * 2);
    for pair in per_triple {
        out.extend(pair?);
    }
    Ok(out)
}

/// Metrics for one triple list against the first `num_candidates` entities.
pub fn evaluate_triples(
    view: &EmbeddingView,
    triples: &[Triple],
    f: ScoreFunction,
    setting: RankSetting,
    known: Option<&HashSet<Triple>>,
    num_candidates: usize,
) -> Result<Metrics> {
    let ranks: Vec<usize> = rank_triples(view, triples, f, setting, known, num_candidates)?
        .into_iter()
        .map(|(_, _, r)| r)
        .collect();
    Ok(Metrics::from_ranks(&ranks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Evaluated with the view of this snapshot.
    pub snapshot: usize,
    pub per_snapshot: BTreeMap<usize, Metrics>,
    pub average: Metrics,
    pub num_queries: usize,
    pub setting: RankSetting,
}

/// Evaluates the test splits of snapshots `0..=up_to` with `view`, ranking
/// against every entity of the view. The average is the unweighted mean
/// over snapshots with a non-empty test split.
pub fn evaluate(
    view: &EmbeddingView,
    kg: &GrowingKg,
    up_to: usize,
    f: ScoreFunction,
    setting: RankSetting,
) -> Result<EvalReport> {
    Ok(evaluate_with_ranks(view, kg, up_to, f, setting)?.0)
}

/// [`evaluate`] plus every per-query rank.
pub fn evaluate_with_ranks(
    view: &EmbeddingView,
    kg: &GrowingKg,
    up_to: usize,
    f: ScoreFunction,
    setting: RankSetting,
) -> Result<(EvalReport, Vec<QueryRank>)> {
    if up_to >= kg.len() {
        return Err(Error::InvalidConfig(format!(
            "snapshot {up_to} requested from a {}-snapshot graph",
            kg.len()
        )));
    }
    let known = (setting == RankSetting::Filtered).then(|| kg.known_triples(up_to));
    let mut per_snapshot = BTreeMap::new();
    let mut all = Vec::new();
    for j in 0..=up_to {
        let test = &kg.snapshot(j).test;
        if test.is_empty() {
            continue;
        }
        let ranked = rank_triples(view, test, f, setting, known.as_ref(), view.num_entities())?;
        let ranks: Vec<usize> = ranked.iter().map(|r| r.2).collect();
        per_snapshot.insert(j, Metrics::from_ranks(&ranks));
        all.extend(ranked.into_iter().map(|(triple, side, rank)| QueryRank {
            snapshot: j,
            triple,
            side,
            rank,
        }));
    }
    let report = EvalReport {
        snapshot: up_to,
        average: Metrics::mean(per_snapshot.values()),
        per_snapshot,
        num_queries: all.len(),
        setting,
    };
    Ok((report, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn unique_best_is_rank_one() {
        assert_eq!(rank_of(&[0.1, 0.9, 0.3], 1, |_| false), 1);
        assert_eq!(rank_of(&[0.1, 0.9, 0.3], 0, |_| false), 3);
    }

    #[test]
    fn ties_use_pessimistic_mean() {
        assert_eq!(rank_of(&[0.5; 5], 2, |_| false), 3);
        assert_eq!(rank_of(&[0.5; 4], 0, |_| false), 3);
        assert_eq!(rank_of(&[0.5, 0.5], 0, |_| false), 2);
        assert_eq!(rank_of(&[0.9, 0.5, 0.5], 1, |_| false), 3);
    }

    #[test]
    fn filtering_skips_other_truths() {
        assert_eq!(rank_of(&[0.9, 0.8, 0.1], 1, |c| c == 0), 1);
        assert_eq!(rank_of(&[0.9, 0.8, 0.1], 1, |c| c == 1), 2);
    }

    #[test]
    fn metric_examples() {
        let m = Metrics::from_ranks(&[1, 2]);
        assert_eq!(m.mrr, 0.75);
        assert_eq!(m.hits1, 0.5);
        let m = Metrics::from_ranks(&[1, 2, 4]);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits3, 2.0 / 3.0);
        assert_eq!(m.hits10, 1.0);
    }

    #[test]
    fn filtered_needs_known_set() {
        let view = EmbeddingView {
            entities: Matrix::zeros(3, 2),
            relations: Matrix::zeros(1, 2),
        };
        let t = Triple::new(0, 0, 1);
        assert!(rank_query(&view, t, QuerySide::Tail, ScoreFunction::TransEL1, RankSetting::Filtered, None).is_err());
        assert_eq!(
            rank_query(&view, t, QuerySide::Tail, ScoreFunction::TransEL1, RankSetting::Raw, None).unwrap(),
            2
        );
        let bad = Triple::new(0, 0, 7);
        assert!(matches!(
            rank_query(&view, bad, QuerySide::Tail, ScoreFunction::TransEL1, RankSetting::Raw, None),
            Err(Error::UnknownId { .. })
        ));
    }
}
