//! Retrieval and localization metrics over raw rankings.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::bow::BowVector;
use crate::error::{Error, Result};
use crate::geometry::{circular_error, Pose2D};
use crate::index::InverseIndex;
use crate::synth::overlap_ratio;

/// Per query, the database images overlapping it by at least `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceJudgments {
    threshold: f64,
    relevant: BTreeMap<u64, BTreeSet<u64>>,
}

impl RelevanceJudgments {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "overlap threshold must be in (0, 1], got {threshold}"
            )));
        }
        Ok(Self {
            threshold,
            relevant: BTreeMap::new(),
        })
    }

    /// Judges every query pose against every database pose by footprint overlap.
    pub fn from_poses(
        queries: &[(u64, Pose2D)],
        database: &[(u64, Pose2D)],
        fov_mm: (f64, f64),
        threshold: f64,
    ) -> Result<Self> {
        let mut j = Self::new(threshold)?;
        for (q, qp) in queries {
            let set = database
                .iter()
                .filter(|(_, dp)| overlap_ratio(qp, dp, fov_mm) >= threshold)
                .map(|(id, _)| *id)
                .collect();
            j.relevant.insert(*q, set);
        }
        Ok(j)
    }

    pub fn insert(&mut self, query: u64, relevant: BTreeSet<u64>) {
        self.relevant.insert(query, relevant);
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Empty for unknown queries.
    pub fn relevant(&self, query: u64) -> &BTreeSet<u64> {
        static EMPTY: BTreeSet<u64> = BTreeSet::new();
        self.relevant.get(&query).unwrap_or(&EMPTY)
    }

    pub fn is_relevant(&self, query: u64, image: u64) -> bool {
        self.relevant(query).contains(&image)
    }

    pub fn queries(&self) -> impl Iterator<Item = u64> + '_ {
        self.relevant.keys().copied()
    }
}

/// Mean over relevant hits within `cutoff` of precision at the hit,
/// normalized by `min(|relevant|, cutoff)`. `None` when `relevant` is empty.
pub fn average_precision(ranked: &[u64], relevant: &BTreeSet<u64>, cutoff: usize) -> Result<Option<f64>> {
    if cutoff == 0 {
        return Err(Error::invalid("cutoff must be at least 1"));
    }
    if relevant.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, id) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(acc / relevant.len().min(cutoff) as f64))
}

/// A query's ranked `(image_id, score)` list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub query_id: u64,
    pub results: Vec<(u64, f64)>,
}

impl Ranking {
    pub fn ids(&self) -> Vec<u64> {
        self.results.iter().map(|r| r.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    pub per_query: Vec<(u64, f64)>,
    /// Queries with no relevant image, left out of the mean.
    pub excluded: Vec<u64>,
}

pub fn map_from_rankings(rankings: &[Ranking], judgments: &RelevanceJudgments, cutoff: usize) -> Result<MapReport> {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for r in rankings {
        match average_precision(&r.ids(), judgments.relevant(r.query_id), cutoff)? {
            Some(ap) => per_query.push((r.query_id, ap)),
            None => excluded.push(r.query_id),
        }
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64
    };
    Ok(MapReport {
        map,
        per_query,
        excluded,
    })
}

/// Ranks every query (top `cutoff`) and averages AP over queries that have
/// at least one relevant image.
pub fn mean_average_precision(
    index: &InverseIndex,
    queries: &[BowVector],
    judgments: &RelevanceJudgments,
    cutoff: usize,
) -> Result<MapReport> {
    let rankings = rank_all(index, queries, cutoff)?;
    map_from_rankings(&rankings, judgments, cutoff)
}

pub fn rank_all(index: &InverseIndex, queries: &[BowVector], top_n: usize) -> Result<Vec<Ranking>> {
    use rayon::prelude::*;
    queries
        .par_iter()
        .map(|q| {
            let res = index.query_scores(q, top_n)?;
            Ok(Ranking {
                query_id: q.image_id,
                results: res.candidates.iter().map(|c| (c.image_id, c.score)).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallCurve {
    pub points: Vec<(usize, f64)>,
    pub queries: usize,
    pub excluded: Vec<u64>,
}

impl RecallCurve {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == n).map(|p| p.1)
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].0 > w[1].0 || w[1].1 >= w[0].1)
    }

    /// At least as high at every N and strictly higher at the smallest N.
    pub fn dominates(&self, other: &RecallCurve) -> bool {
        let mut strict = false;
        for (i, &(n, r)) in self.points.iter().enumerate() {
            match other.at(n) {
                Some(o) if r >= o => strict |= i == 0 && r > o,
                _ => return false,
            }
        }
        strict
    }
}

/// Fraction of queries with a relevant image among the top `N`, for each
/// `N`. Queries with no relevant image are excluded.
pub fn recall_from_rankings(rankings: &[Ranking], judgments: &RelevanceJudgments, n_values: &[usize]) -> RecallCurve {
    let mut first_hit = Vec::new();
    let mut excluded = Vec::new();
    for r in rankings {
        let rel = judgments.relevant(r.query_id);
        if rel.is_empty() {
            excluded.push(r.query_id);
            continue;
        }
        first_hit.push(r.results.iter().position(|(id, _)| rel.contains(id)));
    }
    let total = first_hit.len();
    let points = n_values
        .iter()
        .map(|&n| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|p| p < n)).count();
            (n, if total == 0 { 0.0 } else { hits as f64 / total as f64 })
        })
        .collect();
    RecallCurve {
        points,
        queries: total,
        excluded,
    }
}

pub fn recall_at_n(
    index: &InverseIndex,
    queries: &[BowVector],
    judgments: &RelevanceJudgments,
    n_values: &[usize],
) -> Result<RecallCurve> {
    let top = n_values.iter().copied().max().unwrap_or(0);
    let rankings = rank_all(index, queries, top)?;
    Ok(recall_from_rankings(&rankings, judgments, n_values))
}

/// One retrieved image with its score and ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredResult {
    pub query_id: u64,
    pub image_id: u64,
    pub score: f64,
    pub is_true_positive: bool,
}

/// The top `top_k` results of every judged query, labelled.
pub fn score_lists(rankings: &[Ranking], judgments: &RelevanceJudgments, top_k: usize) -> Vec<ScoredResult> {
    rankings
        .iter()
        .filter(|r| !judgments.relevant(r.query_id).is_empty())
        .flat_map(|r| {
            r.results
                .iter()
                .take(top_k)
                .map(move |&(image_id, score)| ScoredResult {
                    query_id: r.query_id,
                    image_id,
                    score,
                    is_true_positive: judgments.is_relevant(r.query_id, image_id),
                })
        })
        .collect()
}

/// Linearly interpolated quantile of `values` at `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub retained: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Picks the score threshold below which a `target_fp_rejection` fraction of
/// false-positive scores fall, and reports the fraction of true-positive
/// scores at or above it.
pub fn threshold_analysis(tp_scores: &[f64], fp_scores: &[f64], target_fp_rejection: f64) -> Result<ThresholdReport> {
    if !(0.0..=1.0).contains(&target_fp_rejection) {
        return Err(Error::invalid(format!(
            "target rejection must be in [0, 1], got {target_fp_rejection}"
        )));
    }
    if tp_scores.is_empty() || fp_scores.is_empty() {
        return Err(Error::InsufficientData(
            "threshold analysis needs both true and false positives".into(),
        ));
    }
    let threshold = quantile(fp_scores, target_fp_rejection).expect("non-empty");
    let kept = tp_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(ThresholdReport {
        threshold,
        retained: kept as f64 / tp_scores.len() as f64,
        true_positives: tp_scores.len(),
        false_positives: fp_scores.len(),
    })
}

pub fn threshold_from_scores(scores: &[ScoredResult], target_fp_rejection: f64) -> Result<ThresholdReport> {
    let tp: Vec<f64> = scores.iter().filter(|s| s.is_true_positive).map(|s| s.score).collect();
    let fp: Vec<f64> = scores.iter().filter(|s| !s.is_true_positive).map(|s| s.score).collect();
    threshold_analysis(&tp, &fp, target_fp_rejection)
}

pub const DEFAULT_TRANS_TOL_MM: f64 = 4.8;
pub const DEFAULT_ROT_TOL_DEG: f64 = 1.5;

pub fn localization_success(estimate: &Pose2D, truth: &Pose2D, trans_tol_mm: f64, rot_tol_deg: f64) -> bool {
    estimate.translation_error(truth) <= trans_tol_mm
        && circular_error(estimate.theta_deg, truth.theta_deg) <= rot_tol_deg
}
