//! System configurations, the ablation grid and the experiment driver that
//! runs them against a benchmark.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::benchmark::{Benchmark, TrainedVocabularies};
use super::metrics::{
    localization_success, map_from_rankings, rank_all, recall_from_rankings, score_lists, threshold_from_scores,
    MapReport, Ranking, RecallCurve, ThresholdReport, DEFAULT_ROT_TOL_DEG, DEFAULT_TRANS_TOL_MM,
};
use crate::bow::{transform_assigned, AssignParams, BowVector};
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::index::{IndexParams, InverseIndex};
use crate::localize::{localize_bow, FeatureStore, LocalizeParams, RansacParams};
use crate::vocab::{ann::Hits, Assignment, Vocabulary, VocabularyKind};

/// Every knob that differs between the compared systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub vocab: VocabularyKind,
    pub size_binning: bool,
    pub assign: AssignParams,
    pub orientation_bins: u32,
    pub weighted_ransac: bool,
}

impl SystemConfig {
    /// Tree vocabulary, one size bin, hard assignment, no orientation bins.
    pub fn baseline() -> Self {
        Self {
            vocab: VocabularyKind::Hkm,
            size_binning: false,
            assign: AssignParams::hard(),
            orientation_bins: 1,
            weighted_ransac: false,
        }
    }

    pub fn high_accuracy() -> Self {
        Self {
            vocab: VocabularyKind::Akm,
            size_binning: true,
            assign: AssignParams::default(),
            orientation_bins: 6,
            weighted_ransac: true,
        }
    }

    pub fn fast() -> Self {
        Self {
            assign: AssignParams::hard(),
            weighted_ransac: false,
            ..Self::high_accuracy()
        }
    }

    pub fn index_params(&self) -> IndexParams {
        IndexParams::with_bins(self.orientation_bins)
    }
}

/// One row of the ablation: which modifications are applied on top of the
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub size_binning: bool,
    pub akm: bool,
    /// `r` when soft assignment is on.
    pub soft_assignment: Option<usize>,
    /// `R` when orientation verification is on.
    pub orientation_verification: Option<u32>,
}

impl AblationConfig {
    pub const BASELINE: Self = Self {
        size_binning: false,
        akm: false,
        soft_assignment: None,
        orientation_verification: None,
    };

    /// The standard rows: baseline, each modification, the fast and the
    /// high-accuracy systems.
    pub fn table_rows() -> Vec<Self> {
        let b = Self::BASELINE;
        vec![
            b,
            Self {
                size_binning: true,
                ..b
            },
            Self { akm: true, ..b },
            Self {
                akm: true,
                soft_assignment: Some(3),
                ..b
            },
            Self {
                orientation_verification: Some(6),
                ..b
            },
            Self::fast(),
            Self::high_accuracy(),
        ]
    }

    pub fn fast() -> Self {
        Self {
            size_binning: true,
            akm: true,
            soft_assignment: None,
            orientation_verification: Some(6),
        }
    }

    pub fn high_accuracy() -> Self {
        Self {
            soft_assignment: Some(3),
            ..Self::fast()
        }
    }

    pub fn label(&self) -> String {
        if *self == Self::fast() {
            return "fast".into();
        }
        if *self == Self::high_accuracy() {
            return "high-accuracy".into();
        }
        let mut s = String::from("baseline");
        if self.size_binning {
            s.push_str(" + SB");
        }
        if self.akm {
            s.push_str(" + AKM");
        }
        if let Some(r) = self.soft_assignment {
            let _ = write!(s, " + SA(r={r})");
        }
        if let Some(r) = self.orientation_verification {
            let _ = write!(s, " + OV(R={r})");
        }
        s
    }

    pub fn system(&self, sigma: f64) -> SystemConfig {
        SystemConfig {
            vocab: if self.akm {
                VocabularyKind::Akm
            } else {
                VocabularyKind::Hkm
            },
            size_binning: self.size_binning,
            assign: AssignParams {
                r: self.soft_assignment.unwrap_or(1),
                sigma,
            },
            orientation_bins: self.orientation_verification.unwrap_or(1),
            weighted_ransac: self.soft_assignment.is_some_and(|r| r > 1),
        }
    }
}

struct CachedHits {
    r: usize,
    database: Vec<Vec<Hits>>,
    queries: Vec<Vec<Hits>>,
}

/// A benchmark plus trained vocabularies. Nearest-word lookups are cached
/// per vocabulary kind so configurations differing only in `r`, `S` or `R`
/// share them.
pub struct Experiment<'a> {
    pub bench: &'a Benchmark,
    pub vocabs: &'a TrainedVocabularies,
    cache: Mutex<HashMap<(VocabularyKind, usize), Arc<CachedHits>>>,
}

/// The outcome of running one configuration: the vectors and the built index.
pub struct SystemRun {
    pub config: SystemConfig,
    pub database: Vec<BowVector>,
    pub queries: Vec<BowVector>,
    pub index: InverseIndex,
}

impl<'a> Experiment<'a> {
    pub fn new(bench: &'a Benchmark, vocabs: &'a TrainedVocabularies) -> Self {
        Self {
            bench,
            vocabs,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Computes the nearest-word lists needed by `configs` up front, taking
    /// the largest `r` per flat vocabulary so smaller `r` reuse its prefix.
    pub fn prepare(&self, configs: &[SystemConfig]) -> Result<()> {
        let mut need: HashMap<(VocabularyKind, usize), ()> = HashMap::new();
        let akm_max = configs
            .iter()
            .filter(|c| c.vocab == VocabularyKind::Akm)
            .map(|c| c.assign.r)
            .max();
        if let Some(r) = akm_max {
            need.insert((VocabularyKind::Akm, r), ());
        }
        for c in configs.iter().filter(|c| c.vocab == VocabularyKind::Hkm) {
            need.insert((VocabularyKind::Hkm, c.assign.r), ());
        }
        let mut keys: Vec<_> = need.into_keys().collect();
        keys.sort_by_key(|&(k, r)| (k == VocabularyKind::Hkm, r));
        for (kind, r) in keys {
            self.hits(kind, r)?;
        }
        Ok(())
    }

    fn hits(&self, kind: VocabularyKind, r: usize) -> Result<Arc<CachedHits>> {
        let vocab = self.vocabs.get(kind, false);
        // exact flat search returns nested prefixes, so any larger r serves
        let prefix_ok = kind == VocabularyKind::Akm && vocab.ann_params().max_checks.is_none();
        {
            let cache = self.cache.lock().unwrap();
            if let Some(h) = cache.get(&(kind, r)) {
                return Ok(h.clone());
            }
            if prefix_ok {
                if let Some(h) = cache.iter().find(|((k, cr), _)| *k == kind && *cr >= r).map(|(_, h)| h) {
                    return Ok(h.clone());
                }
            }
        }
        let lookup = |imgs: &[ImageFeatures]| -> Result<Vec<Vec<Hits>>> {
            imgs.par_iter()
                .map(|f| f.keypoints.iter().map(|k| vocab.nearest(&k.descriptor, r)).collect())
                .collect()
        };
        let entry = Arc::new(CachedHits {
            r,
            database: lookup(&self.bench.database)?,
            queries: lookup(&self.bench.queries)?,
        });
        self.cache.lock().unwrap().insert((kind, r), entry.clone());
        Ok(entry)
    }

    pub fn vocabulary(&self, config: &SystemConfig) -> &Vocabulary {
        self.vocabs.get(config.vocab, config.size_binning)
    }

    pub fn run(&self, config: &SystemConfig) -> Result<SystemRun> {
        let vocab = self.vocabulary(config);
        let r = config.assign.r;
        let hits = self.hits(config.vocab, r)?;
        debug_assert!(hits.r >= r);
        let bows = |imgs: &[ImageFeatures], hits: &[Vec<Hits>]| -> Result<Vec<BowVector>> {
            imgs.par_iter()
                .zip(hits)
                .map(|(f, h)| {
                    let a: Vec<Assignment> = h
                        .iter()
                        .map(|h| Assignment::from_hits(&h[..r], config.assign.sigma))
                        .collect();
                    transform_assigned(vocab, f, &a)
                })
                .collect()
        };
        let database = bows(&self.bench.database, &hits.database)?;
        let queries = bows(&self.bench.queries, &hits.queries)?;
        let mut index = InverseIndex::new(vocab, config.index_params())?;
        for b in &database {
            index.insert(b)?;
        }
        Ok(SystemRun {
            config: *config,
            database,
            queries,
            index,
        })
    }
}

impl SystemRun {
    pub fn rankings(&self, top_n: usize) -> Result<Vec<Ranking>> {
        rank_all(&self.index, &self.queries, top_n)
    }

    pub fn localization_params(&self, base: &LocalizeParams) -> LocalizeParams {
        LocalizeParams {
            assign: self.config.assign,
            ransac: RansacParams {
                weighted: self.config.weighted_ransac,
                ..base.ransac
            },
            ..*base
        }
    }

    /// Localizes every query against the database and scores it with the
    /// default success test.
    pub fn localization(
        &self,
        bench: &Benchmark,
        store: &FeatureStore,
        base: &LocalizeParams,
    ) -> Result<LocalizationReport> {
        let params = self.localization_params(base);
        let outcomes: Vec<(u64, bool)> = bench
            .queries
            .par_iter()
            .zip(&self.queries)
            .map(|(q, bow)| {
                let loc = localize_bow(&self.index, bow, q, store, &params)?;
                let truth = q
                    .pose
                    .ok_or_else(|| Error::invalid("query without ground truth pose"))?;
                let ok = loc
                    .estimate
                    .is_some_and(|e| localization_success(&e.pose, &truth, DEFAULT_TRANS_TOL_MM, DEFAULT_ROT_TOL_DEG));
                Ok((q.image_id, ok))
            })
            .collect::<Result<_>>()?;
        let successes = outcomes.iter().filter(|o| o.1).count();
        Ok(LocalizationReport {
            success_rate: successes as f64 / outcomes.len().max(1) as f64,
            successes,
            total: outcomes.len(),
            outcomes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub success_rate: f64,
    pub successes: usize,
    pub total: usize,
    pub outcomes: Vec<(u64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub config: AblationConfig,
    pub map: f64,
    pub queries: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn map_of(&self, config: &AblationConfig) -> Option<f64> {
        self.rows.iter().find(|r| r.config == *config).map(|r| r.map)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,map,queries,excluded\n");
        for r in &self.rows {
            let _ = writeln!(s, "\"{}\",{:.6},{},{}", r.label, r.map, r.queries, r.excluded);
        }
        s
    }
}

/// mAP at `cutoff` for each configuration, in the given order.
pub fn run_ablation(exp: &Experiment, configs: &[AblationConfig], sigma: f64, cutoff: usize) -> Result<AblationTable> {
    let systems: Vec<SystemConfig> = configs.iter().map(|c| c.system(sigma)).collect();
    exp.prepare(&systems)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (c, s) in configs.iter().zip(&systems) {
        let run = exp.run(s)?;
        let rep: MapReport = map_from_rankings(&run.rankings(cutoff)?, &exp.bench.judgments, cutoff)?;
        log::info!("ablation {}: mAP {:.4}", c.label(), rep.map);
        rows.push(AblationRow {
            label: c.label(),
            config: *c,
            map: rep.map,
            queries: rep.per_query.len(),
            excluded: rep.excluded.len(),
        });
    }
    Ok(AblationTable { rows })
}

/// Recall@N and top-k threshold analysis for one run.
pub fn loop_closure_metrics(
    run: &SystemRun,
    bench: &Benchmark,
    n_values: &[usize],
    top_k: usize,
    target_fp_rejection: f64,
) -> Result<(RecallCurve, ThresholdReport)> {
    let top = n_values.iter().copied().max().unwrap_or(1).max(top_k);
    let rankings = run.rankings(top)?;
    let curve = recall_from_rankings(&rankings, &bench.judgments, n_values);
    let thr = threshold_from_scores(&score_lists(&rankings, &bench.judgments, top_k), target_fp_rejection)?;
    Ok((curve, thr))
}

pub fn recall_csv(curve: &RecallCurve) -> String {
    let mut s = String::from("n,recall\n");
    for (n, r) in &curve.points {
        let _ = writeln!(s, "{n},{r:.6}");
    }
    s
}

pub fn scores_csv(scores: &[super::metrics::ScoredResult]) -> String {
    let mut s = String::from("query_id,image_id,score,is_true_positive\n");
    for r in scores {
        let _ = writeln!(s, "{},{},{:.9},{}", r.query_id, r.image_id, r.score, r.is_true_positive);
    }
    s
}
