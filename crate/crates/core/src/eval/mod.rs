//! Metrics and experiment drivers: mAP, Recall@N, score-threshold analysis,
//! localization success, the ablation grid and the scaling harness.

pub mod ablation;
pub mod benchmark;
pub mod metrics;
pub mod timing;

pub use ablation::{
    loop_closure_metrics, recall_csv, run_ablation, scores_csv, AblationConfig, AblationRow, AblationTable, Experiment,
    LocalizationReport, SystemConfig, SystemRun,
};
pub use benchmark::{judge, Benchmark, BenchmarkSpec, TrainedVocabularies, VocabSpec, QUERY_ID_BASE};
pub use metrics::{
    average_precision, localization_success, map_from_rankings, mean_average_precision, quantile, rank_all,
    recall_at_n, recall_from_rankings, score_lists, threshold_analysis, threshold_from_scores, MapReport, Ranking,
    RecallCurve, RelevanceJudgments, ScoredResult, ThresholdReport, DEFAULT_ROT_TOL_DEG, DEFAULT_TRANS_TOL_MM,
};
pub use timing::{bench_scaling, ScalingReport, ScalingRow, Stat};
