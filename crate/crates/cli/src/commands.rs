//! Subcommand implementations.

use std::path::Path;

use gtbow::bow::{transform_with, AssignParams, BowVector};
use gtbow::eval::{
    bench_scaling, judge, map_from_rankings, rank_all, recall_csv, recall_from_rankings, run_ablation, score_lists,
    scores_csv, threshold_from_scores, AblationConfig, Benchmark, Experiment, Ranking, RelevanceJudgments,
    SystemConfig, TrainedVocabularies,
};
use gtbow::features::{read_feature_file, write_feature_file, write_feature_file_json, ImageFeatures};
use gtbow::index::{load_index, save_index, InverseIndex};
use gtbow::localize::{localize_bow, FeatureStore};
use gtbow::vocab::{
    compute_idf, fit_size_bins, keypoint_sizes, load_vocab, save_vocab, train_akm, train_hkm, BinningMode, SizeBinning,
    Vocabulary, VocabularyKind,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{emit, json_lines, Manifest};
use crate::{AssignArgs, Command, EvalInputs};

pub fn run(command: Command, mut cfg: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Synth {
            out_dir,
            noise_free,
            json,
        } => synth(&cfg, &out_dir, noise_free, json),
        Command::TrainVocab {
            training,
            out,
            kind,
            words,
            branching,
            depth,
            iters,
            size_bins,
            no_size_binning,
            percentile_binning,
            discrete_levels,
        } => {
            let v = &mut cfg.vocab;
            set(&mut v.kind, kind.map(VocabularyKind::from));
            set(&mut v.words, words);
            set(&mut v.branching, branching);
            set(&mut v.depth, depth);
            set(&mut v.iters, iters);
            set(&mut v.size_bins, size_bins);
            if no_size_binning {
                v.size_binning = false;
            }
            if percentile_binning {
                v.binning = BinningMode::Percentile;
            }
            if discrete_levels {
                v.binning = BinningMode::DiscreteLevels;
            }
            cfg.benchmark.vocab = cfg.vocab.spec();
            cfg.validate()?;
            train_vocab(&cfg, &training, &out)
        }
        Command::BuildDb {
            vocab,
            features,
            out,
            orientation_bins,
            smear,
            assign,
            idf_from_db,
            vocab_out,
            dump_bow,
        } => {
            set(&mut cfg.index.orientation_bins, orientation_bins);
            cfg.index.smear |= smear;
            apply_assign(&mut cfg, &assign)?;
            build_db(
                &cfg,
                &vocab,
                &features,
                &out,
                idf_from_db.then_some(vocab_out).flatten().as_deref(),
                dump_bow.as_deref(),
            )
        }
        Command::Query {
            vocab,
            index,
            queries,
            top,
            assign,
            out,
            dump_bow,
        } => {
            apply_assign(&mut cfg, &assign)?;
            query(&cfg, &vocab, &index, &queries, top, out.as_deref(), dump_bow.as_deref())
        }
        Command::Localize {
            vocab,
            index,
            db_features,
            queries,
            assign,
            top_candidates,
            min_inliers,
            ransac_iterations,
            inlier_tol_px,
            unweighted,
            strict,
            out,
        } => {
            apply_assign(&mut cfg, &assign)?;
            set(&mut cfg.localize.top_candidates, top_candidates);
            set(&mut cfg.localize.min_inliers, min_inliers);
            set(&mut cfg.ransac.iterations, ransac_iterations);
            set(&mut cfg.ransac.inlier_tol_px, inlier_tol_px);
            if unweighted {
                cfg.ransac.weighted = false;
            }
            cfg.validate()?;
            localize(&cfg, &vocab, &index, &db_features, &queries, strict, out.as_deref())
        }
        Command::EvalMap {
            inputs,
            cutoff,
            per_query,
            out,
        } => {
            let ev = Evaluation::load(&mut cfg, &inputs, cutoff)?;
            let report = map_from_rankings(&ev.rankings, &ev.judgments, cutoff)?;
            if let Some(p) = &per_query {
                let mut csv = String::from("query_id,ap\n");
                for (q, ap) in &report.per_query {
                    csv.push_str(&format!("{q},{ap:.6}\n"));
                }
                emit(&csv, Some(p), &ev.manifest("eval-map", &cfg, &inputs))?;
            }
            let summary = serde_json::json!({
                "map": report.map,
                "cutoff": cutoff,
                "queries": report.per_query.len(),
                "excluded": report.excluded.len(),
            });
            emit(
                &format!("{summary}\n"),
                out.as_deref(),
                &ev.manifest("eval-map", &cfg, &inputs),
            )
        }
        Command::EvalRecall { inputs, n, out } => {
            if n.is_empty() || n.contains(&0) {
                return Err(CliError::Config("--n needs positive values".into()));
            }
            let top = n.iter().copied().max().unwrap_or(1);
            let ev = Evaluation::load(&mut cfg, &inputs, top)?;
            let curve = recall_from_rankings(&ev.rankings, &ev.judgments, &n);
            log::info!(
                "recall over {} queries ({} excluded)",
                curve.queries,
                curve.excluded.len()
            );
            emit(
                &recall_csv(&curve),
                out.as_deref(),
                &ev.manifest("eval-recall", &cfg, &inputs),
            )
        }
        Command::EvalThreshold {
            inputs,
            top_k,
            rejection,
            scores_out,
            out,
        } => {
            if !(0.0..=1.0).contains(&rejection) || top_k == 0 {
                return Err(CliError::Config(
                    "--rejection must lie in [0, 1] and --top-k be positive".into(),
                ));
            }
            let ev = Evaluation::load(&mut cfg, &inputs, top_k)?;
            let scores = score_lists(&ev.rankings, &ev.judgments, top_k);
            let manifest = ev.manifest("eval-threshold", &cfg, &inputs);
            if let Some(p) = &scores_out {
                emit(&scores_csv(&scores), Some(p), &manifest)?;
            }
            let report = threshold_from_scores(&scores, rejection)?;
            let summary = serde_json::json!({
                "target_fp_rejection": rejection,
                "top_k": top_k,
                "threshold": report.threshold,
                "retained_tp_fraction": report.retained,
                "true_positives": report.true_positives,
                "false_positives": report.false_positives,
            });
            emit(&format!("{summary}\n"), out.as_deref(), &manifest)
        }
        Command::Ablate { cutoff, out } => ablate(&cfg, cutoff, out.as_deref()),
        Command::Bench {
            sizes,
            probes,
            top,
            out,
        } => bench(&cfg, sizes, probes, top, out.as_deref()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_assign(cfg: &mut RunConfig, a: &AssignArgs) -> Result<(), CliError> {
    set(&mut cfg.assign.r, a.r);
    set(&mut cfg.assign.sigma, a.sigma);
    cfg.validate()
}

fn read_features(path: &Path) -> Result<Vec<ImageFeatures>, CliError> {
    let f = read_feature_file(path)?;
    log::info!("{}: {} images", path.display(), f.len());
    Ok(f)
}

fn transform_all(
    vocab: &Vocabulary,
    images: &[ImageFeatures],
    assign: AssignParams,
) -> Result<Vec<BowVector>, CliError> {
    Ok(images
        .par_iter()
        .map(|f| transform_with(vocab, f, assign))
        .collect::<gtbow::Result<_>>()?)
}

fn dump_bows(path: &Path, bows: &[BowVector], manifest: &Manifest) -> Result<(), CliError> {
    emit(&json_lines(bows), Some(path), manifest)
}

fn synth(cfg: &RunConfig, out_dir: &Path, noise_free: bool, json: bool) -> Result<(), CliError> {
    let spec = if noise_free {
        cfg.benchmark.noise_free()
    } else {
        cfg.benchmark
    };
    let bench = Benchmark::generate(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let sets = [
        ("training", &bench.training),
        ("database", &bench.database),
        ("queries", &bench.queries),
    ];
    for (name, images) in sets {
        let path = out_dir.join(format!("{name}.gtbf"));
        write_feature_file(&path, images)?;
        if json {
            write_feature_file_json(out_dir.join(format!("{name}.json")), images)?;
        }
        log::info!("wrote {} ({} images)", path.display(), images.len());
    }
    let mut effective = cfg.clone();
    effective.benchmark = spec;
    Manifest::new("synth", &effective)
        .details(serde_json::json!({
            "world_features": bench.world.features.len(),
            "training_images": bench.training.len(),
            "database_images": bench.database.len(),
            "queries": bench.queries.len(),
            "noise_free": noise_free,
        }))
        .write_to(&out_dir.join("manifest.json"))
}

fn train_vocab(cfg: &RunConfig, training: &Path, out: &Path) -> Result<(), CliError> {
    let images = read_features(training)?;
    let descriptors: Vec<_> = images
        .iter()
        .flat_map(|f| f.keypoints.iter().map(|k| k.descriptor.clone()))
        .collect();
    let v = &cfg.vocab;
    let vocab = match v.kind {
        VocabularyKind::Akm => train_akm(&descriptors, v.words, v.iters, v.seed)?,
        VocabularyKind::Hkm => train_hkm(&descriptors, v.branching, v.depth, v.seed)?,
    };
    let binning = if v.size_binning {
        fit_size_bins(&keypoint_sizes(&images), v.size_bins, v.binning)?
    } else {
        SizeBinning::single()
    };
    let mut vocab = vocab.with_binning(binning);
    let idf = compute_idf(&vocab, &images)?;
    vocab.set_idf(idf)?;
    save_vocab(out, &vocab)?;
    log::info!(
        "wrote {} ({} words, {} size bins)",
        out.display(),
        vocab.len(),
        vocab.size_bins()
    );
    Manifest::new("train-vocab", cfg)
        .input("training", training)
        .details(serde_json::json!({
            "words": vocab.len(),
            "size_bins": vocab.size_bins(),
            "descriptors": descriptors.len(),
        }))
        .write_beside(out)
}

fn build_db(
    cfg: &RunConfig,
    vocab_path: &Path,
    features: &Path,
    out: &Path,
    vocab_out: Option<&Path>,
    dump_bow: Option<&Path>,
) -> Result<(), CliError> {
    let mut vocab = load_vocab(vocab_path)?;
    let images = read_features(features)?;
    let manifest = || {
        Manifest::new("build-db", cfg)
            .input("vocab", vocab_path)
            .input("features", features)
    };
    if let Some(p) = vocab_out {
        let idf = compute_idf(&vocab, &images)?;
        vocab.set_idf(idf)?;
        save_vocab(p, &vocab)?;
        manifest().details("idf recomputed over the database").write_beside(p)?;
    }
    let bows = transform_all(&vocab, &images, cfg.assign)?;
    let mut index = InverseIndex::new(&vocab, cfg.index)?;
    for b in &bows {
        index.insert(b)?;
    }
    save_index(out, &index)?;
    log::info!("wrote {} ({} images)", out.display(), index.len());
    if let Some(p) = dump_bow {
        dump_bows(p, &bows, &manifest())?;
    }
    manifest().write_beside(out)
}

#[derive(Serialize)]
struct QueryHit {
    image_id: u64,
    score: f64,
    best_bin: u32,
}

#[derive(Serialize)]
struct QueryLine {
    query_id: u64,
    results: Vec<QueryHit>,
}

fn query(
    cfg: &RunConfig,
    vocab_path: &Path,
    index_path: &Path,
    queries: &Path,
    top: usize,
    out: Option<&Path>,
    dump_bow: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let index = load_index(index_path, &vocab)?;
    let images = read_features(queries)?;
    let bows = transform_all(&vocab, &images, cfg.assign)?;
    let lines: Vec<QueryLine> = bows
        .par_iter()
        .map(|b| {
            let res = index.query_scores(b, top)?;
            Ok(QueryLine {
                query_id: b.image_id,
                results: res
                    .candidates
                    .iter()
                    .map(|c| QueryHit {
                        image_id: c.image_id,
                        score: c.score,
                        best_bin: c.best_bin,
                    })
                    .collect(),
            })
        })
        .collect::<gtbow::Result<_>>()?;
    let manifest = Manifest::new("query", cfg)
        .input("vocab", vocab_path)
        .input("index", index_path)
        .input("queries", queries);
    if let Some(p) = dump_bow {
        dump_bows(p, &bows, &manifest)?;
    }
    emit(&json_lines(&lines), out, &manifest)
}

#[derive(Serialize)]
struct LocalizeLine {
    query_id: u64,
    status: &'static str,
    image_id: Option<u64>,
    x_mm: Option<f64>,
    y_mm: Option<f64>,
    theta_deg: Option<f64>,
    inliers: usize,
    score: Option<f64>,
}

fn localize(
    cfg: &RunConfig,
    vocab_path: &Path,
    index_path: &Path,
    db_features: &Path,
    queries: &Path,
    strict: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let index = load_index(index_path, &vocab)?;
    let store = FeatureStore::new(read_features(db_features)?);
    let images = read_features(queries)?;
    let params = cfg.localize_params();
    let bows = transform_all(&vocab, &images, params.assign)?;
    let lines: Vec<LocalizeLine> = images
        .par_iter()
        .zip(&bows)
        .map(|(q, b)| {
            let loc = localize_bow(&index, b, q, &store, &params)?;
            Ok(match loc.estimate {
                Some(e) => LocalizeLine {
                    query_id: q.image_id,
                    status: "localized",
                    image_id: Some(e.image_id),
                    x_mm: Some(e.pose.x_mm),
                    y_mm: Some(e.pose.y_mm),
                    theta_deg: Some(e.pose.theta_deg),
                    inliers: e.inliers,
                    score: Some(e.score),
                },
                None => LocalizeLine {
                    query_id: q.image_id,
                    status: "failed",
                    image_id: None,
                    x_mm: None,
                    y_mm: None,
                    theta_deg: None,
                    inliers: loc.attempts.iter().map(|a| a.inliers).max().unwrap_or(0),
                    score: None,
                },
            })
        })
        .collect::<gtbow::Result<_>>()?;
    let failed = lines.iter().filter(|l| l.status == "failed").count();
    log::info!("localized {} of {} queries", lines.len() - failed, lines.len());
    let manifest = Manifest::new("localize", cfg)
        .input("vocab", vocab_path)
        .input("index", index_path)
        .input("db_features", db_features)
        .input("queries", queries);
    emit(&json_lines(&lines), out, &manifest)?;
    if strict && failed > 0 {
        return Err(CliError::Domain(format!(
            "{failed} of {} queries were not localized",
            lines.len()
        )));
    }
    Ok(())
}

/// Shared inputs of the evaluation subcommands: rankings of every query and
/// overlap ground truth from the feature poses.
struct Evaluation {
    rankings: Vec<Ranking>,
    judgments: RelevanceJudgments,
}

impl Evaluation {
    fn load(cfg: &mut RunConfig, inputs: &EvalInputs, top: usize) -> Result<Self, CliError> {
        apply_assign(cfg, &inputs.assign)?;
        set(&mut cfg.benchmark.relevance_threshold, inputs.relevance_threshold);
        let vocab = load_vocab(&inputs.vocab)?;
        let index = load_index(&inputs.index, &vocab)?;
        let database = read_features(&inputs.db_features)?;
        let queries = read_features(&inputs.queries)?;
        let judgments = judge(
            &queries,
            &database,
            cfg.benchmark.observation.camera.fov_mm,
            cfg.benchmark.relevance_threshold,
        )?;
        let bows = transform_all(&vocab, &queries, cfg.assign)?;
        let rankings = rank_all(&index, &bows, top)?;
        Ok(Self { rankings, judgments })
    }

    fn manifest<'a>(&self, command: &'a str, cfg: &'a RunConfig, inputs: &'a EvalInputs) -> Manifest<'a> {
        Manifest::new(command, cfg)
            .input("vocab", &inputs.vocab)
            .input("index", &inputs.index)
            .input("db_features", &inputs.db_features)
            .input("queries", &inputs.queries)
    }
}

fn prepare_benchmark(cfg: &RunConfig) -> Result<(Benchmark, TrainedVocabularies), CliError> {
    let bench = Benchmark::generate(&cfg.benchmark)?;
    log::info!(
        "benchmark: {} training, {} database, {} query images",
        bench.training.len(),
        bench.database.len(),
        bench.queries.len()
    );
    let vocabs = TrainedVocabularies::train(&cfg.vocab.spec(), &bench.training)?;
    Ok((bench, vocabs))
}

fn ablate(cfg: &RunConfig, cutoff: usize, out: Option<&Path>) -> Result<(), CliError> {
    let (bench, vocabs) = prepare_benchmark(cfg)?;
    let exp = Experiment::new(&bench, &vocabs);
    let table = run_ablation(&exp, &AblationConfig::table_rows(), cfg.assign.sigma, cutoff)?;
    emit(
        &table.to_csv(),
        out,
        &Manifest::new("ablate", cfg).details(serde_json::json!({ "cutoff": cutoff })),
    )
}

fn bench(cfg: &RunConfig, sizes: Vec<usize>, probes: usize, top: usize, out: Option<&Path>) -> Result<(), CliError> {
    let (bench, vocabs) = prepare_benchmark(cfg)?;
    let n = bench.database.len();
    let sizes = if sizes.is_empty() {
        let mut s: Vec<usize> = [n / 20, n / 4, n / 2, n].into_iter().filter(|&x| x > 0).collect();
        s.dedup();
        s
    } else {
        sizes
    };
    if probes == 0 || probes > bench.queries.len() {
        return Err(CliError::Config(format!(
            "--probes must be between 1 and {} for this benchmark",
            bench.queries.len()
        )));
    }
    let probes = &bench.queries[..probes];
    let mut csv = String::new();
    let systems = [
        ("fast", SystemConfig::fast()),
        ("high-accuracy", SystemConfig::high_accuracy()),
    ];
    for (i, (label, system)) in systems.iter().enumerate() {
        let system = SystemConfig {
            assign: AssignParams {
                sigma: cfg.assign.sigma,
                ..system.assign
            },
            ..*system
        };
        let vocab = vocabs.get(system.vocab, system.size_binning);
        let report = bench_scaling(label, vocab, &system, &bench.database, &sizes, probes, top)?;
        log::info!("{label}: insert decile ratio {:.2}", report.insert_decile_ratio());
        let text = report.to_csv();
        csv.push_str(if i == 0 {
            &text
        } else {
            text.split_once('\n').map_or("", |x| x.1)
        });
    }
    emit(
        &csv,
        out,
        &Manifest::new("bench", cfg).details(serde_json::json!({ "sizes": sizes, "probes": probes.len(), "top": top })),
    )
}
