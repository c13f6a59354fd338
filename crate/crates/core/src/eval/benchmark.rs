//! The deterministic synthetic benchmark: a mapped world surveyed by a
//! lawnmower database, randomly posed queries with overlap ground truth, and
//! vocabularies trained on a separate world.

use serde::{Deserialize, Serialize};

use super::metrics::RelevanceJudgments;
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::geometry::Pose2D;
use crate::synth::{generate_queries, generate_survey, generate_world, FeatureWorld, ObservationParams};
use crate::vocab::{
    compute_idf, fit_size_bins, keypoint_sizes, train_akm, train_hkm, BinningMode, SizeBinning, Vocabulary,
    VocabularyKind,
};

/// Vocabulary training settings shared by every configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSpec {
    /// `V` for the flat vocabulary.
    pub words: usize,
    /// `k` and `L` for the tree vocabulary.
    pub hkm_branching: usize,
    pub hkm_depth: usize,
    pub akm_iters: usize,
    /// `S` when size binning is on.
    pub size_bins: usize,
    pub binning_mode: BinningMode,
    pub seed: u64,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            words: 4096,
            hkm_branching: 8,
            hkm_depth: 4,
            akm_iters: 10,
            size_bins: 8,
            binning_mode: BinningMode::DiscreteLevels,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub extent_mm: (f64, f64),
    pub density_per_m2: f64,
    pub size_levels: u8,
    pub survey_spacing_mm: f64,
    /// Keeps the first this many survey images.
    pub database_images: Option<usize>,
    pub queries: usize,
    /// Best overlap of each query with any database footprint.
    pub query_overlap: (f64, f64),
    pub relevance_threshold: f64,
    /// Noise model for database and query observations; the seed is derived
    /// per role.
    pub observation: ObservationParams,
    pub training_extent_mm: (f64, f64),
    pub training_spacing_mm: f64,
    pub vocab: VocabSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl BenchmarkSpec {
    /// 2 m x 2 m world, 2,000 database images, 400 queries.
    pub fn desk() -> Self {
        Self {
            seed: 2024,
            extent_mm: (2000.0, 2000.0),
            density_per_m2: 54_000.0,
            size_levels: 8,
            survey_spacing_mm: 2000.0 / 45.0,
            database_images: Some(2000),
            queries: 400,
            query_overlap: (0.25, 1.0),
            relevance_threshold: 0.25,
            observation: ObservationParams {
                bitflip_prob: 0.05,
                orientation_jitter_deg: 1.0,
                ..ObservationParams::default()
            },
            training_extent_mm: (800.0, 800.0),
            training_spacing_mm: 50.0,
            vocab: VocabSpec::default(),
        }
    }

    /// A seconds-scale variant for smoke tests.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            extent_mm: (400.0, 400.0),
            survey_spacing_mm: 40.0,
            database_images: None,
            queries: 30,
            training_extent_mm: (300.0, 300.0),
            training_spacing_mm: 50.0,
            vocab: VocabSpec {
                words: 256,
                hkm_branching: 4,
                hkm_depth: 4,
                akm_iters: 5,
                ..VocabSpec::default()
            },
            ..Self::desk()
        }
    }

    pub fn noise_free(mut self) -> Self {
        self.observation.bitflip_prob = 0.0;
        self.observation.orientation_jitter_deg = 0.0;
        self
    }

    pub fn database_params(&self) -> ObservationParams {
        ObservationParams {
            seed: self.seed.wrapping_add(10),
            ..self.observation
        }
    }

    pub fn query_params(&self) -> ObservationParams {
        ObservationParams {
            seed: self.seed.wrapping_add(11),
            ..self.observation
        }
    }
}

/// Query ids start here so they never collide with database ids.
pub const QUERY_ID_BASE: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub world: FeatureWorld,
    pub training: Vec<ImageFeatures>,
    pub database: Vec<ImageFeatures>,
    pub queries: Vec<ImageFeatures>,
    pub judgments: RelevanceJudgments,
}

impl Benchmark {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        let world = generate_world(spec.seed, spec.extent_mm, spec.density_per_m2, spec.size_levels)?;
        let train_world = generate_world(
            spec.seed.wrapping_add(1),
            spec.training_extent_mm,
            spec.density_per_m2,
            spec.size_levels,
        )?;
        let training = generate_survey(&train_world, spec.training_spacing_mm, &spec.database_params())?;
        let mut database = generate_survey(&world, spec.survey_spacing_mm, &spec.database_params())?;
        if let Some(n) = spec.database_images {
            if n > database.len() {
                return Err(Error::invalid(format!(
                    "{n} database images requested but the survey yields {}",
                    database.len()
                )));
            }
            database.truncate(n);
        }
        let db_poses: Vec<Pose2D> = database
            .iter()
            .map(|f| f.pose.expect("survey images are posed"))
            .collect();
        let queries = generate_queries(
            &world,
            &db_poses,
            spec.queries,
            spec.query_overlap,
            &spec.query_params(),
            spec.seed.wrapping_add(12),
            QUERY_ID_BASE,
        )?;
        let judgments = judge(
            &queries,
            &database,
            spec.observation.camera.fov_mm,
            spec.relevance_threshold,
        )?;
        Ok(Self {
            spec: *spec,
            world,
            training,
            database,
            queries,
            judgments,
        })
    }

    pub fn database_poses(&self) -> Vec<Pose2D> {
        self.database.iter().map(|f| f.pose.expect("posed")).collect()
    }
}

/// Overlap ground truth between posed queries and posed database images.
pub fn judge(
    queries: &[ImageFeatures],
    database: &[ImageFeatures],
    fov_mm: (f64, f64),
    threshold: f64,
) -> Result<RelevanceJudgments> {
    let posed = |imgs: &[ImageFeatures]| -> Result<Vec<(u64, Pose2D)>> {
        imgs.iter()
            .map(|f| {
                f.pose
                    .map(|p| (f.image_id, p))
                    .ok_or_else(|| Error::invalid(format!("image {} has no pose", f.image_id)))
            })
            .collect()
    };
    RelevanceJudgments::from_poses(&posed(queries)?, &posed(database)?, fov_mm, threshold)
}

/// The flat and tree vocabularies, each with and without size binning, idf
/// computed over the training corpus.
#[derive(Debug, Clone)]
pub struct TrainedVocabularies {
    pub akm: Vocabulary,
    pub akm_binned: Vocabulary,
    pub hkm: Vocabulary,
    pub hkm_binned: Vocabulary,
}

impl TrainedVocabularies {
    pub fn train(spec: &VocabSpec, training: &[ImageFeatures]) -> Result<Self> {
        let descriptors: Vec<_> = training
            .iter()
            .flat_map(|f| f.keypoints.iter().map(|k| k.descriptor.clone()))
            .collect();
        let binning = fit_size_bins(&keypoint_sizes(training), spec.size_bins, spec.binning_mode)?;
        let akm = train_akm(&descriptors, spec.words, spec.akm_iters, spec.seed)?;
        let hkm = train_hkm(&descriptors, spec.hkm_branching, spec.hkm_depth, spec.seed)?;
        let finish = |v: &Vocabulary, b: SizeBinning| -> Result<Vocabulary> {
            let mut v = v.clone().with_binning(b);
            let idf = compute_idf(&v, training)?;
            v.set_idf(idf)?;
            Ok(v)
        };
        Ok(Self {
            akm_binned: finish(&akm, binning.clone())?,
            akm: finish(&akm, SizeBinning::single())?,
            hkm_binned: finish(&hkm, binning)?,
            hkm: finish(&hkm, SizeBinning::single())?,
        })
    }

    pub fn get(&self, kind: VocabularyKind, size_binning: bool) -> &Vocabulary {
        match (kind, size_binning) {
            (VocabularyKind::Akm, false) => &self.akm,
            (VocabularyKind::Akm, true) => &self.akm_binned,
            (VocabularyKind::Hkm, false) => &self.hkm,
            (VocabularyKind::Hkm, true) => &self.hkm_binned,
        }
    }
}
