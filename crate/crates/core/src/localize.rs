//! Pose recovery from retrieval output: the matched keypoint pairs of a
//! candidate become correspondences, and (weighted) RANSAC fits a rigid 2D
//! transform at unit scale from query pixels to database pixels.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bow::{transform_with, AssignParams, BowVector};
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::geometry::{angle_diff, normalize_deg, rotate, CameraModel, Pose2D};
use crate::index::{Candidate, InverseIndex};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correspondence {
    pub query: (f64, f64),
    pub db: (f64, f64),
    pub query_orientation_deg: f64,
    pub db_orientation_deg: f64,
    pub weight: f64,
}

/// `p_db = R(rotation) p_query + t`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RigidTransform2D {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform2D {
    pub fn new(rotation_deg: f64, tx: f64, ty: f64) -> Self {
        Self {
            rotation_deg: normalize_deg(rotation_deg),
            tx,
            ty,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (x, y) = rotate(self.rotation_deg, p);
        (x + self.tx, y + self.ty)
    }

    pub fn residual(&self, c: &Correspondence) -> f64 {
        let (x, y) = self.apply(c.query);
        (x - c.db.0).hypot(y - c.db.1)
    }

    /// Closed-form weighted least squares over rotation and translation.
    pub fn fit(corrs: &[Correspondence], weights: &[f64]) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if corrs.is_empty() || !(total > 0.0) {
            return None;
        }
        let mut q = (0.0, 0.0);
        let mut d = (0.0, 0.0);
        for (c, &w) in corrs.iter().zip(weights) {
            q.0 += w * c.query.0;
            q.1 += w * c.query.1;
            d.0 += w * c.db.0;
            d.1 += w * c.db.1;
        }
        q = (q.0 / total, q.1 / total);
        d = (d.0 / total, d.1 / total);
        let (mut sin, mut cos) = (0.0, 0.0);
        for (c, &w) in corrs.iter().zip(weights) {
            let (qx, qy) = (c.query.0 - q.0, c.query.1 - q.1);
            let (dx, dy) = (c.db.0 - d.0, c.db.1 - d.1);
            sin += w * (qx * dy - qy * dx);
            cos += w * (qx * dx + qy * dy);
        }
        let rot = if sin == 0.0 && cos == 0.0 {
            // a single point: keep the orientation difference
            angle_diff(corrs[0].db_orientation_deg, corrs[0].query_orientation_deg)
        } else {
            sin.atan2(cos).to_degrees()
        };
        let (rx, ry) = rotate(rot, q);
        Some(Self::new(rot, d.0 - rx, d.1 - ry))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub iterations: u32,
    pub inlier_tol_px: f64,
    pub min_inlier_fraction: f64,
    /// Early exit once this probability of having drawn an all-inlier
    /// sample is reached.
    pub confidence: f64,
    pub weighted: bool,
    /// Hypothesize from one correspondence plus its orientation difference.
    pub one_point: bool,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_tol_px: 3.0,
            min_inlier_fraction: 0.2,
            confidence: 0.99,
            weighted: false,
            one_point: false,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || !(self.inlier_tol_px > 0.0)
            || !(0.0..=1.0).contains(&self.min_inlier_fraction)
            || !(self.confidence > 0.0 && self.confidence < 1.0)
        {
            return Err(Error::invalid(format!("invalid ransac parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RansacFit {
    pub transform: RigidTransform2D,
    /// Indices into the caller's correspondence list, ascending.
    pub inliers: Vec<usize>,
    pub inlier_weight: f64,
    pub iterations: u32,
}

fn canonical_order(corrs: &[Correspondence]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&corrs[a], &corrs[b]);
        x.query
            .0
            .total_cmp(&y.query.0)
            .then(x.query.1.total_cmp(&y.query.1))
            .then(x.db.0.total_cmp(&y.db.0))
            .then(x.db.1.total_cmp(&y.db.1))
            .then(x.query_orientation_deg.total_cmp(&y.query_orientation_deg))
            .then(x.db_orientation_deg.total_cmp(&y.db_orientation_deg))
            .then(x.weight.total_cmp(&y.weight))
            .then(a.cmp(&b))
    });
    order
}

/// Returns `None` when no hypothesis reaches the minimum inlier fraction.
///
/// The correspondences are put in a canonical order first, so the result
/// does not depend on input order. Both modes draw the same random stream:
/// weighted sampling inverts the cumulative weight, unweighted sampling the
/// cumulative count, so equal weights give identical runs.
pub fn ransac_rigid(corrs: &[Correspondence], params: &RansacParams) -> Result<Option<RansacFit>> {
    params.validate()?;
    let sample_size = if params.one_point { 1 } else { 2 };
    if corrs.len() < 2 {
        return Ok(None);
    }
    let order = canonical_order(corrs);
    let sorted: Vec<Correspondence> = order.iter().map(|&i| corrs[i]).collect();
    let n = sorted.len();
    let max_w = sorted.iter().map(|c| c.weight).fold(0.0, f64::max);
    let weights: Vec<f64> = if params.weighted && max_w > 0.0 {
        sorted.iter().map(|c| c.weight / max_w).collect()
    } else {
        vec![1.0; n]
    };
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in &weights {
        acc += w;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * acc;
        cdf.partition_point(|&c| c <= u).min(n - 1)
    };

    let tol = params.inlier_tol_px;
    let mut best: Option<(f64, usize, RigidTransform2D)> = None;
    let mut needed = params.iterations as f64;
    let mut iterations = 0;
    while (iterations as f64) < needed.min(params.iterations as f64) {
        iterations += 1;
        let hypothesis = if params.one_point {
            let c = sorted[draw(&mut rng)];
            let rot = angle_diff(c.db_orientation_deg, c.query_orientation_deg);
            let (x, y) = rotate(rot, c.query);
            Some(RigidTransform2D::new(rot, c.db.0 - x, c.db.1 - y))
        } else {
            let mut pick = None;
            for _ in 0..32 {
                let (i, j) = (draw(&mut rng), draw(&mut rng));
                let (a, b) = (&sorted[i], &sorted[j]);
                let spread = (a.query.0 - b.query.0).hypot(a.query.1 - b.query.1);
                if i != j && spread > 1e-6 {
                    pick = Some([*a, *b]);
                    break;
                }
            }
            pick.and_then(|p| RigidTransform2D::fit(&p, &[1.0, 1.0]))
        };
        let Some(t) = hypothesis else { continue };
        let (mut score, mut count) = (0.0, 0);
        for (c, &w) in sorted.iter().zip(&weights) {
            if t.residual(c) <= tol {
                score += w;
                count += 1;
            }
        }
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, count, t));
            let eps = count as f64 / n as f64;
            let miss = 1.0 - eps.powi(sample_size);
            needed = if miss <= 0.0 {
                0.0
            } else if miss >= 1.0 {
                f64::INFINITY
            } else {
                ((1.0 - params.confidence).ln() / miss.ln()).ceil()
            };
        }
    }
    let Some((_, count, mut t)) = best else { return Ok(None) };
    let min_count = ((params.min_inlier_fraction * n as f64).ceil() as usize).max(sample_size as usize);
    if count < min_count {
        return Ok(None);
    }
    let inliers_of =
        |t: &RigidTransform2D| -> Vec<usize> { (0..n).filter(|&i| t.residual(&sorted[i]) <= tol).collect() };
    let mut inliers = inliers_of(&t);
    let in_c: Vec<Correspondence> = inliers.iter().map(|&i| sorted[i]).collect();
    let in_w: Vec<f64> = inliers.iter().map(|&i| weights[i]).collect();
    if let Some(refit) = RigidTransform2D::fit(&in_c, &in_w) {
        let refit_inliers = inliers_of(&refit);
        if refit_inliers.len() >= inliers.len() {
            t = refit;
            inliers = refit_inliers;
        }
    }
    let inlier_weight = inliers.iter().map(|&i| sorted[i].weight).sum();
    let mut original: Vec<usize> = inliers.iter().map(|&i| order[i]).collect();
    original.sort_unstable();
    Ok(Some(RansacFit {
        transform: t,
        inliers: original,
        inlier_weight,
        iterations,
    }))
}

/// One correspondence per match of `candidate`, resolved against the two
/// images' keypoints.
pub fn collect_correspondences(
    candidate: &Candidate,
    query: &ImageFeatures,
    db: &ImageFeatures,
) -> Result<Vec<Correspondence>> {
    let qk: HashMap<u32, _> = query.keypoints.iter().map(|k| (k.id, k)).collect();
    let dk: HashMap<u32, _> = db.keypoints.iter().map(|k| (k.id, k)).collect();
    candidate
        .matches
        .iter()
        .map(|m| {
            let q = qk.get(&m.query_keypoint).ok_or(Error::DanglingKeypoint {
                image: query.image_id,
                keypoint: m.query_keypoint,
            })?;
            let d = dk.get(&m.db_keypoint).ok_or(Error::DanglingKeypoint {
                image: db.image_id,
                keypoint: m.db_keypoint,
            })?;
            Ok(Correspondence {
                query: (q.x as f64, q.y as f64),
                db: (d.x as f64, d.y as f64),
                query_orientation_deg: q.orientation_deg as f64,
                db_orientation_deg: d.orientation_deg as f64,
                weight: m.weight,
            })
        })
        .collect()
}

/// World pose of the query camera given the database camera pose and the
/// query-to-database pixel transform.
pub fn compose_pose(camera: &CameraModel, db_pose: &Pose2D, t: &RigidTransform2D) -> Pose2D {
    let c = camera.center_px();
    let (rx, ry) = t.apply(c);
    let offset = ((rx - c.0) / camera.px_per_mm, (ry - c.1) / camera.px_per_mm);
    let (dx, dy) = rotate(db_pose.theta_deg, offset);
    Pose2D::new(db_pose.x_mm + dx, db_pose.y_mm + dy, db_pose.theta_deg + t.rotation_deg)
}

/// Database images by id, each with its ground-truth pose.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    images: HashMap<u64, ImageFeatures>,
}

impl FeatureStore {
    pub fn new(images: impl IntoIterator<Item = ImageFeatures>) -> Self {
        Self {
            images: images.into_iter().map(|f| (f.image_id, f)).collect(),
        }
    }

    pub fn get(&self, image_id: u64) -> Option<&ImageFeatures> {
        self.images.get(&image_id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeParams {
    pub top_candidates: usize,
    pub min_inliers: usize,
    pub ransac: RansacParams,
    pub assign: AssignParams,
    pub camera: CameraModel,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            top_candidates: 5,
            min_inliers: 8,
            ransac: RansacParams::default(),
            assign: AssignParams::default(),
            camera: CameraModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttemptOutcome {
    Accepted,
    TooFewCorrespondences,
    NoConsensus,
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateAttempt {
    pub image_id: u64,
    pub score: f64,
    pub correspondences: usize,
    pub inliers: usize,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseEstimate {
    pub image_id: u64,
    pub pose: Pose2D,
    pub transform: RigidTransform2D,
    pub inliers: usize,
    pub inlier_weight: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localization {
    pub estimate: Option<PoseEstimate>,
    pub attempts: Vec<CandidateAttempt>,
}

/// Retrieves the query, then verifies the top candidates in rank order and
/// accepts the first consensus with at least `min_inliers` inliers.
pub fn localize(
    index: &InverseIndex,
    vocab: &Vocabulary,
    query: &ImageFeatures,
    db: &FeatureStore,
    params: &LocalizeParams,
) -> Result<Localization> {
    let bow = transform_with(vocab, query, params.assign)?;
    localize_bow(index, &bow, query, db, params)
}

/// As [`localize`] with the query vector already computed.
pub fn localize_bow(
    index: &InverseIndex,
    bow: &BowVector,
    query: &ImageFeatures,
    db: &FeatureStore,
    params: &LocalizeParams,
) -> Result<Localization> {
    let result = index.query(bow, params.top_candidates)?;
    let mut attempts = Vec::new();
    for c in &result.candidates {
        let db_img = db.get(c.image_id).ok_or(Error::UnknownImage(c.image_id))?;
        let db_pose = db_img
            .pose
            .ok_or_else(|| Error::invalid(format!("database image {} has no pose", c.image_id)))?;
        let corrs = collect_correspondences(c, query, db_img)?;
        let mut attempt = CandidateAttempt {
            image_id: c.image_id,
            score: c.score,
            correspondences: corrs.len(),
            inliers: 0,
            outcome: AttemptOutcome::TooFewCorrespondences,
        };
        if corrs.len() < params.min_inliers.max(2) {
            attempts.push(attempt);
            continue;
        }
        let Some(fit) = ransac_rigid(&corrs, &params.ransac)? else {
            attempt.outcome = AttemptOutcome::NoConsensus;
            attempts.push(attempt);
            continue;
        };
        attempt.inliers = fit.inliers.len();
        if fit.inliers.len() < params.min_inliers {
            attempt.outcome = AttemptOutcome::TooFewInliers;
            attempts.push(attempt);
            continue;
        }
        attempt.outcome = AttemptOutcome::Accepted;
        attempts.push(attempt);
        return Ok(Localization {
            estimate: Some(PoseEstimate {
                image_id: c.image_id,
                pose: compose_pose(&params.camera, &db_pose, &fit.transform),
                transform: fit.transform,
                inliers: fit.inliers.len(),
                inlier_weight: fit.inlier_weight,
                score: c.score,
            }),
            attempts,
        });
    }
    Ok(Localization {
        estimate: None,
        attempts,
    })
}
