//! Deterministic synthetic feature world and a constant-height downward
//! camera observing it.
//!
//! World features carry discrete size levels (pyramid-level analog) and
//! orientations on a 1/64 degree lattice. Lattice values and their sums with
//! integer-degree camera headings are exact in `f32`, so noise-free
//! orientation differences between observations come out exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DEFAULT_WIDTH_BITS};
use crate::error::{Error, Result};
use crate::features::{ImageFeatures, Keypoint};
use crate::geometry::{clip_convex, normalize_deg, polygon_area, rotate, CameraModel, Pose2D};

const ORIENTATION_STEPS_PER_DEG: f64 = 64.0;
const GRID_CELL_MM: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldFeature {
    pub x_mm: f64,
    pub y_mm: f64,
    pub orientation_deg: f64,
    pub size_level: u8,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone)]
pub struct FeatureWorld {
    pub seed: u64,
    pub extent_mm: (f64, f64),
    pub size_levels: u8,
    pub features: Vec<WorldFeature>,
    grid: SpatialGrid,
}

#[derive(Debug, Clone)]
struct SpatialGrid {
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl SpatialGrid {
    fn build(extent: (f64, f64), features: &[WorldFeature]) -> Self {
        let cols = (extent.0 / GRID_CELL_MM).ceil().max(1.0) as usize;
        let rows = (extent.1 / GRID_CELL_MM).ceil().max(1.0) as usize;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, f) in features.iter().enumerate() {
            let c = ((f.x_mm / GRID_CELL_MM) as usize).min(cols - 1);
            let r = ((f.y_mm / GRID_CELL_MM) as usize).min(rows - 1);
            cells[r * cols + c].push(i as u32);
        }
        Self { cols, rows, cells }
    }

    fn near(&self, x: f64, y: f64, radius: f64) -> impl Iterator<Item = u32> + '_ {
        let cell = |v: f64, n: usize| ((v / GRID_CELL_MM).floor().max(0.0) as usize).min(n - 1);
        let (c0, c1) = (cell(x - radius, self.cols), cell(x + radius, self.cols));
        let (r0, r1) = (cell(y - radius, self.rows), cell(y + radius, self.rows));
        (r0..=r1).flat_map(move |r| (c0..=c1).flat_map(move |c| self.cells[r * self.cols + c].iter().copied()))
    }
}

impl FeatureWorld {
    pub fn area_m2(&self) -> f64 {
        self.extent_mm.0 * self.extent_mm.1 / 1e6
    }

    pub fn contains(&self, x_mm: f64, y_mm: f64) -> bool {
        (0.0..=self.extent_mm.0).contains(&x_mm) && (0.0..=self.extent_mm.1).contains(&y_mm)
    }
}

pub fn generate_world(seed: u64, extent_mm: (f64, f64), density_per_m2: f64, size_levels: u8) -> Result<FeatureWorld> {
    generate_world_with_width(seed, extent_mm, density_per_m2, size_levels, DEFAULT_WIDTH_BITS)
}

pub fn generate_world_with_width(
    seed: u64,
    extent_mm: (f64, f64),
    density_per_m2: f64,
    size_levels: u8,
    width_bits: usize,
) -> Result<FeatureWorld> {
    if !(extent_mm.0 > 0.0 && extent_mm.1 > 0.0) || !extent_mm.0.is_finite() || !extent_mm.1.is_finite() {
        return Err(Error::invalid(format!(
            "world extent must be positive, got {extent_mm:?}"
        )));
    }
    if !(density_per_m2 > 0.0) || !density_per_m2.is_finite() {
        return Err(Error::invalid("feature density must be positive"));
    }
    if size_levels == 0 {
        return Err(Error::invalid("size_levels must be at least 1"));
    }
    let count = (density_per_m2 * extent_mm.0 * extent_mm.1 / 1e6).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (360.0 * ORIENTATION_STEPS_PER_DEG) as u32;
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        let x_mm = rng.random_range(0.0..extent_mm.0);
        let y_mm = rng.random_range(0.0..extent_mm.1);
        let orientation_deg = rng.random_range(0..steps) as f64 / ORIENTATION_STEPS_PER_DEG;
        let size_level = rng.random_range(0..size_levels);
        let descriptor = Descriptor::random(width_bits, &mut rng)?;
        features.push(WorldFeature {
            x_mm,
            y_mm,
            orientation_deg,
            size_level,
            descriptor,
        });
    }
    let grid = SpatialGrid::build(extent_mm, &features);
    Ok(FeatureWorld {
        seed,
        extent_mm,
        size_levels,
        features,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationParams {
    pub camera: CameraModel,
    pub bitflip_prob: f64,
    pub orientation_jitter_deg: f64,
    pub max_features: usize,
    /// Keypoint size of size level 0, in pixels.
    pub base_size: f64,
    pub scale_factor: f64,
    pub seed: u64,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            bitflip_prob: 0.0,
            orientation_jitter_deg: 0.0,
            max_features: 250,
            base_size: 31.0,
            scale_factor: 1.2,
            seed: 0,
        }
    }
}

impl ObservationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bitflip_prob) {
            return Err(Error::invalid("bitflip_prob must lie in [0, 1]"));
        }
        if !(self.orientation_jitter_deg >= 0.0) {
            return Err(Error::invalid("orientation_jitter_deg must be non-negative"));
        }
        let (w, h) = self.camera.fov_mm;
        if !(w > 0.0 && h > 0.0 && self.camera.px_per_mm > 0.0) {
            return Err(Error::invalid("camera fov and scale must be positive"));
        }
        if !(self.base_size > 0.0 && self.scale_factor > 1.0) {
            return Err(Error::invalid("base_size must be positive and scale_factor > 1"));
        }
        Ok(())
    }

    pub fn level_size(&self, level: u8) -> f64 {
        self.base_size * self.scale_factor.powi(level as i32)
    }
}

/// An observation together with the world feature index behind each keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: ImageFeatures,
    pub world_ids: Vec<u32>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise_seed(seed: u64, pose: &Pose2D) -> u64 {
    [pose.x_mm.to_bits(), pose.y_mm.to_bits(), pose.theta_deg.to_bits()]
        .iter()
        .fold(mix64(seed), |acc, &b| mix64(acc ^ b))
}

pub fn observe(world: &FeatureWorld, pose: Pose2D, params: &ObservationParams) -> ImageFeatures {
    observe_with_ids(world, pose, params).features
}

/// Observes the world from `pose`. Noise is drawn from a stream seeded by
/// `params.seed` and the pose, so repeated calls are identical.
pub fn observe_with_ids(world: &FeatureWorld, pose: Pose2D, params: &ObservationParams) -> Observation {
    let cam = &params.camera;
    let (hw, hh) = (cam.fov_mm.0 / 2.0, cam.fov_mm.1 / 2.0);
    let radius = hw.hypot(hh);
    let mut visible: Vec<u32> = world
        .grid
        .near(pose.x_mm, pose.y_mm, radius)
        .filter(|&i| {
            let f = &world.features[i as usize];
            let (u, v) = rotate(-pose.theta_deg, (f.x_mm - pose.x_mm, f.y_mm - pose.y_mm));
            u >= -hw && u < hw && v >= -hh && v < hh
        })
        .collect();
    visible.sort_by(|&a, &b| {
        let (fa, fb) = (&world.features[a as usize], &world.features[b as usize]);
        fb.size_level.cmp(&fa.size_level).then(a.cmp(&b))
    });
    visible.truncate(params.max_features);

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(params.seed, &pose));
    let jitter = (params.orientation_jitter_deg > 0.0)
        .then(|| Normal::new(0.0, params.orientation_jitter_deg).expect("validated sigma"));
    let flips = (params.bitflip_prob > 0.0 && params.bitflip_prob < 1.0)
        .then(|| Geometric::new(params.bitflip_prob).expect("validated probability"));

    let mut keypoints = Vec::with_capacity(visible.len());
    for (kp_id, &wid) in visible.iter().enumerate() {
        let f = &world.features[wid as usize];
        let (x, y) = cam.world_to_image(&pose, (f.x_mm, f.y_mm));
        let mut orientation = normalize_deg(f.orientation_deg - pose.theta_deg);
        if let Some(j) = &jitter {
            orientation += j.sample(&mut rng);
        }
        let mut descriptor = f.descriptor.clone();
        let width = descriptor.width();
        if params.bitflip_prob >= 1.0 {
            (0..width).for_each(|b| descriptor.flip_bit(b));
        } else if let Some(g) = &flips {
            // geometric gaps between flipped bits == independent Bernoulli flips
            let mut bit = g.sample(&mut rng);
            while (bit as usize) < width {
                descriptor.flip_bit(bit as usize);
                bit += 1 + g.sample(&mut rng);
            }
        }
        keypoints.push(Keypoint::new(
            kp_id as u32,
            x as f32,
            y as f32,
            params.level_size(f.size_level) as f32,
            orientation,
            descriptor,
        ));
    }
    Observation {
        features: ImageFeatures::new(0, keypoints).with_pose(pose),
        world_ids: visible,
    }
}

/// Intersection area of the two footprints divided by the footprint area.
pub fn overlap_ratio(a: &Pose2D, b: &Pose2D, fov_mm: (f64, f64)) -> f64 {
    let cam = CameraModel { fov_mm, px_per_mm: 1.0 };
    let reach = fov_mm.0.hypot(fov_mm.1);
    if (a.x_mm - b.x_mm).hypot(a.y_mm - b.y_mm) >= reach {
        return 0.0;
    }
    let pa = cam.footprint(a);
    let pb = cam.footprint(b);
    let area = polygon_area(&clip_convex(&pa, &pb));
    (area / cam.fov_area()).clamp(0.0, 1.0)
}

/// Lawnmower survey poses on a square grid: row `r` is traversed with
/// heading 0 when even and 180 when odd.
pub fn survey_poses(extent_mm: (f64, f64), spacing_mm: f64) -> Vec<Pose2D> {
    let cols = (extent_mm.0 / spacing_mm).ceil().max(1.0) as usize;
    let rows = (extent_mm.1 / spacing_mm).ceil().max(1.0) as usize;
    let mut poses = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        let y = (r as f64 + 0.5) * spacing_mm;
        for i in 0..cols {
            let c = if r % 2 == 0 { i } else { cols - 1 - i };
            let x = (c as f64 + 0.5) * spacing_mm;
            let theta = if r % 2 == 0 { 0.0 } else { 180.0 };
            poses.push(Pose2D::new(x.min(extent_mm.0), y.min(extent_mm.1), theta));
        }
    }
    poses
}

fn check_spacing(spacing_mm: f64, params: &ObservationParams) -> Result<()> {
    let (w, h) = params.camera.fov_mm;
    if !(spacing_mm > 0.0) || spacing_mm >= w.min(h) {
        return Err(Error::invalid(format!(
            "survey spacing {spacing_mm} mm must be positive and below the footprint size {w}x{h} mm"
        )));
    }
    Ok(())
}

/// Observes every survey pose; image ids are the survey order.
pub fn generate_survey(
    world: &FeatureWorld,
    spacing_mm: f64,
    params: &ObservationParams,
) -> Result<Vec<ImageFeatures>> {
    params.validate()?;
    check_spacing(spacing_mm, params)?;
    Ok(survey_poses(world.extent_mm, spacing_mm)
        .into_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut f = observe(world, pose, params);
            f.image_id = i as u64;
            f
        })
        .collect())
}

/// Samples `n` query poses whose best overlap with any of `database` lies in
/// `overlap_range`, then observes them. Query ids start at `first_id`.
pub fn generate_queries(
    world: &FeatureWorld,
    database: &[Pose2D],
    n: usize,
    overlap_range: (f64, f64),
    params: &ObservationParams,
    seed: u64,
    first_id: u64,
) -> Result<Vec<ImageFeatures>> {
    params.validate()?;
    let (lo, hi) = overlap_range;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(Error::invalid(format!(
            "overlap range {overlap_range:?} is not a sub-range of [0, 1]"
        )));
    }
    if n > 0 && database.is_empty() && lo > 0.0 {
        return Err(Error::invalid(
            "queries with a positive overlap target need database poses",
        ));
    }
    let fov = params.camera.fov_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 10_000usize.max(n * 2_000);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "could not place {n} queries with overlap in {overlap_range:?} after {max_attempts} attempts"
            )));
        }
        let pose = Pose2D::new(
            rng.random_range(0.0..world.extent_mm.0),
            rng.random_range(0.0..world.extent_mm.1),
            rng.random_range(0.0..360.0),
        );
        let best = database
            .iter()
            .map(|d| overlap_ratio(&pose, d, fov))
            .fold(0.0, f64::max);
        if best >= lo && best <= hi {
            let mut f = observe(world, pose, params);
            f.image_id = first_id + out.len() as u64;
            out.push(f);
        }
    }
    Ok(out)
}

/// The same image seen by a camera turned so that every keypoint orientation
/// grows by `delta_deg`: positions rotate about the image center, the
/// recorded pose heading decreases by `delta_deg`.
pub fn rotated_replay(features: &ImageFeatures, camera: &CameraModel, delta_deg: f64) -> ImageFeatures {
    let (cx, cy) = camera.center_px();
    let keypoints = features
        .keypoints
        .iter()
        .map(|k| {
            let (u, v) = rotate(delta_deg, (k.x as f64 - cx, k.y as f64 - cy));
            Keypoint::new(
                k.id,
                (cx + u) as f32,
                (cy + v) as f32,
                k.size,
                k.orientation_deg as f64 + delta_deg,
                k.descriptor.clone(),
            )
        })
        .collect();
    ImageFeatures {
        image_id: features.image_id,
        pose: features
            .pose
            .map(|p| Pose2D::new(p.x_mm, p.y_mm, p.theta_deg - delta_deg)),
        keypoints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_diff;
    use std::collections::{HashMap, HashSet};

    fn dense_world() -> FeatureWorld {
        generate_world(5, (400.0, 400.0), 60_000.0, 8).unwrap()
    }

    #[test]
    fn world_count_and_determinism() {
        let w = generate_world(1, (1000.0, 1000.0), 1000.0, 8).unwrap();
        assert!((950..=1050).contains(&w.features.len()));
        let w2 = generate_world(1, (1000.0, 1000.0), 1000.0, 8).unwrap();
        assert_eq!(w.features, w2.features);
        let w3 = generate_world(2, (1000.0, 1000.0), 1000.0, 8).unwrap();
        let hashes = |w: &FeatureWorld| w.features.iter().map(|f| f.descriptor.to_hex()).collect::<HashSet<_>>();
        assert_ne!(hashes(&w), hashes(&w3));
        assert!(w.features.iter().all(|f| w.contains(f.x_mm, f.y_mm)));
    }

    #[test]
    fn bad_world_parameters() {
        assert!(generate_world(1, (0.0, 10.0), 1.0, 8).is_err());
        assert!(generate_world(1, (-5.0, 10.0), 1.0, 8).is_err());
        assert!(generate_world(1, (10.0, 10.0), 0.0, 8).is_err());
    }

    #[test]
    fn noise_free_observation_is_deterministic() {
        let w = dense_world();
        let p = ObservationParams::default();
        let pose = Pose2D::new(200.0, 200.0, 33.0);
        assert_eq!(observe(&w, pose, &p), observe(&w, pose, &p));
        let noisy = ObservationParams {
            bitflip_prob: 0.05,
            orientation_jitter_deg: 2.0,
            ..p
        };
        assert_eq!(observe(&w, pose, &noisy), observe(&w, pose, &noisy));
    }

    #[test]
    fn rigid_rotation_gives_constant_angle_difference() {
        let w = dense_world();
        let p = ObservationParams::default();
        let a = observe_with_ids(&w, Pose2D::new(200.0, 200.0, 0.0), &p);
        let b = observe_with_ids(&w, Pose2D::new(200.0, 200.0, 90.0), &p);
        let in_b: HashMap<u32, usize> = b.world_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut shared = 0;
        for (i, id) in a.world_ids.iter().enumerate() {
            if let Some(&j) = in_b.get(id) {
                let ka = &a.features.keypoints[i];
                let kb = &b.features.keypoints[j];
                assert_eq!(angle_diff(ka.orientation_deg as f64, kb.orientation_deg as f64), 90.0);
                assert_eq!(ka.descriptor, kb.descriptor);
                assert_eq!(ka.size, kb.size);
                shared += 1;
            }
        }
        assert!(shared > 50);
    }

    #[test]
    fn observation_geometry_and_truncation() {
        let w = dense_world();
        let p = ObservationParams::default();
        let obs = observe_with_ids(&w, Pose2D::new(150.0, 220.0, 71.0), &p);
        assert!(obs.features.keypoints.len() <= 250);
        let (iw, ih) = p.camera.image_size_px();
        for (k, &wid) in obs.features.keypoints.iter().zip(&obs.world_ids) {
            assert!(k.x >= -1e-3 && (k.x as f64) <= iw + 1e-3 && k.y >= -1e-3 && (k.y as f64) <= ih + 1e-3);
            let f = &w.features[wid as usize];
            assert!((k.size as f64 - p.level_size(f.size_level)).abs() < 1e-3);
        }
        let levels: Vec<u8> = obs
            .world_ids
            .iter()
            .map(|&i| w.features[i as usize].size_level)
            .collect();
        assert!(levels.windows(2).all(|p| p[0] >= p[1]));
        let ids: Vec<u32> = obs.features.keypoints.iter().map(|k| k.id).collect();
        assert_eq!(ids, (0..ids.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn shared_features_track_overlap() {
        let w = generate_world(8, (600.0, 600.0), 20_000.0, 8).unwrap();
        let p = ObservationParams {
            max_features: usize::MAX,
            ..Default::default()
        };
        let a = Pose2D::new(300.0, 300.0, 0.0);
        let b = Pose2D::new(340.0, 300.0, 0.0);
        let oa = observe_with_ids(&w, a, &p);
        let ob = observe_with_ids(&w, b, &p);
        let sa: HashSet<_> = oa.world_ids.iter().collect();
        let shared = ob.world_ids.iter().filter(|i| sa.contains(i)).count() as f64;
        let frac = shared / oa.world_ids.len() as f64;
        let geo = overlap_ratio(&a, &b, p.camera.fov_mm);
        assert!((geo - 0.5).abs() < 1e-12);
        assert!((frac - geo).abs() < 0.1, "shared fraction {frac} vs overlap {geo}");
    }

    #[test]
    fn overlap_ratio_cases() {
        let fov = (80.0, 60.0);
        let a = Pose2D::new(100.0, 100.0, 20.0);
        assert!((overlap_ratio(&a, &a, fov) - 1.0).abs() < 1e-9);
        assert_eq!(overlap_ratio(&a, &Pose2D::new(500.0, 100.0, 0.0), fov), 0.0);
        let h = Pose2D::new(100.0, 100.0, 0.0);
        assert!((overlap_ratio(&h, &Pose2D::new(140.0, 100.0, 0.0), fov) - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let p = Pose2D::new(
                rng.random_range(0.0..150.0),
                rng.random_range(0.0..150.0),
                rng.random_range(0.0..360.0),
            );
            let q = Pose2D::new(
                rng.random_range(0.0..150.0),
                rng.random_range(0.0..150.0),
                rng.random_range(0.0..360.0),
            );
            let (pq, qp) = (overlap_ratio(&p, &q, fov), overlap_ratio(&q, &p, fov));
            assert!((pq - qp).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&pq));
        }
    }

    #[test]
    fn survey_half_fov_spacing_neighbours() {
        let fov = (60.0, 60.0);
        let poses = survey_poses((300.0, 300.0), 30.0);
        let cols = 10;
        // interior image at (r=4, col index 4)
        let center = poses[4 * cols + 4];
        let neighbours = poses
            .iter()
            .filter(|q| **q != center && overlap_ratio(&center, q, fov) > 0.0)
            .filter(|q| (q.x_mm - center.x_mm).abs() <= 30.0 + 1e-9 && (q.y_mm - center.y_mm).abs() <= 30.0 + 1e-9)
            .count();
        assert_eq!(neighbours, 8);
    }

    #[test]
    fn queries_meet_overlap_target() {
        let w = dense_world();
        let p = ObservationParams::default();
        let db = generate_survey(&w, 40.0, &p).unwrap();
        let poses: Vec<_> = db.iter().map(|f| f.pose.unwrap()).collect();
        let q1 = generate_queries(&w, &poses, 100, (0.25, 1.0), &p, 3, 10_000).unwrap();
        let q2 = generate_queries(&w, &poses, 100, (0.25, 1.0), &p, 3, 10_000).unwrap();
        assert_eq!(q1, q2);
        for q in &q1 {
            let best = poses
                .iter()
                .map(|d| overlap_ratio(&q.pose.unwrap(), d, p.camera.fov_mm))
                .fold(0.0, f64::max);
            assert!(best >= 0.25);
        }
        assert!(generate_survey(&w, 80.0, &p).is_err());
        assert!(generate_queries(&w, &poses, 1, (1.1, 1.2), &p, 3, 0).is_err());
    }

    #[test]
    fn replay_rotation_shifts_orientation() {
        let w = dense_world();
        let p = ObservationParams::default();
        let obs = observe(&w, Pose2D::new(200.0, 200.0, 0.0), &p);
        let rot = rotated_replay(&obs, &p.camera, 59.0);
        for (a, b) in rot.keypoints.iter().zip(&obs.keypoints) {
            assert_eq!(angle_diff(a.orientation_deg as f64, b.orientation_deg as f64), 59.0);
        }
    }
}
