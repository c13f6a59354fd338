//! Angles, planar poses, the camera footprint model and convex polygon area.

use serde::{Deserialize, Serialize};

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Orientation difference `(query - db) mod 360`.
pub fn angle_diff(theta_q: f64, theta_db: f64) -> f64 {
    normalize_deg(normalize_deg(theta_q) - normalize_deg(theta_db))
}

/// Shortest unsigned angular distance in degrees, in `[0, 180]`.
pub fn circular_error(a: f64, b: f64) -> f64 {
    let d = angle_diff(a, b);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x_mm: f64,
    pub y_mm: f64,
    pub theta_deg: f64,
}

impl Pose2D {
    pub fn new(x_mm: f64, y_mm: f64, theta_deg: f64) -> Self {
        Self {
            x_mm,
            y_mm,
            theta_deg: normalize_deg(theta_deg),
        }
    }

    pub fn translation_error(&self, other: &Pose2D) -> f64 {
        (self.x_mm - other.x_mm).hypot(self.y_mm - other.y_mm)
    }
}

pub(crate) fn rotate(theta_deg: f64, (x, y): (f64, f64)) -> (f64, f64) {
    let (s, c) = theta_deg.to_radians().sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Downward camera at constant height: a rectangular ground footprint mapped
/// to pixels at a fixed scale. Pixel `(0, 0)` is a corner of the image and the
/// pose refers to the footprint center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fov_mm: (f64, f64),
    pub px_per_mm: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov_mm: (80.0, 60.0),
            px_per_mm: 4.0,
        }
    }
}

impl CameraModel {
    pub fn image_size_px(&self) -> (f64, f64) {
        (self.fov_mm.0 * self.px_per_mm, self.fov_mm.1 * self.px_per_mm)
    }

    pub fn center_px(&self) -> (f64, f64) {
        let (w, h) = self.image_size_px();
        (w / 2.0, h / 2.0)
    }

    pub fn fov_area(&self) -> f64 {
        self.fov_mm.0 * self.fov_mm.1
    }

    /// World point (mm) to image pixel for a camera at `pose`.
    pub fn world_to_image(&self, pose: &Pose2D, world: (f64, f64)) -> (f64, f64) {
        let (u, v) = rotate(-pose.theta_deg, (world.0 - pose.x_mm, world.1 - pose.y_mm));
        let (cx, cy) = self.center_px();
        (cx + u * self.px_per_mm, cy + v * self.px_per_mm)
    }

    pub fn image_to_world(&self, pose: &Pose2D, px: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = self.center_px();
        let u = ((px.0 - cx) / self.px_per_mm, (px.1 - cy) / self.px_per_mm);
        let (dx, dy) = rotate(pose.theta_deg, u);
        (pose.x_mm + dx, pose.y_mm + dy)
    }

    /// Footprint corners in world coordinates, counter-clockwise.
    pub fn footprint(&self, pose: &Pose2D) -> [(f64, f64); 4] {
        let (hw, hh) = (self.fov_mm.0 / 2.0, self.fov_mm.1 / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|c| {
            let (x, y) = rotate(pose.theta_deg, c);
            (pose.x_mm + x, pose.y_mm + y)
        })
    }
}

pub(crate) fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub(crate) fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}
