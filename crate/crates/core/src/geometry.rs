//! Oriented boxes and the planar polygon helpers used for BEV overlap and
//! ray casting.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// A box with yaw about the vertical axis. `size` is `(l, w, h)` with length
/// along the heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3d {
    /// BEV corners in counter-clockwise order.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(dx, dy)| [self.center[0] + c * dx - s * dy, self.center[1] + s * dx + c * dy])
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// World point expressed in the box frame (origin at the center).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Containment with a tolerance `eps` on every face.
    pub fn contains(&self, p: [f64; 3], eps: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.size[i] / 2.0 + eps)
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let l = self.to_local([x, y, self.center[2]]);
        l[0].abs() <= self.size[0] / 2.0 && l[1].abs() <= self.size[1] / 2.0
    }

    /// Parameter interval `(t_enter, t_exit)` where `origin + t·dir` is inside
    /// the box (slab method in the box frame), if the line meets it.
    pub fn ray_interval(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        let o = self.to_local(origin);
        let (s, c) = self.yaw.sin_cos();
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let half = self.size[i] / 2.0;
            if d[i].abs() < 1e-15 {
                if o[i].abs() > half {
                    return None;
                }
                continue;
            }
            let a = (-half - o[i]) / d[i];
            let b = (half - o[i]) / d[i];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Same box seen from a frame whose origin sits at `pose` in this frame.
    pub fn transformed(&self, pose: &RigidTransform) -> Box3d {
        let [x, y] = pose.apply([self.center[0], self.center[1]]);
        Box3d { center: [x, y, self.center[2]], size: self.size, yaw: normalize_angle(self.yaw + pose.rotation) }
    }
}

/// Planar rotation followed by translation: `p ↦ R(rotation)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl RigidTransform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * p[0] - s * p[1] + self.translation[0], s * p[0] + c * p[1] + self.translation[1]]
    }

    pub fn inverse(&self) -> RigidTransform {
        let (s, c) = self.rotation.sin_cos();
        let [tx, ty] = self.translation;
        RigidTransform { rotation: -self.rotation, translation: [-(c * tx + s * ty), -(-s * tx + c * ty)] }
    }
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Clips `subject` against a convex counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
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

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}
