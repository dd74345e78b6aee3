use crate::error::{Error, Result};
use crate::geometry::{clip_convex, polygon_area, Box3d};

/// Intersection over union of the two yawed BEV rectangles.
pub fn rotated_bev_iou(a: &Box3d, b: &Box3d) -> Result<f64> {
    let (area_a, area_b) = (a.bev_area(), b.bev_area());
    if !(area_a > 0.0 && area_b > 0.0) {
        return Err(Error::DegenerateBox);
    }
    let reach = (a.size[0].hypot(a.size[1]) + b.size[0].hypot(b.size[1])) / 2.0;
    if (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]) >= reach {
        return Ok(0.0);
    }
    let inter = polygon_area(&clip_convex(&a.corners_bev(), &b.corners_bev())).max(0.0);
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
