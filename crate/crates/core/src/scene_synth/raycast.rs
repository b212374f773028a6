//! Exact ray intersection against the analytic shapes.
//!
//! Rays leave the camera origin along the unnormalized direction
//! `(x', y', 1)`, so the ray parameter at a hit is its z-depth.

use super::{ObjectRecord, Shape};

/// Direction components this close to zero are nudged to avoid 0/0 in the
/// slab tests.
const GRAZE: f64 = 1e-12;
const NUDGE: f64 = 1e-9;
const T_MIN: f64 = 1e-9;

fn nudge(x: f64) -> f64 {
    if x.abs() < GRAZE {
        NUDGE
    } else {
        x
    }
}

fn hit_box(r: [f64; 3], c: [f64; 3], h: [f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        let d = nudge(r[i]);
        let a = (c[i] - h[i]) / d;
        let b = (c[i] + h[i]) / d;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 >= t0 && t0 > T_MIN).then_some(t0)
}

fn hit_sphere(r: [f64; 3], c: [f64; 3], radius: f64) -> Option<f64> {
    let a = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let b = r[0] * c[0] + r[1] * c[1] + r[2] * c[2];
    let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - radius * radius;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (b - disc.sqrt()) / a;
    (t > T_MIN).then_some(t)
}

/// Cylinder with its axis along y.
fn hit_cylinder(r: [f64; 3], c: [f64; 3], radius: f64, half_h: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > T_MIN && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // Side wall, solved in the x-z plane.
    let a = r[0] * r[0] + r[2] * r[2];
    let b = r[0] * c[0] + r[2] * c[2];
    let cc = c[0] * c[0] + c[2] * c[2] - radius * radius;
    let disc = b * b - a * cc;
    if disc >= 0.0 {
        let t = (b - disc.sqrt()) / a;
        let y = t * r[1];
        if (y - c[1]).abs() <= half_h {
            take(t);
        }
    }
    // End caps.
    let ry = nudge(r[1]);
    for cap in [c[1] - half_h, c[1] + half_h] {
        let t = cap / ry;
        let dx = t * r[0] - c[0];
        let dz = t * r[2] - c[2];
        if dx * dx + dz * dz <= radius * radius {
            take(t);
        }
    }
    best
}

/// Z-depth of the first intersection of the ray with `obj`.
pub fn intersect(r: [f64; 3], obj: &ObjectRecord) -> Option<f64> {
    match obj.shape {
        Shape::Box | Shape::ThinPlate => hit_box(r, obj.centroid, obj.half_extents),
        Shape::Sphere => hit_sphere(r, obj.centroid, obj.half_extents[0]),
        Shape::Cylinder => hit_cylinder(r, obj.centroid, obj.half_extents[0], obj.half_extents[1]),
    }
}

/// Signed distance from `p` to the surface of `obj` (negative inside).
pub fn signed_distance(p: [f64; 3], obj: &ObjectRecord) -> f64 {
    let c = obj.centroid;
    let h = obj.half_extents;
    let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    match obj.shape {
        Shape::Box | Shape::ThinPlate => {
            let d = [q[0].abs() - h[0], q[1].abs() - h[1], q[2].abs() - h[2]];
            let outside = (d[0].max(0.0).powi(2) + d[1].max(0.0).powi(2) + d[2].max(0.0).powi(2)).sqrt();
            outside + d[0].max(d[1]).max(d[2]).min(0.0)
        }
        Shape::Sphere => (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() - h[0],
        Shape::Cylinder => {
            let dr = (q[0] * q[0] + q[2] * q[2]).sqrt() - h[0];
            let dy = q[1].abs() - h[1];
            let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dr.max(dy).min(0.0)
        }
    }
}
