//! Pinhole intrinsics, back-projection, and per-patch 3D anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const PATCH_GRID: usize = 16;
pub const PATCH_PX: usize = IMAGE_SIZE / PATCH_GRID;
pub const NUM_PATCHES: usize = PATCH_GRID * PATCH_GRID;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 220.0,
            fy: 220.0,
            cx: 112.0,
            cy: 112.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::Invalid(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// `K⁻¹·[u, v, 1]`, not normalized.
    pub fn unproject_dir(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Unit ray direction through pixel `(u, v)`.
    pub fn ray_dir(&self, u: f64, v: f64) -> [f64; 3] {
        let d = self.unproject_dir(u, v);
        let n = (d[0] * d[0] + d[1] * d[1] + 1.0).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Row-major single-channel image, `data[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidShape {
                op: "depth_map",
                shape: vec![height, width],
                reason: format!("{} values supplied", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Per-pixel camera-frame points, `points[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 3]>,
}

/// Lift every pixel: `p = D·K⁻¹·[u, v, 1]` with integer pixel coordinates.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointMap> {
    let mut points = Vec::with_capacity(depth.data.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NonPositiveDepth { u, v, value: d });
            }
            let r = k.unproject_dir(u as f64, v as f64);
            points.push([d * r[0], d * r[1], d * r[2]]);
        }
    }
    Ok(PointMap {
        width: depth.width,
        height: depth.height,
        points,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub grid: usize,
    pub anchors: Vec<[f64; 3]>,
}

/// Mean point of each block on a `grid × grid` tiling; anchor index is
/// `row * grid + col`.
pub fn patch_anchors(points: &PointMap, grid: usize) -> Result<AnchorSet> {
    if grid == 0 || points.width % grid != 0 || points.height % grid != 0 {
        return Err(Error::InvalidShape {
            op: "patch_anchors",
            shape: vec![points.height, points.width],
            reason: format!("not divisible by patch grid {grid}"),
        });
    }
    let (bw, bh) = (points.width / grid, points.height / grid);
    let inv = 1.0 / (bw * bh) as f64;
    let mut anchors = vec![[0.0; 3]; grid * grid];
    for (k, a) in anchors.iter_mut().enumerate() {
        let (row, col) = (k / grid, k % grid);
        let mut acc = [0.0; 3];
        for v in row * bh..(row + 1) * bh {
            for u in col * bw..(col + 1) * bw {
                let p = points.points[v * points.width + u];
                for i in 0..3 {
                    acc[i] += p[i];
                }
            }
        }
        *a = [acc[0] * inv, acc[1] * inv, acc[2] * inv];
    }
    Ok(AnchorSet { grid, anchors })
}
