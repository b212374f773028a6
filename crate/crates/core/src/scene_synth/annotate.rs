//! Exact thought annotation and the scripted minimum-jerk demonstration.

use super::{SceneSpec, UP, WORKSPACE_MAX, WORKSPACE_MIN};
use crate::action_expert::{ActionChunk, ACTION_DIM, CHUNK_LEN, GRIPPER};
use crate::error::{Error, Result};
use crate::reasoner::vocab::ChainValues;

pub const PREGRASP_STANDOFF: f64 = 0.10;
pub const RETRACT_LIFT: f64 = 0.15;
pub const MAX_STEP_TRANSLATION: f64 = 0.05;
pub const MAX_STEP_ROTATION: f64 = 0.2;
/// Lateral distance reported when the target has no neighbour; it lies in
/// the last coordinate bin.
pub const NO_NEIGHBOUR: f64 = 0.63;

/// End-effector pose: translation then rotation vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(pub [f64; 6]);

impl Pose {
    fn pos(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    fn delta_from(&self, prev: &Pose) -> [f64; 6] {
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = self.0[i] - prev.0[i];
        }
        d
    }
}

/// Gripper orientation (rotation vector about y) whose closing axis points
/// against the surface normal.
pub fn approach_rotation(n: [f64; 3]) -> [f64; 3] {
    [0.0, (-n[0]).atan2(-n[2]), 0.0]
}

fn pose(p: [f64; 3], r: [f64; 3]) -> Pose {
    Pose([p[0], p[1], p[2], r[0], r[1], r[2]])
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Pre-grasp, grasp and retract poses for `target`.
pub fn waypoints(spec: &SceneSpec, target: usize) -> [Pose; 3] {
    let o = &spec.objects[target];
    let rot = approach_rotation(o.grasp_normal);
    let g = o.grasp_point;
    [
        pose(add(g, o.grasp_normal, PREGRASP_STANDOFF), rot),
        pose(g, rot),
        pose(add(g, UP, RETRACT_LIFT), rot),
    ]
}

/// Start pose: the target's pre-grasp pose displaced by the spec's offset.
fn start_for(spec: &SceneSpec, target: usize) -> Pose {
    let mut p = waypoints(spec, target)[0];
    for i in 0..6 {
        p.0[i] += spec.start_offset[i];
    }
    p
}

pub(crate) fn start_pose(spec: &SceneSpec) -> Pose {
    start_for(spec, spec.target)
}

pub fn annotate_chain(spec: &SceneSpec, target: usize) -> Result<ChainValues> {
    let o = spec
        .objects
        .get(target)
        .ok_or_else(|| Error::Scene(format!("target index {target} out of range")))?;
    let c = o.centroid;
    let height = -c[1] - spec.table_height;
    let lateral = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, p)| ((p.centroid[0] - c[0]).powi(2) + (p.centroid[2] - c[2]).powi(2)).sqrt())
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
        .unwrap_or(NO_NEIGHBOUR);
    let wps = waypoints(spec, target);
    let mut prev = start_for(spec, target);
    let mut deltas = [[0.0; 6]; 3];
    for (d, w) in deltas.iter_mut().zip(&wps) {
        *d = w.delta_from(&prev);
        prev = *w;
    }
    Ok(ChainValues {
        centroid: c,
        contact_offset: [o.grasp_point[0] - c[0], o.grasp_point[1] - c[1], o.grasp_point[2] - c[2]],
        approach_normal: o.grasp_normal,
        relations: [height, lateral],
        waypoints: deltas,
    })
}

/// Minimum-jerk time scaling.
fn min_jerk(tau: f64) -> f64 {
    tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

struct Path {
    points: [[f64; 3]; 4],
    cum: [f64; 4],
    start_rot: [f64; 3],
    end_rot: [f64; 3],
}

impl Path {
    fn new(start: Pose, wps: &[Pose; 3]) -> Self {
        let points = [start.pos(), wps[0].pos(), wps[1].pos(), wps[2].pos()];
        let mut cum = [0.0; 4];
        for i in 1..4 {
            cum[i] = cum[i - 1] + dist(points[i - 1], points[i]);
        }
        Self {
            points,
            cum,
            start_rot: [start.0[3], start.0[4], start.0[5]],
            end_rot: [wps[0].0[3], wps[0].0[4], wps[0].0[5]],
        }
    }

    fn length(&self) -> f64 {
        self.cum[3]
    }

    /// Pose at arc fraction `s`; rotation completes at the pre-grasp.
    fn at(&self, s: f64) -> Pose {
        let len = self.length();
        let arc = s * len;
        let mut p = self.points[3];
        for i in 0..3 {
            if arc <= self.cum[i + 1] || i == 2 {
                let seg = self.cum[i + 1] - self.cum[i];
                let f = if seg > 0.0 { ((arc - self.cum[i]) / seg).clamp(0.0, 1.0) } else { 1.0 };
                p = add(self.points[i], [
                    self.points[i + 1][0] - self.points[i][0],
                    self.points[i + 1][1] - self.points[i][1],
                    self.points[i + 1][2] - self.points[i][2],
                ], f);
                break;
            }
        }
        if s >= 1.0 {
            p = self.points[3];
        }
        let s1 = if len > 0.0 { self.cum[1] / len } else { 0.0 };
        let fr = if s1 > 0.0 { (s / s1).min(1.0) } else { 1.0 };
        let mut r = [0.0; 3];
        for i in 0..3 {
            r[i] = self.start_rot[i] + fr * (self.end_rot[i] - self.start_rot[i]);
        }
        pose(p, r)
    }

    fn grasp_fraction(&self) -> f64 {
        self.cum[2] / self.length()
    }
}

fn script(spec: &SceneSpec) -> ActionChunk {
    let path = Path::new(start_pose(spec), &waypoints(spec, spec.target));
    let sg = path.grasp_fraction();
    let mut prev = path.at(0.0);
    let mut steps = Vec::with_capacity(CHUNK_LEN);
    for i in 1..=CHUNK_LEN {
        let s = min_jerk(i as f64 / CHUNK_LEN as f64);
        let cur = path.at(s);
        let d = cur.delta_from(&prev);
        let mut step = [0.0; ACTION_DIM];
        step[..6].copy_from_slice(&d);
        step[GRIPPER] = if s >= sg - 1e-12 { 1.0 } else { 0.0 };
        steps.push(step);
        prev = cur;
    }
    ActionChunk { steps }
}

/// Demonstration chunk for the spec's target from its start pose.
pub fn script_demo(spec: &SceneSpec, target: usize) -> Result<ActionChunk> {
    if target != spec.target {
        return Err(Error::Scene(format!(
            "demonstrations start at the pre-grasp of target {}, not {target}",
            spec.target
        )));
    }
    Ok(script(spec))
}

pub(crate) fn check_reachable(spec: &SceneSpec) -> Result<()> {
    let start = start_pose(spec);
    let wps = waypoints(spec, spec.target);
    for p in std::iter::once(&start).chain(wps.iter()) {
        for a in 0..3 {
            if !(WORKSPACE_MIN[a]..=WORKSPACE_MAX[a]).contains(&p.0[a]) {
                return Err(Error::Scene(format!("unreachable: pose {:?} outside workspace", p.0)));
            }
        }
    }
    let chunk = script(spec);
    for (i, s) in chunk.steps.iter().enumerate() {
        let t = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        let r = s[3].abs().max(s[4].abs()).max(s[5].abs());
        if t > MAX_STEP_TRANSLATION + 1e-12 || r > MAX_STEP_ROTATION + 1e-12 {
            return Err(Error::Scene(format!(
                "unreachable: step {i} moves {t:.4} m / {r:.4} rad, above the per-step bound"
            )));
        }
    }
    Ok(())
}
