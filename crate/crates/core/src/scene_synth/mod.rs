//! Procedural tabletop scenes with analytic depth, synthetic patch
//! features, exact thought annotations, and scripted demonstrations.
//!
//! Frame: camera at the origin looking down +z, x right, y down. The table
//! is the (unrendered) plane `y = -table_height`; "up" is -y.

mod annotate;
mod io;
pub mod raycast;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use annotate::{annotate_chain, approach_rotation, script_demo, waypoints, Pose, NO_NEIGHBOUR};
pub use io::{load_manifest, load_scene, save_scene, write_dataset, Manifest, ManifestEntry, Split};

use crate::action_expert::ActionChunk;
use crate::camera::{DepthMap, Intrinsics, IMAGE_SIZE, NUM_PATCHES, PATCH_GRID, PATCH_PX};
use crate::error::{Error, Result};
use crate::reasoner::vocab::{ChainValues, ThoughtChain, NUM_CLASSES};
use crate::tensor::Tensor;

pub const FAR_PLANE: f64 = 2.0;
pub const FEATURE_NOISE: f64 = 0.05;
pub const MAX_OBJECTS: usize = 6;
pub const WORKSPACE_MIN: [f64; 3] = [-0.5, -0.5, 0.2];
pub const WORKSPACE_MAX: [f64; 3] = [0.5, 0.5, 1.0];
pub const UP: [f64; 3] = [0.0, -1.0, 0.0];
/// Separation kept between object footprints.
const CLEARANCE: f64 = 0.01;
/// Minimum majority-owned patches for a target to count as visible.
const MIN_TARGET_PATCHES: usize = 2;
const BACKGROUND_ID: u64 = 0xB6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Sphere,
    /// Axis along y; `half_extents = (radius, half_height, radius)`.
    Cylinder,
    /// A box that is thin along z.
    ThinPlate,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassInfo {
    pub name: &'static str,
    pub shape: Shape,
    pub half_extents: [f64; 3],
    pub grasp_normal: [f64; 3],
}

/// Every class has one fixed shape, size and grasp face. Half-heights are
/// odd centimetres so that centroids on an even-centimetre table land on
/// the odd-centimetre lattice used for placement.
pub const CLASSES: [ClassInfo; NUM_CLASSES] = [
    ClassInfo { name: "cube", shape: Shape::Box, half_extents: [0.03, 0.03, 0.03], grasp_normal: [0.0, 0.0, -1.0] },
    ClassInfo { name: "tall_box", shape: Shape::Box, half_extents: [0.025, 0.05, 0.025], grasp_normal: [-1.0, 0.0, 0.0] },
    ClassInfo { name: "ball", shape: Shape::Sphere, half_extents: [0.03, 0.03, 0.03], grasp_normal: [0.0, 0.0, -1.0] },
    ClassInfo { name: "big_ball", shape: Shape::Sphere, half_extents: [0.05, 0.05, 0.05], grasp_normal: [1.0, 0.0, 0.0] },
    ClassInfo { name: "can", shape: Shape::Cylinder, half_extents: [0.03, 0.05, 0.03], grasp_normal: [0.0, 0.0, -1.0] },
    ClassInfo { name: "bowl", shape: Shape::Cylinder, half_extents: [0.045, 0.03, 0.045], grasp_normal: [-1.0, 0.0, 0.0] },
    ClassInfo { name: "plate", shape: Shape::ThinPlate, half_extents: [0.06, 0.05, 0.005], grasp_normal: [0.0, 0.0, -1.0] },
    ClassInfo { name: "block", shape: Shape::Box, half_extents: [0.05, 0.03, 0.04], grasp_normal: [1.0, 0.0, 0.0] },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: Shape,
    pub centroid: [f64; 3],
    pub half_extents: [f64; 3],
    pub class_id: usize,
    pub grasp_point: [f64; 3],
    pub grasp_normal: [f64; 3],
}

impl ObjectRecord {
    /// An instance of `class_id` centred at `centroid`, grasped on its
    /// class face.
    pub fn of_class(class_id: usize, centroid: [f64; 3]) -> Self {
        let c = CLASSES[class_id];
        let n = c.grasp_normal;
        let reach: f64 = (0..3).map(|i| c.half_extents[i] * n[i].abs()).sum();
        Self {
            shape: c.shape,
            centroid,
            half_extents: c.half_extents,
            class_id,
            grasp_point: [centroid[0] + reach * n[0], centroid[1] + reach * n[1], centroid[2] + reach * n[2]],
            grasp_normal: n,
        }
    }

    /// Footprint half-widths in the x-z plane.
    fn footprint(&self) -> [f64; 2] {
        [self.half_extents[0], self.half_extents[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Table surface height along "up" (the plane y = -table_height).
    pub table_height: f64,
    pub camera: Intrinsics,
    pub target: usize,
    /// Start end-effector pose relative to the pre-grasp pose
    /// (translation in metres, rotation vector in radians).
    pub start_offset: [f64; 6],
    pub objects: Vec<ObjectRecord>,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl SceneSpec {
    pub fn target_object(&self) -> &ObjectRecord {
        &self.objects[self.target]
    }

    /// Rigidly translate the whole scene, table included.
    pub fn translated(&self, v: [f64; 3]) -> Self {
        let mut s = self.clone();
        for o in &mut s.objects {
            for i in 0..3 {
                o.centroid[i] += v[i];
                o.grasp_point[i] += v[i];
            }
        }
        s.table_height -= v[1];
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scene(m));
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return bad(format!("{} objects, expected 1..={MAX_OBJECTS}", self.objects.len()));
        }
        if self.target >= self.objects.len() {
            return bad(format!("target index {} out of range", self.target));
        }
        self.camera.validate(IMAGE_SIZE, IMAGE_SIZE)?;
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= NUM_CLASSES {
                return bad(format!("object {i}: class {} unknown", o.class_id));
            }
            if o.half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad(format!("object {i}: half extents must be positive"));
            }
            for a in 0..3 {
                if !(WORKSPACE_MIN[a]..=WORKSPACE_MAX[a]).contains(&o.centroid[a]) {
                    return bad(format!("object {i}: centroid {:?} outside workspace", o.centroid));
                }
            }
            if (norm(o.grasp_normal) - 1.0).abs() > 1e-9 {
                return bad(format!("object {i}: grasp normal not unit length"));
            }
            if raycast::signed_distance(o.grasp_point, o).abs() > 1e-6 {
                return bad(format!("object {i}: grasp point off the surface"));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if p.class_id == o.class_id {
                    return bad(format!("objects {i} and {j} share class {}", o.class_id));
                }
                let (a, b) = (o.footprint(), p.footprint());
                let sep_x = (o.centroid[0] - p.centroid[0]).abs() - a[0] - b[0];
                let sep_z = (o.centroid[2] - p.centroid[2]).abs() - a[1] - b[1];
                let sep_y = (o.centroid[1] - p.centroid[1]).abs() - o.half_extents[1] - p.half_extents[1];
                if sep_x < 0.0 && sep_z < 0.0 && sep_y < 0.0 {
                    return bad(format!("objects {i} and {j} interpenetrate"));
                }
            }
        }
        annotate::check_reachable(self)
    }

    /// Draw a valid random scene. Placement uses an odd-centimetre lattice
    /// in x and z and an even-centimetre table, so target centroids sit at
    /// coordinate-bin centres.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE0_E5EE_D000_0001);
        loop {
            if let Some(spec) = Self::try_random(seed, &mut rng) {
                if spec.validate().is_ok() && target_visible(&spec) {
                    return spec;
                }
            }
        }
    }

    fn try_random(seed: u64, rng: &mut ChaCha8Rng) -> Option<Self> {
        let n = rng.random_range(1..=5usize);
        let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
        classes.shuffle(rng);
        let table_y = 0.02 * rng.random_range(5..=10) as f64;
        let mut objects: Vec<ObjectRecord> = Vec::new();
        for &class_id in classes.iter().take(n) {
            let mut placed = false;
            for _ in 0..50 {
                let z = 0.01 * (2 * rng.random_range(17..=30) + 1) as f64;
                let x = 0.01 * (2 * rng.random_range(-11..=10) + 1) as f64;
                if x.abs() > 0.35 * z {
                    continue;
                }
                let y = table_y - CLASSES[class_id].half_extents[1];
                let cand = ObjectRecord::of_class(class_id, [x, y, z]);
                let clear = objects.iter().all(|o| {
                    let (a, b) = (o.footprint(), cand.footprint());
                    (o.centroid[0] - x).abs() >= a[0] + b[0] + CLEARANCE
                        || (o.centroid[2] - z).abs() >= a[1] + b[1] + CLEARANCE
                });
                if clear {
                    objects.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return None;
            }
        }
        let target = rng.random_range(0..objects.len());
        let mut start_offset = [0.0; 6];
        for v in &mut start_offset[..3] {
            *v = if rng.random::<bool>() { 0.01 } else { -0.01 };
        }
        for v in &mut start_offset[3..] {
            let m = rng.random_range(0.05..0.15);
            *v = if rng.random::<bool>() { m } else { -m };
        }
        Some(Self {
            seed,
            table_height: -table_y,
            camera: Intrinsics::default(),
            target,
            start_offset,
            objects,
        })
    }
}

fn target_visible(spec: &SceneSpec) -> bool {
    let owners = patch_owners(spec, &pixel_owners(spec).1);
    owners.iter().filter(|o| **o == Some(spec.target)).count() >= MIN_TARGET_PATCHES
}

/// Ray-cast depth and the index of the object hit at each pixel.
pub fn pixel_owners(spec: &SceneSpec) -> (DepthMap, Vec<Option<usize>>) {
    let k = &spec.camera;
    let mut depth = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    let mut owner = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for v in 0..IMAGE_SIZE {
        for u in 0..IMAGE_SIZE {
            let r = k.unproject_dir(u as f64, v as f64);
            let mut best: Option<(f64, usize)> = None;
            for (i, o) in spec.objects.iter().enumerate() {
                if let Some(t) = raycast::intersect(r, o) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            match best {
                Some((t, i)) if t < FAR_PLANE => {
                    depth.push(t);
                    owner.push(Some(i));
                }
                _ => {
                    depth.push(FAR_PLANE);
                    owner.push(None);
                }
            }
        }
    }
    (DepthMap { width: IMAGE_SIZE, height: IMAGE_SIZE, data: depth }, owner)
}

/// Majority owner of each patch; ties go to the nearer object, and the
/// background loses every tie.
pub fn patch_owners(spec: &SceneSpec, pixel_owner: &[Option<usize>]) -> Vec<Option<usize>> {
    let n = spec.objects.len();
    (0..NUM_PATCHES)
        .map(|k| {
            let (row, col) = (k / PATCH_GRID, k % PATCH_GRID);
            let mut counts = vec![0usize; n + 1];
            for v in row * PATCH_PX..(row + 1) * PATCH_PX {
                for u in col * PATCH_PX..(col + 1) * PATCH_PX {
                    match pixel_owner[v * IMAGE_SIZE + u] {
                        Some(i) => counts[i] += 1,
                        None => counts[n] += 1,
                    }
                }
            }
            let mut best: Option<usize> = None;
            let mut best_count = counts[n];
            for i in 0..n {
                let better = counts[i] > best_count
                    || (counts[i] == best_count
                        && counts[i] > 0
                        && best.is_none_or(|b| spec.objects[i].centroid[2] < spec.objects[b].centroid[2]));
                if better {
                    best = Some(i);
                    best_count = counts[i];
                }
            }
            best
        })
        .collect()
}

/// Fixed pseudo-random embedding keyed by an identifier.
pub fn hash_embedding(id: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xE3B);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub depth: DepthMap,
    /// `NUM_PATCHES × d_f`.
    pub features: Tensor,
    pub intrinsics: Intrinsics,
    pub spec: SceneSpec,
    pub chain_values: ChainValues,
    pub chain_gt: ThoughtChain,
    pub action_gt: ActionChunk,
    /// Start pose (translation, rotation vector) and gripper state.
    pub proprio: [f64; 7],
    pub patch_owner: Vec<Option<usize>>,
}

impl SceneSample {
    pub fn target_class(&self) -> usize {
        self.spec.target_object().class_id
    }
}

/// Render depth, synthesize features, and annotate a validated spec.
pub fn generate(spec: &SceneSpec, d_f: usize) -> Result<SceneSample> {
    spec.validate()?;
    if d_f < 2 {
        return Err(Error::Config(format!("feature width {d_f} too small")));
    }
    let (depth, pix) = pixel_owners(spec);
    let owners = patch_owners(spec, &pix);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xFEA7_0000_0000_0000);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid normal");
    let background = hash_embedding(BACKGROUND_ID, d_f);
    let class_emb: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|c| hash_embedding(c as u64, d_f)).collect();
    let ramp = |i: usize| 2.0 * i as f64 / (PATCH_GRID - 1) as f64 - 1.0;
    let mut features = Tensor::zeros(&[NUM_PATCHES, d_f]);
    for (k, owner) in owners.iter().enumerate() {
        let base = match owner {
            Some(i) => &class_emb[spec.objects[*i].class_id],
            None => &background,
        };
        let row = features.row_mut(k);
        for (j, x) in row.iter_mut().enumerate() {
            *x = base[j] + noise.sample(&mut rng);
        }
        row[0] += ramp(k % PATCH_GRID);
        row[1] += ramp(k / PATCH_GRID);
    }
    let chain_values = annotate_chain(spec, spec.target)?;
    let start = annotate::start_pose(spec);
    let mut proprio = [0.0; 7];
    proprio[..6].copy_from_slice(&start.0);
    Ok(SceneSample {
        depth,
        features,
        intrinsics: spec.camera,
        chain_gt: ThoughtChain::encode(&chain_values),
        chain_values,
        action_gt: script_demo(spec, spec.target)?,
        proprio,
        spec: spec.clone(),
        patch_owner: owners,
    })
}
