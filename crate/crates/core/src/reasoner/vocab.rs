//! Quantized token alphabet for spatial thoughts and the layout of a
//! thought chain inside the decoder sequence.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COORD_BINS: usize = 64;
pub const COORD_MIN: f64 = -0.64;
pub const COORD_STEP: f64 = 0.02;
pub const ANGLE_BINS: usize = 32;
pub const ANGLE_STEP: f64 = 2.0 * PI / ANGLE_BINS as f64;
pub const NORMAL_STEP: f64 = 2.0 / ANGLE_BINS as f64;
pub const NUM_CLASSES: usize = 8;
pub const NUM_ACT: usize = 8;

pub const ANGLE_BASE: usize = COORD_BINS;
pub const BOS: usize = ANGLE_BASE + ANGLE_BINS;
pub const EOS: usize = BOS + 1;
pub const SEP_BASE: usize = EOS + 1;
pub const ACT_BASE: usize = SEP_BASE + 4;
pub const CLASS_BASE: usize = ACT_BASE + NUM_ACT;
pub const PICK: usize = CLASS_BASE + NUM_CLASSES;
pub const VOCAB_SIZE: usize = PICK + 1;

/// Content token counts of c1..c4.
pub const THOUGHT_LEN: [usize; 4] = [3, 6, 2, 18];
pub const CONTENT_LEN: usize = 29;

/// Guards floor() against representation error at exact bin edges.
const EDGE_EPS: f64 = 1e-9;

fn bin(x: f64, lo: f64, step: f64, n: usize) -> usize {
    let b = ((x - lo) / step + EDGE_EPS).floor();
    b.clamp(0.0, (n - 1) as f64) as usize
}

/// Kind of value carried by a content position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Metres on the 2 cm grid.
    Coord,
    /// Radians on the 32-bin circle.
    Angle,
    /// Unit-vector component on 32 bins over [-1, 1]; shares angle ids.
    Normal,
}

impl Slot {
    pub fn encode(self, x: f64) -> usize {
        match self {
            Slot::Coord => bin(x, COORD_MIN, COORD_STEP, COORD_BINS),
            Slot::Angle => ANGLE_BASE + bin(x, -PI, ANGLE_STEP, ANGLE_BINS),
            Slot::Normal => ANGLE_BASE + bin(x, -1.0, NORMAL_STEP, ANGLE_BINS),
        }
    }

    /// Bin centre of `token`; `None` when the token does not belong to this slot.
    pub fn decode(self, token: usize) -> Option<f64> {
        match self {
            Slot::Coord if token < COORD_BINS => Some(COORD_MIN + (token as f64 + 0.5) * COORD_STEP),
            Slot::Angle if (ANGLE_BASE..BOS).contains(&token) => {
                Some(-PI + ((token - ANGLE_BASE) as f64 + 0.5) * ANGLE_STEP)
            }
            Slot::Normal if (ANGLE_BASE..BOS).contains(&token) => {
                Some(-1.0 + ((token - ANGLE_BASE) as f64 + 0.5) * NORMAL_STEP)
            }
            _ => None,
        }
    }

    /// Token id range this slot may emit.
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Slot::Coord => 0..COORD_BINS,
            Slot::Angle | Slot::Normal => ANGLE_BASE..BOS,
        }
    }

    pub fn half_bin(self) -> f64 {
        match self {
            Slot::Coord => COORD_STEP / 2.0,
            Slot::Angle => ANGLE_STEP / 2.0,
            Slot::Normal => NORMAL_STEP / 2.0,
        }
    }
}

/// Slot kinds of the 29 content positions in c1..c4 order.
pub fn content_slots() -> [Slot; CONTENT_LEN] {
    use Slot::*;
    let mut s = [Coord; CONTENT_LEN];
    // c2 normal
    s[6..9].copy_from_slice(&[Normal; 3]);
    // c4 rotation deltas
    for w in 0..3 {
        let base = 11 + 6 * w + 3;
        s[base..base + 3].copy_from_slice(&[Angle; 3]);
    }
    s
}

/// Start offset of each thought within the 29 content positions.
pub fn thought_offset(j: usize) -> usize {
    THOUGHT_LEN[..j].iter().sum()
}

/// Continuous values of the four thoughts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainValues {
    /// Target centroid.
    pub centroid: [f64; 3],
    /// Grasp point minus centroid.
    pub contact_offset: [f64; 3],
    pub approach_normal: [f64; 3],
    /// Signed height above the table, nearest-neighbour lateral distance.
    pub relations: [f64; 2],
    /// Pre-grasp, grasp, retract as 6-DoF deltas from the previous pose.
    pub waypoints: [[f64; 6]; 3],
}

impl ChainValues {
    pub fn flatten(&self) -> [f64; CONTENT_LEN] {
        let mut out = [0.0; CONTENT_LEN];
        out[0..3].copy_from_slice(&self.centroid);
        out[3..6].copy_from_slice(&self.contact_offset);
        out[6..9].copy_from_slice(&self.approach_normal);
        out[9..11].copy_from_slice(&self.relations);
        for w in 0..3 {
            out[11 + 6 * w..17 + 6 * w].copy_from_slice(&self.waypoints[w]);
        }
        out
    }

    pub fn unflatten(v: &[f64; CONTENT_LEN]) -> Self {
        let mut w = [[0.0; 6]; 3];
        for (i, wp) in w.iter_mut().enumerate() {
            wp.copy_from_slice(&v[11 + 6 * i..17 + 6 * i]);
        }
        Self {
            centroid: [v[0], v[1], v[2]],
            contact_offset: [v[3], v[4], v[5]],
            approach_normal: [v[6], v[7], v[8]],
            relations: [v[9], v[10]],
            waypoints: w,
        }
    }
}

/// Which thoughts take part in supervision and generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtFlags(pub [bool; 4]);

impl Default for ThoughtFlags {
    fn default() -> Self {
        Self([true; 4])
    }
}

impl ThoughtFlags {
    pub const NONE: ThoughtFlags = ThoughtFlags([false; 4]);

    pub fn enabled(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn supervised_count(&self) -> usize {
        (0..4).filter(|&j| self.0[j]).map(|j| THOUGHT_LEN[j]).sum()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|b| *b)
    }
}

/// Tokenized chain: the 29 content tokens (all thoughts, regardless of flags).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThoughtChain {
    pub tokens: [usize; CONTENT_LEN],
}

impl ThoughtChain {
    pub fn encode(values: &ChainValues) -> Self {
        let slots = content_slots();
        let flat = values.flatten();
        let mut tokens = [0; CONTENT_LEN];
        for i in 0..CONTENT_LEN {
            tokens[i] = slots[i].encode(flat[i]);
        }
        Self { tokens }
    }

    /// Bin-centre values; the approach normal is re-normalized.
    pub fn decode(&self) -> Result<ChainValues> {
        let slots = content_slots();
        let mut flat = [0.0; CONTENT_LEN];
        for i in 0..CONTENT_LEN {
            flat[i] = slots[i].decode(self.tokens[i]).ok_or_else(|| {
                Error::Invalid(format!("token {} invalid for content position {i}", self.tokens[i]))
            })?;
        }
        let mut v = ChainValues::unflatten(&flat);
        let n = v.approach_normal;
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm > 0.0 {
            v.approach_normal = [n[0] / norm, n[1] / norm, n[2] / norm];
        }
        Ok(v)
    }

    pub fn thought(&self, j: usize) -> &[usize] {
        let o = thought_offset(j);
        &self.tokens[o..o + THOUGHT_LEN[j]]
    }
}

/// One position of the decoder sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    /// Token fixed by the layout (BOS, separators, EOS, ACT).
    Fixed(usize),
    /// Content position `index` (0..29) with its slot kind.
    Content { index: usize, slot: Slot },
}

/// Sequence layout: BOS, then for each enabled thought its separator and
/// content, then EOS and the action-conditioning placeholders.
pub fn layout(flags: ThoughtFlags, num_act: usize) -> Vec<Position> {
    let slots = content_slots();
    let mut seq = vec![Position::Fixed(BOS)];
    for j in 0..4 {
        if !flags.enabled(j) {
            continue;
        }
        seq.push(Position::Fixed(SEP_BASE + j));
        let o = thought_offset(j);
        for index in o..o + THOUGHT_LEN[j] {
            seq.push(Position::Content { index, slot: slots[index] });
        }
    }
    seq.push(Position::Fixed(EOS));
    for a in 0..num_act {
        seq.push(Position::Fixed(ACT_BASE + a));
    }
    seq
}

/// Token ids of a layout filled from a chain.
pub fn fill(layout: &[Position], chain: &ThoughtChain) -> Vec<usize> {
    layout
        .iter()
        .map(|p| match *p {
            Position::Fixed(t) => t,
            Position::Content { index, .. } => chain.tokens[index],
        })
        .collect()
}

pub fn class_token(class_id: usize) -> usize {
    CLASS_BASE + class_id
}

pub fn token_name(t: usize) -> String {
    match t {
        t if t < COORD_BINS => format!("x{t}"),
        t if t < BOS => format!("a{}", t - ANGLE_BASE),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        t if t < ACT_BASE => format!("<c{}>", t - SEP_BASE + 1),
        t if t < CLASS_BASE => format!("<act{}>", t - ACT_BASE),
        t if t < PICK => format!("<cls{}>", t - CLASS_BASE),
        PICK => "<pick>".into(),
        t => format!("<unk{t}>"),
    }
}

fn fmt3(v: &[f64]) -> String {
    format!("({:.2}, {:.2}, {:.2})", v[0], v[1], v[2])
}

impl fmt::Display for ChainValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target centroid: {} m", fmt3(&self.centroid))?;
        writeln!(f, "contact offset: {} m", fmt3(&self.contact_offset))?;
        writeln!(f, "approach normal: {}", fmt3(&self.approach_normal))?;
        writeln!(
            f,
            "height above table: {:.2} m, nearest neighbour: {:.2} m",
            self.relations[0], self.relations[1]
        )?;
        for (name, w) in ["pre-grasp", "grasp", "retract"].iter().zip(&self.waypoints) {
            writeln!(
                f,
                "{name} delta: translation {} m, rotation {} rad",
                fmt3(&w[..3]),
                fmt3(&w[3..])
            )?;
        }
        Ok(())
    }
}
