use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHUNK_LEN: usize = 10;
pub const ACTION_DIM: usize = 7;
pub const FLAT_DIM: usize = CHUNK_LEN * ACTION_DIM;
pub const GRIPPER: usize = 6;

/// `CHUNK_LEN` future steps of (Δx, Δy, Δz, Δrx, Δry, Δrz, gripper).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub steps: Vec<[f64; ACTION_DIM]>,
}

impl ActionChunk {
    pub fn zeros() -> Self {
        Self {
            steps: vec![[0.0; ACTION_DIM]; CHUNK_LEN],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != FLAT_DIM {
            return Err(Error::InvalidShape {
                op: "action_chunk",
                shape: vec![flat.len()],
                reason: format!("expected {FLAT_DIM} values"),
            });
        }
        Ok(Self {
            steps: flat
                .chunks_exact(ACTION_DIM)
                .map(|c| c.try_into().unwrap())
                .collect(),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.steps.iter().flatten().copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![CHUNK_LEN, ACTION_DIM], self.flat()).expect("chunk shape")
    }

    /// Cumulative end-effector positions after each step, starting at `start`.
    pub fn positions(&self, start: [f64; 3]) -> Vec<[f64; 3]> {
        let mut p = start;
        self.steps
            .iter()
            .map(|s| {
                for i in 0..3 {
                    p[i] += s[i];
                }
                p
            })
            .collect()
    }

    pub fn clamp_gripper(&mut self) {
        for s in &mut self.steps {
            s[GRIPPER] = s[GRIPPER].clamp(0.0, 1.0);
        }
    }
}

/// One chunk prediction in the ensemble history, issued `age` control
/// steps ago.
#[derive(Clone, Debug)]
pub struct AgedChunk {
    pub chunk: ActionChunk,
    pub age: usize,
}

/// Age-weighted mean of every chunk's prediction for the current step.
///
/// A chunk issued `age` steps ago predicts the current step at index `age`.
/// Weights are `exp(-age * dt * rate)`, normalized; chunks too old to cover
/// the current step are ignored.
pub fn temporal_ensemble(history: &[AgedChunk], dt: f64, rate: f64) -> Result<[f64; ACTION_DIM]> {
    let covering: Vec<&AgedChunk> = history.iter().filter(|c| c.age < c.chunk.steps.len()).collect();
    if covering.is_empty() {
        return Err(Error::Invalid("temporal ensemble needs a chunk covering the current step".into()));
    }
    let weights: Vec<f64> = covering.iter().map(|c| (-(c.age as f64) * dt * rate).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = [0.0; ACTION_DIM];
    for (c, w) in covering.iter().zip(&weights) {
        let w = w / total;
        for (o, x) in out.iter_mut().zip(c.chunk.steps[c.age].iter()) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(v: f64) -> ActionChunk {
        ActionChunk {
            steps: vec![[v; ACTION_DIM]; CHUNK_LEN],
        }
    }

    #[test]
    fn single_chunk_passes_through() {
        let mut c = chunk(0.0);
        c.steps[3] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5];
        let out = temporal_ensemble(&[AgedChunk { chunk: c.clone(), age: 3 }], 0.01, 6.2).unwrap();
        assert_eq!(out, c.steps[3]);
    }

    #[test]
    fn identical_predictions_are_unchanged() {
        let h = vec![AgedChunk { chunk: chunk(0.3), age: 0 }, AgedChunk { chunk: chunk(0.3), age: 4 }];
        let out = temporal_ensemble(&h, 0.01, 6.2).unwrap();
        for v in out {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn differing_chunks_match_hand_weighted_mean() {
        let h = vec![AgedChunk { chunk: chunk(1.0), age: 0 }, AgedChunk { chunk: chunk(3.0), age: 2 }];
        let out = temporal_ensemble(&h, 0.01, 10.0).unwrap();
        let w0 = 1.0;
        let w1 = (-0.2f64).exp();
        let expect = (w0 * 1.0 + w1 * 3.0) / (w0 + w1);
        assert!((out[0] - expect).abs() < 1e-15);
        assert!(out[0] > 1.0 && out[0] < 3.0);
    }

    #[test]
    fn empty_history_is_rejected() {
        assert!(temporal_ensemble(&[], 0.01, 6.2).is_err());
        let stale = [AgedChunk { chunk: chunk(0.0), age: CHUNK_LEN }];
        assert!(temporal_ensemble(&stale, 0.01, 6.2).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let f: Vec<f64> = (0..FLAT_DIM).map(|i| i as f64).collect();
        assert_eq!(ActionChunk::from_flat(&f).unwrap().flat(), f);
        assert!(ActionChunk::from_flat(&f[1..]).is_err());
    }
}
