//! Composite objective, staged training with per-stage freezing,
//! evaluation and ablation grids.

mod ablate;
mod eval;
mod optim;
mod policy;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Ctx;
use crate::Var;

pub use ablate::{ablation_matrix, parse_grid, table, AblationCell, AblationGrid, AblationRow, TABLE_HEADER};
pub use eval::{eval_chain, eval_depth, eval_rollout, evaluate, rollout_error, ChainSummary, EvalOptions, EvalReport};
pub use optim::{clip_grad_norm, grad_norm, Adam, BETA1, BETA2, EPSILON};
pub use policy::{ActiveLosses, Dataset, Encoded, Group, ModelConfig, Policy, Prepared, SampleDraw, SampleLosses};
pub use run::{policy_from_checkpoint, run_stage, sample_draw, train, MetricLine, RunState, StageReport, TrainOptions, TrainOutcome, LOG_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(Stage::S1),
            "s2" => Ok(Stage::S2),
            "s3" => Ok(Stage::S3),
            _ => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Flow,
    Cot,
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cot: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cot: 0.5, depth: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cot >= 0.0 && self.depth >= 0.0 && self.cot.is_finite() && self.depth.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, flow: f64, cot: f64, depth: f64) -> f64 {
        flow + self.cot * cot + self.depth * depth
    }
}

/// Loss values of one step or sample; inactive terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub flow: f64,
    pub cot: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trainable: Vec<Group>,
    pub losses: Vec<LossKind>,
}

impl StagePlan {
    /// Desk-scale defaults.
    pub fn standard(stage: Stage) -> Self {
        match stage {
            Stage::S1 => Self {
                stage,
                steps: 4000,
                learning_rate: 3e-4,
                batch_size: 16,
                trainable: vec![Group::Gst, Group::Expert],
                losses: vec![LossKind::Flow, LossKind::Depth],
            },
            Stage::S2 => Self {
                stage,
                steps: 2000,
                learning_rate: 1e-4,
                batch_size: 8,
                trainable: Group::ALL.to_vec(),
                losses: vec![LossKind::Flow, LossKind::Cot, LossKind::Depth],
            },
            Stage::S3 => Self {
                stage,
                steps: 1000,
                learning_rate: 3e-5,
                batch_size: 4,
                trainable: Group::ALL.to_vec(),
                losses: vec![LossKind::Flow, LossKind::Cot, LossKind::Depth],
            },
        }
    }

    pub fn active(&self) -> ActiveLosses {
        ActiveLosses {
            flow: self.losses.contains(&LossKind::Flow),
            cot: self.losses.contains(&LossKind::Cot),
            depth: self.losses.contains(&LossKind::Depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage.label())));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.losses.is_empty() {
            return bad("no active losses".into());
        }
        match self.stage {
            Stage::S1 => {
                if self.trainable.contains(&Group::Reasoner) {
                    return bad("the reasoner must stay frozen".into());
                }
                if self.losses.contains(&LossKind::Cot) {
                    return bad("no chain supervision before the reasoner is trained".into());
                }
            }
            Stage::S2 => {
                if self.active() != (ActiveLosses { flow: true, cot: true, depth: true }) {
                    return bad("all losses must be active".into());
                }
            }
            Stage::S3 => {
                if Group::ALL.iter().any(|g| !self.trainable.contains(g)) {
                    return bad("all parameter groups must be trainable".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Rays per sample for the depth term.
    pub rays_per_sample: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 256,
            val_scenes: 32,
            rays_per_sample: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Run the later stages from initialization.
    pub skip_s1: bool,
    pub freeze_gst_in_s2: bool,
    pub clip_norm: f64,
    pub divergence_threshold: f64,
    /// Write a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub stages: Vec<StagePlan>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: crate::rng::DEFAULT_SEED,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            skip_s1: false,
            freeze_gst_in_s2: false,
            clip_norm: 1.0,
            divergence_threshold: 1e4,
            checkpoint_every: 0,
            stages: [Stage::S1, Stage::S2, Stage::S3].map(StagePlan::standard).to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.data.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("clip_norm and divergence_threshold must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("no stages".into()));
        }
        for (i, p) in self.stages.iter().enumerate() {
            p.validate()?;
            if i > 0 && p.stage <= self.stages[i - 1].stage {
                return Err(Error::Config("stages must be listed in order without repeats".into()));
            }
        }
        let lr = |s| self.stages.iter().find(|p| p.stage == s).map(|p| p.learning_rate);
        if let (Some(a), Some(b)) = (lr(Stage::S2), lr(Stage::S3)) {
            if b >= a {
                return Err(Error::Config("S3 learning rate must be below S2's".into()));
            }
        }
        if let (Some(a), Some(b)) = (lr(Stage::S1), lr(Stage::S3)) {
            if b >= a {
                return Err(Error::Config("S3 learning rate must be below S1's".into()));
            }
        }
        Ok(())
    }

    /// Stages actually run, after the skip and freeze flags.
    pub fn resolved_stages(&self) -> Vec<StagePlan> {
        self.stages
            .iter()
            .filter(|p| !(self.skip_s1 && p.stage == Stage::S1))
            .cloned()
            .map(|mut p| {
                if self.freeze_gst_in_s2 && p.stage == Stage::S2 {
                    p.trainable.retain(|g| *g != Group::Gst);
                }
                p
            })
            .collect()
    }

    /// Scale step counts by `num / den` (at least one step each).
    pub fn scaled_steps(mut self, num: usize, den: usize) -> Self {
        for p in &mut self.stages {
            p.steps = (p.steps * num / den).max(1);
        }
        self
    }
}

/// `L_flow + λ_cot L_cot + λ_depth L_depth` over the active terms of one
/// sample, with the value breakdown. A non-finite term aborts with its name.
pub fn composite_loss<'t>(
    ctx: &Ctx<'t, '_>,
    losses: &SampleLosses<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let mut total = ctx.constant(crate::Tensor::scalar(0.0));
    let mut b = LossBreakdown::default();
    let terms = [
        ("flow", losses.flow, 1.0, &mut b.flow),
        ("cot", losses.cot, weights.cot, &mut b.cot),
        ("depth", losses.depth, weights.depth, &mut b.depth),
    ];
    for (name, v, w, slot) in terms {
        let Some(v) = v else { continue };
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
        *slot = x;
        total = total.add(v.scale(w))?;
    }
    b.total = total.item();
    Ok((total, b))
}

#[cfg(test)]
mod tests;
