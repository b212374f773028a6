//! Stage execution: seeded batches, clipped adaptive-moment updates,
//! metric logging, checkpoints and resume.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, Adam};
use super::policy::{Dataset, Group, Policy, Prepared, SampleDraw};
use super::{composite_loss, ActiveLosses, LossBreakdown, Stage, StagePlan, TrainConfig};
use crate::action_expert::FlowDraw;
use crate::error::{Error, Result};
use crate::params::{Checkpoint, Ctx};
use crate::rng::{derive, rng_for};
use crate::splat_render::ray_bundle_from;
use crate::{Tape, Tensor};

pub const LOG_HEADER: &str = "# step total flow cot depth grad_norm stage";

/// One metric-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricLine {
    pub step: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl fmt::Display for MetricLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "{} {:e} {:e} {:e} {:e} {:e} {}",
            self.step,
            l.total,
            l.flow,
            l.cot,
            l.depth,
            self.grad_norm,
            self.stage.label()
        )
    }
}

/// Position in a training run, enough to resume it.
#[derive(Clone, Debug, Default)]
pub struct RunState {
    /// Index into the resolved stage list.
    pub stage_index: usize,
    /// Next step within that stage.
    pub step: usize,
    pub global_step: usize,
    pub adam: Adam,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Parameters to start from (for example the output of a separate S1 run).
    pub init: Option<Checkpoint>,
    /// A checkpoint written mid-run by this pipeline.
    pub resume: Option<Checkpoint>,
    /// Stop after this many global steps (the state stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub steps_run: usize,
    pub last: LossBreakdown,
    /// `(group, checksum before, checksum after)` for frozen groups.
    pub frozen: Vec<(Group, u64, u64)>,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub log: Vec<MetricLine>,
    pub stages: Vec<StageReport>,
    pub state: RunState,
}

fn stage_tag(s: Stage) -> u64 {
    s as u64 + 1
}

/// Noise draw and ray subset for one sample of one step.
pub fn sample_draw(rng: &mut ChaCha8Rng, p: &Prepared, active: ActiveLosses, rays: usize) -> Result<SampleDraw> {
    let flow = FlowDraw::sample(rng);
    let ray_seed: u64 = rng.random();
    let rays = if active.depth {
        Some(ray_bundle_from(&p.sample, rays, ray_seed)?)
    } else {
        None
    };
    Ok(SampleDraw { flow, rays })
}

fn checkpoint(policy: &Policy, cfg: &TrainConfig, state: &RunState) -> Checkpoint {
    let mut ck = policy.to_checkpoint();
    state.adam.save_into(&policy.store, &mut ck);
    ck.meta.insert("stage_index".into(), state.stage_index.to_string());
    ck.meta.insert("step".into(), state.step.to_string());
    ck.meta.insert("global_step".into(), state.global_step.to_string());
    ck.meta.insert("config".into(), cfg.to_toml());
    ck
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or invalid {key}")))
}

struct Sink {
    file: Option<File>,
    lines: Vec<MetricLine>,
}

impl Sink {
    fn push(&mut self, line: MetricLine, path: &Option<PathBuf>) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_deref().unwrap_or(Path::new("")), e))?;
        }
        self.lines.push(line);
        Ok(())
    }
}

/// Run one stage from `state.step` to its end (or until `stop_after`
/// global steps). Divergence halts with `last_good.ckpt` written.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    policy: &mut Policy,
    plan: &StagePlan,
    cfg: &TrainConfig,
    data: &Dataset,
    state: &mut RunState,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
    on_line: &mut dyn FnMut(MetricLine) -> Result<()>,
) -> Result<StageReport> {
    plan.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mask = policy.mask(&plan.trainable);
    let frozen: Vec<Group> = Group::ALL.into_iter().filter(|g| !plan.trainable.contains(g)).collect();
    let before: Vec<u64> = frozen.iter().map(|g| policy.checksum(*g)).collect();
    let active = plan.active();
    let mut last = LossBreakdown::default();
    let mut steps_run = 0;
    while state.step < plan.steps {
        if stop_after.is_some_and(|s| state.global_step >= s) {
            break;
        }
        let mut rng = rng_for(cfg.seed, &[0x57E9, stage_tag(plan.stage), state.step as u64]);
        let batch: Vec<&Prepared> = (0..plan.batch_size)
            .map(|_| &data.train[rng.random_range(0..data.train.len())])
            .collect();
        let draws = batch
            .iter()
            .map(|p| sample_draw(&mut rng, p, active, cfg.data.rays_per_sample))
            .collect::<Result<Vec<_>>>()?;
        let step_result = (|| -> Result<(LossBreakdown, Vec<_>)> {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &policy.store, Some(&mask));
            let mut sum = ctx.constant(Tensor::scalar(0.0));
            let mut mean = LossBreakdown::default();
            let inv = 1.0 / batch.len() as f64;
            for (p, d) in batch.iter().zip(&draws) {
                let losses = policy.losses(&ctx, p, d, active)?;
                let (l, b) = composite_loss(&ctx, &losses, &cfg.weights)?;
                sum = sum.add(l)?;
                mean.flow += b.flow * inv;
                mean.cot += b.cot * inv;
                mean.depth += b.depth * inv;
            }
            let total = sum.scale(inv);
            mean.total = total.item();
            if !mean.total.is_finite() || mean.total > cfg.divergence_threshold {
                return Err(Error::Diverged {
                    step: state.global_step,
                    reason: format!("loss {}", mean.total),
                });
            }
            tape.backward(total)?;
            Ok((mean, ctx.grads()))
        })();
        let (loss, mut grads) = match step_result {
            Ok(x) => x,
            Err(e) => {
                let e = match e {
                    Error::NonFinite(what) => Error::Diverged {
                        step: state.global_step,
                        reason: format!("non-finite {what}"),
                    },
                    e => e,
                };
                if matches!(e, Error::Diverged { .. }) {
                    if let Some(dir) = out_dir {
                        checkpoint(policy, cfg, state).save(&dir.join("last_good.ckpt"))?;
                    }
                }
                return Err(e);
            }
        };
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            if let Some(dir) = out_dir {
                checkpoint(policy, cfg, state).save(&dir.join("last_good.ckpt"))?;
            }
            return Err(Error::Diverged {
                step: state.global_step,
                reason: "non-finite gradient".into(),
            });
        }
        state.adam.update(&mut policy.store, &grads, plan.learning_rate);
        on_line(MetricLine {
            step: state.global_step,
            stage: plan.stage,
            loss,
            grad_norm: norm,
        })?;
        last = loss;
        steps_run += 1;
        state.step += 1;
        state.global_step += 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.global_step % cfg.checkpoint_every == 0 {
                checkpoint(policy, cfg, state).save(&dir.join(format!("step_{:06}.ckpt", state.global_step)))?;
            }
        }
    }
    let after: Vec<u64> = frozen.iter().map(|g| policy.checksum(*g)).collect();
    Ok(StageReport {
        stage: plan.stage,
        steps_run,
        last,
        frozen: frozen.into_iter().zip(before).zip(after).map(|((g, b), a)| (g, b, a)).collect(),
    })
}

/// Snapshot of the resolved configuration, marking skipped stages.
fn config_snapshot(cfg: &TrainConfig) -> String {
    let run: Vec<&str> = cfg.resolved_stages().iter().map(|p| p.stage.label()).collect();
    let mut head = format!("# stages run: {}\n", run.join(" "));
    if cfg.skip_s1 {
        head.push_str("# s1 absent\n");
    }
    head + &cfg.to_toml()
}

/// The full staged pipeline.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stages = cfg.resolved_stages();
    let mut policy = Policy::new(&cfg.model, derive(cfg.seed, &[0x1A17]))?;
    let mut state = RunState::default();
    if let Some(ck) = &opts.resume {
        policy.load_checkpoint(ck)?;
        state = RunState {
            stage_index: meta_usize(ck, "stage_index")?,
            step: meta_usize(ck, "step")?,
            global_step: meta_usize(ck, "global_step")?,
            adam: Adam::load_from(&policy.store, ck)?,
        };
    } else if let Some(ck) = &opts.init {
        policy.load_checkpoint(ck)?;
    } else if stages[0].stage != Stage::S1 && !cfg.skip_s1 {
        return Err(Error::Config(format!(
            "stage {} needs a prior checkpoint unless skip_s1 is set",
            stages[0].stage.label()
        )));
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join("metrics.log"));
    let mut sink = Sink {
        file: None,
        lines: Vec::new(),
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join("config.toml");
        std::fs::write(&snap, config_snapshot(cfg)).map_err(|e| Error::io(&snap, e))?;
        let path = log_path.as_ref().unwrap();
        let mut f = if opts.resume.is_some() {
            OpenOptions::new().append(true).create(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        if opts.resume.is_none() {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        sink.file = Some(f);
    }
    let mut reports = Vec::new();
    while state.stage_index < stages.len() {
        let plan = &stages[state.stage_index];
        if state.step == 0 {
            state.adam = Adam::new();
        }
        let report = run_stage(
            &mut policy,
            plan,
            cfg,
            data,
            &mut state,
            opts.out_dir.as_deref(),
            opts.stop_after,
            &mut |line| sink.push(line, &log_path),
        )?;
        reports.push(report);
        if state.step < plan.steps {
            break;
        }
        state.stage_index += 1;
        state.step = 0;
        if let Some(dir) = &opts.out_dir {
            checkpoint(&policy, cfg, &state).save(&dir.join(format!("{}.ckpt", plan.stage.label())))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint(&policy, cfg, &state).save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        policy,
        log: sink.lines,
        stages: reports,
        state,
    })
}

/// Rebuild the policy and its training config from a pipeline checkpoint.
pub fn policy_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Policy)> {
    let text = ck
        .meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no config".into()))?;
    let cfg = TrainConfig::from_toml(text)?;
    let mut policy = Policy::new(&cfg.model, derive(cfg.seed, &[0x1A17]))?;
    policy.load_checkpoint(ck)?;
    Ok((cfg, policy))
}
