//! Held-out evaluation: depth loss, decoded-chain metrics and open-loop
//! rollout error.

use serde::{Deserialize, Serialize};

use super::policy::{Policy, Prepared};
use crate::action_expert::ActionChunk;
use crate::error::{Error, Result};
use crate::params::Ctx;
use crate::reasoner::chain_metrics;
use crate::rng::derive;
use crate::splat_render::{abs_rel, rays_from_depth, render_depth, silog, RayBundle, RenderOptions, DEPTH_FLOOR};
use crate::Tape;

/// Rays rendered per tape when evaluating whole images.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Rays per scene for the depth metrics; `None` renders every pixel.
    pub depth_rays: Option<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            depth_rays: None,
            seed: crate::rng::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub token_acc: f64,
    pub centroid_err_median_m: f64,
    pub contact_err_mean_m: f64,
    pub waypoint_err_mean_m: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub depth_loss: f64,
    pub depth_abs_rel: f64,
    pub chain: ChainSummary,
    /// Mean per-step end-effector distance to the scripted demonstration.
    pub rollout_err_m: f64,
}

impl EvalReport {
    /// Ablation score, lower is better: the rollout error in centimetres.
    pub fn composite(&self) -> f64 {
        100.0 * self.rollout_err_m
    }
}

fn render_values(policy: &Policy, p: &Prepared, rays: &RayBundle) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &policy.store);
    let (field, _) = policy.gst.tokenize_parts(&ctx, &p.sample.features, &p.anchors, &p.mip)?;
    let mut out = Vec::with_capacity(rays.len());
    for start in (0..rays.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(rays.len());
        let part = RayBundle {
            directions: rays.directions[start..end].to_vec(),
            target_depths: rays.target_depths[start..end].to_vec(),
            pixel_ids: rays.pixel_ids[start..end].to_vec(),
        };
        let r = render_depth(field.centroids, field.log_scales, field.opacity, &part, RenderOptions::default())?;
        out.extend_from_slice(r.rendered.value().data());
    }
    Ok(out)
}

/// Mean per-scene depth loss and absolute relative error.
pub fn eval_depth(policy: &Policy, scenes: &[Prepared], opts: EvalOptions) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no evaluation scenes".into()));
    }
    let (mut loss, mut rel) = (0.0, 0.0);
    for (i, p) in scenes.iter().enumerate() {
        let total = p.sample.depth.width * p.sample.depth.height;
        let count = opts.depth_rays.unwrap_or(total).min(total);
        let rays = rays_from_depth(&p.sample.depth, &p.sample.intrinsics, count, derive(opts.seed, &[0xE7A1, i as u64]))?;
        let r = render_values(policy, p, &rays)?;
        let residuals: Vec<f64> = r
            .iter()
            .zip(&rays.target_depths)
            .map(|(x, t)| x.max(DEPTH_FLOOR).ln() - t.ln())
            .collect();
        loss += silog(&residuals);
        rel += abs_rel(&r, &rays.target_depths);
    }
    let n = scenes.len() as f64;
    Ok((loss / n, rel / n))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Greedy decoding on every scene and the sampled chunk from that
/// conditioning.
fn decode_all(policy: &Policy, scenes: &[Prepared], seed: u64) -> Result<Vec<(ChainSummary, ActionChunk)>> {
    let flags = policy.cfg.reasoner.flags;
    scenes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, &policy.store);
            let (decoded, chunk) = policy.act(&ctx, p, derive(seed, &[0xAC7, i as u64]))?;
            let m = chain_metrics(&decoded.tokens, &p.sample.chain_values, flags)?;
            Ok((
                ChainSummary {
                    token_acc: m.token_acc,
                    centroid_err_median_m: m.centroid_err_m,
                    contact_err_mean_m: m.contact_err_m,
                    waypoint_err_mean_m: m.waypoint_err_m,
                },
                chunk,
            ))
        })
        .collect()
}

/// Token accuracy and de-quantized thought errors over the scenes; the
/// centroid error is the median, the others are means.
pub fn eval_chain(policy: &Policy, scenes: &[Prepared], seed: u64) -> Result<ChainSummary> {
    let all = decode_all(policy, scenes, seed)?;
    Ok(summarize(&all.iter().map(|(c, _)| *c).collect::<Vec<_>>()))
}

fn summarize(per: &[ChainSummary]) -> ChainSummary {
    ChainSummary {
        token_acc: mean(&per.iter().map(|c| c.token_acc).collect::<Vec<_>>()),
        centroid_err_median_m: median(per.iter().map(|c| c.centroid_err_median_m).collect()),
        contact_err_mean_m: mean(&per.iter().map(|c| c.contact_err_mean_m).collect::<Vec<_>>()),
        waypoint_err_mean_m: mean(&per.iter().map(|c| c.waypoint_err_mean_m).collect::<Vec<_>>()),
    }
}

/// Mean per-step distance between the executed chunk and the scripted
/// demonstration, both integrated from the start pose.
pub fn rollout_error(chunk: &ActionChunk, demo: &ActionChunk, start: [f64; 3]) -> f64 {
    let a = chunk.positions(start);
    let b = demo.positions(start);
    let d: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (0..3).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt())
        .collect();
    mean(&d)
}

pub fn eval_rollout(policy: &Policy, scenes: &[Prepared], seed: u64) -> Result<f64> {
    let all = decode_all(policy, scenes, seed)?;
    Ok(mean(&rollout_errors(scenes, &all)))
}

fn rollout_errors(scenes: &[Prepared], all: &[(ChainSummary, ActionChunk)]) -> Vec<f64> {
    scenes
        .iter()
        .zip(all)
        .map(|(p, (_, chunk))| {
            let s = p.sample.proprio;
            rollout_error(chunk, &p.sample.action_gt, [s[0], s[1], s[2]])
        })
        .collect()
}

pub fn evaluate(policy: &Policy, scenes: &[Prepared], opts: EvalOptions) -> Result<EvalReport> {
    let (depth_loss, depth_abs_rel) = eval_depth(policy, scenes, opts)?;
    let all = decode_all(policy, scenes, opts.seed)?;
    let chain = summarize(&all.iter().map(|(c, _)| *c).collect::<Vec<_>>());
    Ok(EvalReport {
        depth_loss,
        depth_abs_rel,
        chain,
        rollout_err_m: mean(&rollout_errors(scenes, &all)),
    })
}
