use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::chunk::{ActionChunk, ACTION_DIM, CHUNK_LEN, FLAT_DIM};
use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoid, Activation, Attention, FeedForward, LayerNorm, Linear, MASKED};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Per-channel scale between demonstration units and the flow space:
/// translations by the per-step bound, rotations by theirs, gripper as is.
pub const ACTION_SCALE: [f64; ACTION_DIM] = [0.05, 0.05, 0.05, 0.2, 0.2, 0.2, 1.0];
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub euler_steps: usize,
    /// Replace the mixture with one feedforward of the same hidden width.
    pub dense_ffn: bool,
    /// When false the action-conditioning stream is zeroed.
    pub use_action_tokens: bool,
    pub ensemble_dt: f64,
    pub control_rate_hz: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            width: 64,
            heads: 4,
            experts: 8,
            top_k: 2,
            expert_hidden: 128,
            euler_steps: 10,
            dense_ffn: false,
            use_action_tokens: true,
            ensemble_dt: 0.01,
            control_rate_hz: 6.2,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "expert width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!("top_k {} must be in 1..={}", self.top_k, self.experts)));
        }
        if self.euler_steps == 0 || self.expert_hidden == 0 {
            return Err(Error::Config("euler_steps and expert_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Router decisions of one layer: per token, the selected experts and
/// their renormalized gate weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterLayer {
    pub experts: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterTrace {
    pub layers: Vec<RouterLayer>,
}

impl RouterTrace {
    /// Selection count per expert, summed over layers and tokens.
    pub fn utilization(&self, experts: usize) -> Vec<usize> {
        let mut u = vec![0; experts];
        for l in &self.layers {
            for sel in &l.experts {
                for &e in sel {
                    u[e] += 1;
                }
            }
        }
        u
    }
}

#[derive(Clone, Debug)]
pub struct Moe {
    pub gate: Linear,
    pub experts: Vec<FeedForward>,
    pub top_k: usize,
}

impl Moe {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize, experts: usize, top_k: usize) -> Self {
        Self {
            gate: Linear::new(pb, &format!("{name}.gate"), dim, experts, false),
            experts: (0..experts)
                .map(|e| FeedForward::new(pb, &format!("{name}.expert.{e}"), dim, hidden, Activation::Silu))
                .collect(),
            top_k,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, RouterLayer)> {
        let logits = self.gate.forward(ctx, x)?;
        let lv = logits.value();
        let (n, ne) = lv.rows_cols();
        let mut mask = Tensor::full(&[n, ne], MASKED);
        let mut route = RouterLayer::default();
        for r in 0..n {
            let row = lv.row(r);
            let mut order: Vec<usize> = (0..ne).collect();
            // Stable sort: ties go to the lower expert index.
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            let mut sel = order[..self.top_k].to_vec();
            sel.sort_unstable();
            for &e in &sel {
                mask.row_mut(r)[e] = 0.0;
            }
            route.experts.push(sel);
        }
        let gates = logits.add(ctx.constant(mask))?.softmax_lastdim();
        let gv = gates.value();
        for (r, sel) in route.experts.iter().enumerate() {
            route.weights.push(sel.iter().map(|&e| gv.at2(r, e)).collect());
        }
        let mut out: Option<Var<'t>> = None;
        for (e, ffn) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| route.experts[r].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let y = ffn.forward(ctx, x.gather_rows(&rows)?)?;
            let g = gates.gather_rows(&rows)?.slice_cols(e, e + 1)?;
            let part = y.mul_col(g)?.scatter_rows(&rows, n)?;
            out = Some(match out {
                Some(o) => o.add(part)?,
                None => part,
            });
        }
        Ok((out.expect("every token selects top_k experts"), route))
    }
}

#[derive(Clone, Debug)]
enum Ffn {
    Moe(Moe),
    Dense(FeedForward),
}

#[derive(Clone, Debug)]
struct Layer {
    ln_sa: LayerNorm,
    sa: Attention,
    ln_ca: LayerNorm,
    ca_vlm: Attention,
    ca_act: Attention,
    ln_ff: LayerNorm,
    ffn: Ffn,
}

/// Conditioning from the reasoner: prefix hidden states, the
/// action-conditioning states and the proprio vector.
#[derive(Clone, Copy)]
pub struct Conditioning<'t> {
    pub h_vlm: Var<'t>,
    pub l_action: Var<'t>,
    pub proprio: [f64; ACTION_DIM],
}

#[derive(Clone, Debug)]
pub struct ActionExpert {
    pub cfg: ExpertConfig,
    state_in: Linear,
    action_in: Linear,
    action_pos: ParamId,
    time_in: Linear,
    layers: Vec<Layer>,
    ln_out: LayerNorm,
    readout: Linear,
}

/// Noise draw and interpolation time for one flow-matching example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub a0: Vec<f64>,
    pub t: f64,
}

impl FlowDraw {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let a0 = (0..FLAT_DIM).map(|_| rng.sample(StandardNormal)).collect();
        Self { a0, t: rng.random_range(0.0..1.0) }
    }
}

/// Demonstration chunk in flow-space units.
pub fn normalize(chunk: &ActionChunk) -> Vec<f64> {
    chunk
        .steps
        .iter()
        .flat_map(|s| s.iter().zip(ACTION_SCALE).map(|(x, k)| x / k))
        .collect()
}

pub fn denormalize(flat: &[f64]) -> Result<ActionChunk> {
    let raw: Vec<f64> = flat.iter().enumerate().map(|(i, x)| x * ACTION_SCALE[i % ACTION_DIM]).collect();
    ActionChunk::from_flat(&raw)
}

impl ActionExpert {
    /// `cond_dim` is the reasoner width.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ExpertConfig, cond_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut sub = pb.sub("expert");
        let pb = &mut sub;
        let d = cfg.width;
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let mut b = pb.sub(&format!("layer.{i}"));
            let ffn = if cfg.dense_ffn {
                Ffn::Dense(FeedForward::new(&mut b, "ffn", d, cfg.expert_hidden, Activation::Silu))
            } else {
                Ffn::Moe(Moe::new(&mut b, "moe", d, cfg.expert_hidden, cfg.experts, cfg.top_k))
            };
            layers.push(Layer {
                ln_sa: LayerNorm::new(&mut b, "ln_sa", d),
                sa: Attention::new(&mut b, "sa", d, d, cfg.heads)?,
                ln_ca: LayerNorm::new(&mut b, "ln_ca", d),
                ca_vlm: Attention::new(&mut b, "ca_vlm", d, cond_dim, cfg.heads)?,
                ca_act: Attention::new(&mut b, "ca_act", d, cond_dim, cfg.heads)?,
                ln_ff: LayerNorm::new(&mut b, "ln_ff", d),
                ffn,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            state_in: Linear::new(pb, "state_in", ACTION_DIM, d, true),
            action_in: Linear::new(pb, "action_in", ACTION_DIM, d, true),
            action_pos: pb.uniform("action_pos", &[CHUNK_LEN, d], 0.1),
            time_in: Linear::new(pb, "time_in", TIME_EMBED_DIM, d, true),
            layers,
            ln_out: LayerNorm::new(pb, "ln_out", d),
            readout: Linear::new(pb, "readout", d, ACTION_DIM, true),
        })
    }

    /// Velocity at flow state `a_t` (`1 × 70`, flow units) and time `t`.
    pub fn velocity<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        a_t: Var<'t>,
        t: f64,
        cond: &Conditioning<'t>,
    ) -> Result<(Var<'t>, RouterTrace)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("flow time {t} outside [0, 1]")));
        }
        if a_t.value().len() != FLAT_DIM {
            return Err(Error::InvalidShape {
                op: "velocity",
                shape: a_t.shape(),
                reason: format!("expected {FLAT_DIM} action values"),
            });
        }
        let state = self
            .state_in
            .forward(ctx, ctx.constant(Tensor::new(vec![1, ACTION_DIM], cond.proprio.to_vec())?))?;
        let actions = self
            .action_in
            .forward(ctx, a_t.reshape(&[CHUNK_LEN, ACTION_DIM])?)?
            .add(ctx.p(self.action_pos))?;
        let time = self
            .time_in
            .forward(ctx, ctx.constant(sinusoid(&[t * 1000.0], TIME_EMBED_DIM, 10_000.0)))?;
        let mut h = concat_rows(&[state, actions, time])?;
        let l_action = if self.cfg.use_action_tokens {
            cond.l_action
        } else {
            ctx.constant(Tensor::zeros(&cond.l_action.shape()))
        };
        let mut trace = RouterTrace::default();
        for l in &self.layers {
            let x = l.ln_sa.forward(ctx, h)?;
            h = h.add(l.sa.forward(ctx, x, x, None)?)?;
            let x = l.ln_ca.forward(ctx, h)?;
            let both = l.ca_vlm.forward(ctx, x, cond.h_vlm, None)?.add(l.ca_act.forward(ctx, x, l_action, None)?)?;
            h = h.add(both)?;
            let x = l.ln_ff.forward(ctx, h)?;
            let y = match &l.ffn {
                Ffn::Moe(m) => {
                    let (y, route) = m.forward(ctx, x)?;
                    trace.layers.push(route);
                    y
                }
                Ffn::Dense(f) => f.forward(ctx, x)?,
            };
            h = h.add(y)?;
        }
        let out = self.readout.forward(ctx, self.ln_out.forward(ctx, h.slice_rows(1, 1 + CHUNK_LEN)?)?)?;
        Ok((out.reshape(&[1, FLAT_DIM])?, trace))
    }

    /// Mean squared error between the predicted velocity at the
    /// interpolated state and the straight-line target `a1 - a0`.
    pub fn flow_loss<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        demo: &ActionChunk,
        draw: &FlowDraw,
        cond: &Conditioning<'t>,
    ) -> Result<Var<'t>> {
        let a1 = normalize(demo);
        let (a_t, target) = interpolate(&draw.a0, &a1, draw.t);
        let a_t = ctx.constant(Tensor::new(vec![1, FLAT_DIM], a_t)?);
        let (v, _) = self.velocity(ctx, a_t, draw.t, cond)?;
        let diff = v.sub(ctx.constant(Tensor::new(vec![1, FLAT_DIM], target)?))?;
        Ok(diff.mul(diff)?.mean())
    }

    /// Integrate the learned field from seeded noise and decode a chunk.
    pub fn sample<'t>(&self, ctx: &Ctx<'t, '_>, cond: &Conditioning<'t>, seed: u64) -> Result<ActionChunk> {
        let a0 = noise(seed);
        let a1 = euler_integrate(&a0, self.cfg.euler_steps, |a, t| {
            let x = ctx.constant(Tensor::new(vec![1, FLAT_DIM], a.to_vec())?);
            Ok(self.velocity(ctx, x, t, cond)?.0.value().data().to_vec())
        })?;
        let mut chunk = denormalize(&a1)?;
        chunk.clamp_gripper();
        Ok(chunk)
    }
}

/// `(1 - t) a0 + t a1` and the velocity target `a1 - a0`.
pub fn interpolate(a0: &[f64], a1: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let a_t = a0.iter().zip(a1).map(|(x0, x1)| (1.0 - t) * x0 + t * x1).collect();
    let target = a0.iter().zip(a1).map(|(x0, x1)| x1 - x0).collect();
    (a_t, target)
}

/// Seeded standard-normal starting state.
pub fn noise(seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[0xF10]);
    (0..FLAT_DIM).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fixed-step Euler on the grid `t = k / steps`, `k = 0..steps`.
pub fn euler_integrate<F>(a0: &[f64], steps: usize, mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let h = 1.0 / steps as f64;
    let mut a = a0.to_vec();
    for k in 0..steps {
        let v = field(&a, k as f64 * h)?;
        for (x, dv) in a.iter_mut().zip(&v) {
            *x += h * dv;
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::OdeNonFinite(k));
        }
    }
    Ok(a)
}
