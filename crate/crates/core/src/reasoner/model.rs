use serde::{Deserialize, Serialize};

use super::vocab::{
    layout, Position, Slot, ThoughtChain, ThoughtFlags, ChainValues, CONTENT_LEN, PICK, VOCAB_SIZE,
    class_token, content_slots,
};
use crate::action_expert::ACTION_DIM;
use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Attention, FeedForward, LayerNorm, Linear, MASKED};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Instruction length: verb token then target class token.
pub const INSTRUCTION_LEN: usize = 2;
const INJECT_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub num_act: usize,
    /// Cross-attend to the raw primitive tokens (true) or the pooled set.
    pub dacot_attends_raw: bool,
    pub flags: ThoughtFlags,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            num_act: super::vocab::NUM_ACT,
            dacot_attends_raw: true,
            flags: ThoughtFlags::default(),
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "reasoner width {} must be a positive multiple of heads {} with at least one layer",
                self.width, self.heads
            )));
        }
        if self.num_act == 0 || self.num_act > super::vocab::NUM_ACT {
            return Err(Error::Config(format!("num_act {} outside 1..={}", self.num_act, super::vocab::NUM_ACT)));
        }
        Ok(())
    }

    /// Decoder sequence length after the prefix.
    pub fn chain_len(&self) -> usize {
        layout(self.flags, self.num_act).len()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_sa: LayerNorm,
    sa: Attention,
    ln_ca: LayerNorm,
    ca: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub cfg: ReasonerConfig,
    prefix_len: usize,
    inject_ln: Vec<LayerNorm>,
    inject_ca: Vec<Attention>,
    inject_proj: Linear,
    tok_emb: ParamId,
    pos_emb: ParamId,
    proprio: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Teacher-forced pass over one sample.
pub struct ChainForward<'t> {
    /// One row per supervised content position, `n × VOCAB_SIZE`.
    pub logits: Var<'t>,
    pub targets: Vec<usize>,
    /// Final hidden states of the prefix.
    pub h_vlm: Var<'t>,
    /// Final hidden states at the action-conditioning positions.
    pub l_action: Var<'t>,
}

/// Greedy decoding result; disabled thoughts hold `None`.
pub struct Decoded<'t> {
    pub tokens: [Option<usize>; CONTENT_LEN],
    pub h_vlm: Var<'t>,
    pub l_action: Var<'t>,
}

impl Decoded<'_> {
    /// Chain with disabled positions filled from `fallback`.
    pub fn chain_or(&self, fallback: &ThoughtChain) -> ThoughtChain {
        let mut tokens = fallback.tokens;
        for (t, d) in tokens.iter_mut().zip(&self.tokens) {
            if let Some(d) = d {
                *t = *d;
            }
        }
        ThoughtChain { tokens }
    }
}

impl Reasoner {
    /// `token_dim` is the spatial token width, `feature_dim` the patch
    /// feature width, `num_tokens` the pooled token count.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &ReasonerConfig,
        token_dim: usize,
        feature_dim: usize,
        num_tokens: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sub = pb.sub("reasoner");
        let pb = &mut sub;
        let d = cfg.width;
        let inject_heads = if token_dim % cfg.heads == 0 { cfg.heads } else { 1 };
        let mut inject_ln = Vec::new();
        let mut inject_ca = Vec::new();
        for i in 0..INJECT_LAYERS {
            inject_ln.push(LayerNorm::new(pb, &format!("inject.ln.{i}"), token_dim));
            inject_ca.push(Attention::new_zero_out(
                pb,
                &format!("inject.ca.{i}"),
                token_dim,
                feature_dim,
                inject_heads,
            )?);
        }
        let inject_proj = Linear::new(pb, "inject.proj", token_dim, d, true);
        let prefix_len = num_tokens + INSTRUCTION_LEN + 1;
        let max_len = prefix_len + layout(ThoughtFlags::default(), cfg.num_act).len();
        let tok_emb = pb.uniform("tok_emb", &[VOCAB_SIZE, d], 0.5);
        let pos_emb = pb.uniform("pos_emb", &[max_len, d], 0.1);
        let proprio = Linear::new(pb, "proprio", ACTION_DIM, d, true);
        let mut blocks = Vec::new();
        for i in 0..cfg.layers {
            let mut b = pb.sub(&format!("block.{i}"));
            blocks.push(Block {
                ln_sa: LayerNorm::new(&mut b, "ln_sa", d),
                sa: Attention::new(&mut b, "sa", d, d, cfg.heads)?,
                ln_ca: LayerNorm::new(&mut b, "ln_ca", d),
                ca: Attention::new(&mut b, "ca", d, token_dim, cfg.heads)?,
                ln_ff: LayerNorm::new(&mut b, "ln_ff", d),
                ff: FeedForward::new(&mut b, "ff", d, 4 * d, Activation::Gelu),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            prefix_len,
            inject_ln,
            inject_ca,
            inject_proj,
            tok_emb,
            pos_emb,
            proprio,
            blocks,
            ln_f: LayerNorm::new(pb, "ln_f", d),
            head: Linear::new(pb, "head", d, VOCAB_SIZE, true),
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Keys for the decoder's spatial cross-attention.
    pub fn dacot_keys<'t>(&self, raw_tokens: Var<'t>, pooled: Var<'t>) -> Var<'t> {
        if self.cfg.dacot_attends_raw {
            raw_tokens
        } else {
            pooled
        }
    }

    /// Spatial tokens refined against the patch features and projected to
    /// the decoder width.
    pub fn project_spatial<'t>(&self, ctx: &Ctx<'t, '_>, z_spatial: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let mut z = z_spatial;
        for (ln, ca) in self.inject_ln.iter().zip(&self.inject_ca) {
            let q = ln.forward(ctx, z)?;
            z = z.add(ca.forward(ctx, q, features, None)?)?;
        }
        self.inject_proj.forward(ctx, z)
    }

    /// Prefix `[spatial tokens; verb, class; proprio]`, `prefix_len × width`.
    pub fn inject<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        z_spatial: Var<'t>,
        features: Var<'t>,
        target_class: usize,
        proprio: &[f64; ACTION_DIM],
    ) -> Result<Var<'t>> {
        let n = z_spatial.shape()[0];
        if n + INSTRUCTION_LEN + 1 != self.prefix_len {
            return Err(Error::ShapeMismatch {
                op: "reasoner inject",
                lhs: vec![n],
                rhs: vec![self.prefix_len - INSTRUCTION_LEN - 1],
            });
        }
        let spatial = self.project_spatial(ctx, z_spatial, features)?;
        let instr = ctx.p(self.tok_emb).gather_rows(&[PICK, class_token(target_class)])?;
        let state = self
            .proprio
            .forward(ctx, ctx.constant(Tensor::new(vec![1, ACTION_DIM], proprio.to_vec())?))?;
        concat_rows(&[spatial, instr, state])
    }

    /// Additive mask: the prefix attends within itself, decoder positions
    /// attend to the prefix and earlier decoder positions.
    fn mask(&self, total: usize) -> Tensor {
        let p = self.prefix_len;
        let mut m = Tensor::zeros(&[total, total]);
        for i in 0..total {
            let row = m.row_mut(i);
            let limit = if i < p { p } else { i + 1 };
            for x in row.iter_mut().skip(limit) {
                *x = MASKED;
            }
        }
        m
    }

    /// Final-normalized hidden states for `prefix` followed by `tokens`.
    pub fn hidden<'t>(&self, ctx: &Ctx<'t, '_>, prefix: Var<'t>, kv: Var<'t>, tokens: &[usize]) -> Result<Var<'t>> {
        let emb = ctx.p(self.tok_emb).gather_rows(tokens)?;
        let seq = concat_rows(&[prefix, emb])?;
        let total = seq.shape()[0];
        let pos: Vec<usize> = (0..total).collect();
        let mut h = seq.add(ctx.p(self.pos_emb).gather_rows(&pos)?)?;
        let mask = self.mask(total);
        for b in &self.blocks {
            let x = b.ln_sa.forward(ctx, h)?;
            h = h.add(b.sa.forward(ctx, x, x, Some(&mask))?)?;
            let x = b.ln_ca.forward(ctx, h)?;
            h = h.add(b.ca.forward(ctx, x, kv, None)?)?;
            let x = b.ln_ff.forward(ctx, h)?;
            h = h.add(b.ff.forward(ctx, x)?)?;
        }
        self.ln_f.forward(ctx, h)
    }

    fn split_states<'t>(&self, h: Var<'t>, seq_len: usize) -> Result<(Var<'t>, Var<'t>)> {
        let p = self.prefix_len;
        let total = p + seq_len;
        let h_vlm = h.slice_rows(0, p)?;
        let l_action = h.slice_rows(total - self.cfg.num_act, total)?;
        Ok((h_vlm, l_action))
    }

    /// Teacher forcing on the ground-truth chain.
    pub fn teacher_forced<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        prefix: Var<'t>,
        kv: Var<'t>,
        chain: &ThoughtChain,
    ) -> Result<ChainForward<'t>> {
        let lay = layout(self.cfg.flags, self.cfg.num_act);
        let tokens = super::vocab::fill(&lay, chain);
        let h = self.hidden(ctx, prefix, kv, &tokens)?;
        let p = self.prefix_len;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, pos) in lay.iter().enumerate() {
            if let Position::Content { .. } = pos {
                rows.push(p + i - 1);
                targets.push(tokens[i]);
            }
        }
        let logits = if rows.is_empty() {
            ctx.constant(Tensor::zeros(&[0, VOCAB_SIZE]))
        } else {
            self.head.forward(ctx, h.gather_rows(&rows)?)?
        };
        let (h_vlm, l_action) = self.split_states(h, lay.len())?;
        Ok(ChainForward {
            logits,
            targets,
            h_vlm,
            l_action,
        })
    }

    /// Constrained greedy decoding: fixed positions are forced, content
    /// positions take the arg-max within their slot's token range.
    pub fn greedy<'t>(&self, ctx: &Ctx<'t, '_>, prefix: Var<'t>, kv: Var<'t>) -> Result<Decoded<'t>> {
        let lay = layout(self.cfg.flags, self.cfg.num_act);
        let p = self.prefix_len;
        let mut decoded = [None; CONTENT_LEN];
        // Placeholder content tokens are never visible to earlier positions.
        let mut tokens: Vec<usize> = lay
            .iter()
            .map(|pos| match *pos {
                Position::Fixed(t) => t,
                Position::Content { slot, .. } => slot.range().start,
            })
            .collect();
        for (i, pos) in lay.iter().enumerate() {
            let Position::Content { index, slot } = *pos else { continue };
            let h = self.hidden(ctx, prefix, kv, &tokens[..i])?;
            let row = h.slice_rows(p + i - 1, p + i)?;
            let logits = self.head.forward(ctx, row)?.value();
            let t = argmax_in(logits.data(), slot);
            tokens[i] = t;
            decoded[index] = Some(t);
        }
        let h = self.hidden(ctx, prefix, kv, &tokens)?;
        let (h_vlm, l_action) = self.split_states(h, lay.len())?;
        Ok(Decoded {
            tokens: decoded,
            h_vlm,
            l_action,
        })
    }
}

fn argmax_in(logits: &[f64], slot: Slot) -> usize {
    let r = slot.range();
    let mut best = r.start;
    for t in r {
        if logits[t] > logits[best] {
            best = t;
        }
    }
    best
}

/// Mean token cross-entropy over the supervised positions; an empty set
/// gives a constant zero.
pub fn cot_loss<'t>(ctx: &Ctx<'t, '_>, fwd: &ChainForward<'t>) -> Result<Var<'t>> {
    if fwd.targets.is_empty() {
        return Ok(ctx.constant(Tensor::scalar(0.0)));
    }
    let w = vec![1.0; fwd.targets.len()];
    fwd.logits.cross_entropy(&fwd.targets, &w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub centroid_err_m: f64,
    pub contact_err_m: f64,
    pub waypoint_err_m: f64,
    /// Fraction of enabled content tokens equal to the ground truth.
    pub token_acc: f64,
}

fn dist3(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// De-quantized errors of a decoded chain against exact values. Thought
/// errors for disabled thoughts are reported as NaN.
pub fn chain_metrics(decoded: &[Option<usize>; CONTENT_LEN], gt: &ChainValues, flags: ThoughtFlags) -> Result<ChainMetrics> {
    let gt_tokens = ThoughtChain::encode(gt);
    let filled = ThoughtChain {
        tokens: std::array::from_fn(|i| decoded[i].unwrap_or(gt_tokens.tokens[i])),
    };
    let slots = content_slots();
    for i in 0..CONTENT_LEN {
        if !slots[i].range().contains(&filled.tokens[i]) {
            return Err(Error::Invalid(format!("token {} invalid at content position {i}", filled.tokens[i])));
        }
    }
    let d = filled.decode()?;
    let mut hits = 0;
    let mut count = 0;
    for (i, t) in decoded.iter().enumerate() {
        if let Some(t) = t {
            count += 1;
            hits += usize::from(*t == gt_tokens.tokens[i]);
        }
    }
    let on = |j: usize, v: f64| if flags.enabled(j) { v } else { f64::NAN };
    let wp = (0..3).map(|w| dist3(&d.waypoints[w][..3], &gt.waypoints[w][..3])).sum::<f64>() / 3.0;
    Ok(ChainMetrics {
        centroid_err_m: on(0, dist3(&d.centroid, &gt.centroid)),
        contact_err_m: on(1, dist3(&d.contact_offset, &gt.contact_offset)),
        waypoint_err_m: on(3, wp),
        token_acc: if count == 0 { f64::NAN } else { hits as f64 / count as f64 },
    })
}
