//! Reusable layers built on the tape: linear maps, layer norm, multi-head
//! attention, and small MLPs.

use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention entries.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Silu => x.silu(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.fan_in(&format!("{name}.w"), &[d_in, d_out], d_in);
        let b = bias.then(|| pb.fan_in(&format!("{name}.b"), &[d_out], d_in));
        Self { w, b, d_in, d_out }
    }

    /// Weights and bias start at exactly zero.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.constant(&format!("{name}.w"), &[d_in, d_out], 0.0);
        let b = bias.then(|| pb.constant(&format!("{name}.b"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.p(self.w))?;
        match self.b {
            Some(b) => y.add_row(ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        Self {
            gain: pb.constant(&format!("{name}.g"), &[dim], 1.0),
            bias: pb.constant(&format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias))
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last layer).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `widths` lists input width followed by every layer's output width.
    /// With `zero_last`, the final layer starts at zero.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, widths: &[usize], act: Activation, zero_last: bool) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i + 1 == n {
                    Linear::zeroed(pb, &lname, widths[i], widths[i + 1], true)
                } else {
                    Linear::new(pb, &lname, widths[i], widths[i + 1], true)
                }
            })
            .collect();
        Self { layers, act }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, mut x: Var<'t>) -> Result<Var<'t>> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, x)?;
            if i + 1 < n {
                x = self.act.apply(x);
            }
        }
        Ok(x)
    }
}

/// Causal additive mask for `n` positions.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASKED;
        }
    }
    m
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        Self::build(pb, name, dim, kv_dim, heads, false)
    }

    /// Same as [`Attention::new`] but the output projection starts at zero,
    /// so a residual branch built from it is initially the identity.
    pub fn new_zero_out(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        Self::build(pb, name, dim, kv_dim, heads, true)
    }

    fn build(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let q = Linear::new(pb, &format!("{name}.q"), dim, dim, true);
        let k = Linear::new(pb, &format!("{name}.k"), kv_dim, dim, true);
        let v = Linear::new(pb, &format!("{name}.v"), kv_dim, dim, true);
        let o = if zero_out {
            Linear::zeroed(pb, &format!("{name}.o"), dim, dim, true)
        } else {
            Linear::new(pb, &format!("{name}.o"), dim, dim, true)
        };
        Ok(Self { q, k, v, o, heads, dim })
    }

    /// `x` attends to `kv`; `mask` is added to every head's logits.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x: Var<'t>,
        kv: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, kv)?;
        let v = self.v.forward(ctx, kv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = mask.map(|m| ctx.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?)
            };
            let mut s = qh.matmul_t(kh)?.scale(scale);
            if let Some(m) = mask {
                s = s.add(m)?;
            }
            outs.push(s.softmax_lastdim().matmul(vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        self.o.forward(ctx, cat)
    }
}

/// Position-wise two-layer feedforward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize, act: Activation) -> Self {
        Self {
            up: Linear::new(pb, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(pb, &format!("{name}.down"), hidden, dim, true),
            act,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.act.apply(self.up.forward(ctx, x)?);
        self.down.forward(ctx, h)
    }
}

/// Sinusoidal embedding of positions `0..n` with `dim` channels
/// (first half sine, second half cosine).
pub fn sinusoid(values: &[f64], dim: usize, max_period: f64) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[values.len(), dim]);
    for (r, &x) in values.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            row[i] = (x * freq).sin();
            row[half + i] = (x * freq).cos();
        }
    }
    out
}
