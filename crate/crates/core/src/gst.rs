//! Gaussian spatial tokenizer: per-patch primitive estimation, multi-scale
//! opacity, Fourier positional codes, raw token formation and attention
//! pooling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Var};
use crate::camera::{backproject, patch_anchors, NUM_PATCHES, PATCH_GRID};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::scene_synth::SceneSample;
use crate::tensor::Tensor;

pub const CENTROID_RESIDUAL_MAX: f64 = 0.1;
pub const LOG_SCALE_MIN: f64 = -5.0;
pub const LOG_SCALE_MAX: f64 = 1.0;
pub const OPACITY_EPS: f64 = 1e-9;
pub const FIXED_OPACITY: f64 = 1.0 - OPACITY_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    Fourier3d,
    Learned2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Attention,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpacityMode {
    Learned,
    FixedOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    Learned,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Anisotropic,
    Isotropic,
}

/// Content of the geometric part of each raw token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprMode {
    /// Positional code, log-scales and opacity.
    Full,
    /// Log-scale and opacity channels zeroed.
    PositionOnly,
    /// Positional code, log-scales and opacity replaced by the patch-mean depth.
    DepthScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GstConfig {
    pub num_patches: usize,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub octaves: usize,
    pub feature_dim: usize,
    pub pe_mode: PeMode,
    pub pool_mode: PoolMode,
    pub opacity_mode: OpacityMode,
    pub residual_mode: ResidualMode,
    pub scale_mode: ScaleMode,
    pub repr_mode: ReprMode,
}

impl Default for GstConfig {
    fn default() -> Self {
        Self {
            num_patches: NUM_PATCHES,
            num_tokens: 128,
            token_dim: 64,
            octaves: 6,
            feature_dim: 32,
            pe_mode: PeMode::Fourier3d,
            pool_mode: PoolMode::Attention,
            opacity_mode: OpacityMode::Learned,
            residual_mode: ResidualMode::Learned,
            scale_mode: ScaleMode::Anisotropic,
            repr_mode: ReprMode::Full,
        }
    }
}

impl GstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_patches != NUM_PATCHES {
            return Err(Error::Config(format!("num_patches must be {NUM_PATCHES}")));
        }
        if self.num_tokens == 0 || self.num_tokens > self.num_patches {
            return Err(Error::Config(format!(
                "num_tokens {} must be in 1..={}",
                self.num_tokens, self.num_patches
            )));
        }
        if self.pool_mode == PoolMode::Average && self.num_patches % self.num_tokens != 0 {
            return Err(Error::Config("average pooling needs num_tokens dividing num_patches".into()));
        }
        if self.octaves == 0 || self.feature_dim < 2 || self.token_dim == 0 {
            return Err(Error::Config("octaves, feature_dim and token_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn pe_dim(&self) -> usize {
        6 * self.octaves
    }

    /// Width of the multi-scale opacity input.
    pub fn mip_dim(&self) -> usize {
        3 * self.feature_dim
    }

    /// Width of `[features; positional code; log-scales; opacity]`.
    pub fn concat_dim(&self) -> usize {
        self.feature_dim + self.pe_dim() + 3 + 1
    }

    /// Layer widths of the primitive estimator, input first.
    pub fn estimator_widths(&self) -> [usize; 5] {
        let d = self.feature_dim;
        let r = |num: usize, den: usize| ((d * num) as f64 / den as f64).round() as usize;
        [d, d, r(2, 3), r(1, 2), 7]
    }
}

/// Octave-major Fourier code: for each octave `l`, `sin(2^l π c)` (3 values)
/// then `cos(2^l π c)` (3 values).
pub fn fourier_pe_values(c: &[f64; 3], octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * octaves);
    for l in 0..octaves {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(c.iter().map(|x| (f * x).sin()));
        out.extend(c.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Differentiable form of [`fourier_pe_values`] for an `N × 3` centroid var.
pub fn fourier_pe<'t>(c: Var<'t>, octaves: usize) -> Result<Var<'t>> {
    let mut parts = Vec::with_capacity(2 * octaves);
    for l in 0..octaves {
        let s = c.scale((1u64 << l) as f64 * std::f64::consts::PI);
        parts.push(s.sin());
        parts.push(s.cos());
    }
    concat_cols(&parts)
}

/// `[f_k, mean of its 2×2 grid block, mean of its 4×4 grid block]`.
pub fn multi_scale_input(features: &Tensor) -> Tensor {
    let (n, d) = features.rows_cols();
    let g = (n as f64).sqrt() as usize;
    let block_mean = |k: usize, b: usize| {
        let (r0, c0) = ((k / g) / b * b, (k % g) / b * b);
        let (r1, c1) = ((r0 + b).min(g), (c0 + b).min(g));
        let mut acc = vec![0.0; d];
        for r in r0..r1 {
            for c in c0..c1 {
                for (a, x) in acc.iter_mut().zip(features.row(r * g + c)) {
                    *a += x;
                }
            }
        }
        let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
        acc.iter().map(|a| a * inv).collect::<Vec<_>>()
    };
    let mut out = Tensor::zeros(&[n, 3 * d]);
    for k in 0..n {
        let row = out.row_mut(k);
        row[..d].copy_from_slice(features.row(k));
        row[d..2 * d].copy_from_slice(&block_mean(k, 2));
        row[2 * d..].copy_from_slice(&block_mean(k, 4));
    }
    out
}

/// Patch anchors of a sample as an `N_p × 3` tensor.
pub fn sample_anchors(sample: &SceneSample) -> Result<Tensor> {
    let pts = backproject(&sample.depth, &sample.intrinsics)?;
    let a = patch_anchors(&pts, PATCH_GRID)?;
    Ok(Tensor::new(vec![a.anchors.len(), 3], a.anchors.iter().flatten().copied().collect())?)
}

#[derive(Clone, Debug)]
pub struct Gst {
    pub cfg: GstConfig,
    pub estimator: Mlp,
    pub opacity_head: Mlp,
    pub pe_table: Option<ParamId>,
    pub token_proj: Linear,
    pub pool_queries: ParamId,
    pub pool_key: Linear,
    pub pool_value: Linear,
}

/// Per-primitive estimates before token formation.
#[derive(Clone, Copy, Debug)]
pub struct Primitives<'t> {
    pub residual: Var<'t>,
    pub log_scales: Var<'t>,
    /// Primitive-estimator opacity logit, `N_p × 1`.
    pub logit: Var<'t>,
}

/// The raw Gaussian field and its per-primitive tokens.
#[derive(Clone, Copy, Debug)]
pub struct GaussianField<'t> {
    pub centroids: Var<'t>,
    pub log_scales: Var<'t>,
    /// `N_p × 1`.
    pub opacity: Var<'t>,
    pub raw_tokens: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct SpatialTokenSet<'t> {
    pub tokens: Var<'t>,
    pub attention: Tensor,
}

impl Gst {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &GstConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut pb = pb.sub("gst");
        let estimator = Mlp::new(&mut pb, "estimator", &cfg.estimator_widths(), Activation::Gelu, true);
        let opacity_head = Mlp::new(&mut pb, "opacity", &[cfg.mip_dim(), d, 1], Activation::Gelu, false);
        let pe_table = (cfg.pe_mode == PeMode::Learned2d)
            .then(|| pb.uniform("pe_table", &[cfg.num_patches, cfg.pe_dim()], 1.0));
        let token_proj = Linear::new(&mut pb, "token_proj", cfg.concat_dim(), cfg.token_dim, false);
        let pool_queries = pb.fan_in("pool.queries", &[cfg.num_tokens, cfg.token_dim], cfg.token_dim);
        let pool_key = Linear::new(&mut pb, "pool.key", cfg.token_dim, cfg.token_dim, false);
        let pool_value = Linear::new(&mut pb, "pool.value", cfg.token_dim, cfg.token_dim, false);
        Ok(Self {
            cfg: cfg.clone(),
            estimator,
            opacity_head,
            pe_table,
            token_proj,
            pool_queries,
            pool_key,
            pool_value,
        })
    }

    /// Residual (bounded by ±0.1 m), log-scales in (-5, 1), and logit.
    pub fn estimate_params<'t>(&self, ctx: &Ctx<'t, '_>, features: Var<'t>) -> Result<Primitives<'t>> {
        let raw = self.estimator.forward(ctx, features)?;
        let n = raw.shape()[0];
        let residual = match self.cfg.residual_mode {
            ResidualMode::Learned => raw.slice_cols(0, 3)?.tanh().scale(CENTROID_RESIDUAL_MAX),
            ResidualMode::Zero => ctx.constant(Tensor::zeros(&[n, 3])),
        };
        // Affine tanh onto (min, max) with the zero input mapped to zero.
        let mid = 0.5 * (LOG_SCALE_MIN + LOG_SCALE_MAX);
        let half = 0.5 * (LOG_SCALE_MAX - LOG_SCALE_MIN);
        let shift = (-mid / half).atanh();
        let mut log_scales = raw.slice_cols(3, 6)?.add_scalar(shift).tanh().scale(half).add_scalar(mid);
        if self.cfg.scale_mode == ScaleMode::Isotropic {
            log_scales = log_scales.matmul(ctx.constant(Tensor::full(&[3, 3], 1.0 / 3.0)))?;
        }
        Ok(Primitives {
            residual,
            log_scales,
            logit: raw.slice_cols(6, 7)?,
        })
    }

    /// `sigmoid(f_exp(MIP) + logit)`, or the fixed near-one opacity.
    pub fn opacity<'t>(&self, ctx: &Ctx<'t, '_>, mip: &Tensor, logit: Var<'t>) -> Result<Var<'t>> {
        match self.cfg.opacity_mode {
            OpacityMode::FixedOne => Ok(ctx.constant(Tensor::full(&[mip.rows(), 1], FIXED_OPACITY))),
            OpacityMode::Learned => {
                let head = self.opacity_head.forward(ctx, ctx.constant(mip.clone()))?;
                // Squeezed into [ε, 1-ε] so saturation never reaches 0 or 1.
                Ok(head.add(logit)?.sigmoid().scale(1.0 - 2.0 * OPACITY_EPS).add_scalar(OPACITY_EPS))
            }
        }
    }

    fn positional<'t>(&self, ctx: &Ctx<'t, '_>, centroids: Var<'t>) -> Result<Var<'t>> {
        match self.pe_table {
            Some(id) => Ok(ctx.p(id)),
            None => fourier_pe(centroids, self.cfg.octaves),
        }
    }

    pub fn form_raw_tokens<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        features: Var<'t>,
        pe: Var<'t>,
        log_scales: Var<'t>,
        opacity: Var<'t>,
        anchors: &Tensor,
    ) -> Result<Var<'t>> {
        let n = anchors.rows();
        let geo = match self.cfg.repr_mode {
            ReprMode::Full => concat_cols(&[pe, log_scales, opacity])?,
            ReprMode::PositionOnly => concat_cols(&[pe, ctx.constant(Tensor::zeros(&[n, 4]))])?,
            ReprMode::DepthScalar => {
                let mut t = Tensor::zeros(&[n, self.cfg.pe_dim() + 4]);
                for k in 0..n {
                    t.row_mut(k)[0] = anchors.at2(k, 2);
                }
                ctx.constant(t)
            }
        };
        self.token_proj.forward(ctx, concat_cols(&[features, geo])?)
    }

    pub fn pool<'t>(&self, ctx: &Ctx<'t, '_>, raw_tokens: Var<'t>) -> Result<SpatialTokenSet<'t>> {
        let (n_g, n_p) = (self.cfg.num_tokens, self.cfg.num_patches);
        match self.cfg.pool_mode {
            PoolMode::Attention => {
                let k = self.pool_key.forward(ctx, raw_tokens)?;
                let v = self.pool_value.forward(ctx, raw_tokens)?;
                let scores = ctx
                    .p(self.pool_queries)
                    .matmul_t(k)?
                    .scale(1.0 / (self.cfg.token_dim as f64).sqrt());
                let attn = scores.softmax_lastdim();
                Ok(SpatialTokenSet {
                    tokens: attn.matmul(v)?,
                    attention: (*attn.value()).clone(),
                })
            }
            PoolMode::Average => {
                let attention = average_pool_matrix(n_g, n_p);
                let tokens = ctx.constant(attention.clone()).matmul(raw_tokens)?;
                Ok(SpatialTokenSet { tokens, attention })
            }
        }
    }

    /// Full tokenizer from a sample.
    pub fn tokenize<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        sample: &SceneSample,
    ) -> Result<(GaussianField<'t>, SpatialTokenSet<'t>)> {
        let anchors = sample_anchors(sample)?;
        let mip = multi_scale_input(&sample.features);
        self.tokenize_parts(ctx, &sample.features, &anchors, &mip)
    }

    /// Tokenizer from precomputed features, anchors and multi-scale input.
    pub fn tokenize_parts<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        features: &Tensor,
        anchors: &Tensor,
        mip: &Tensor,
    ) -> Result<(GaussianField<'t>, SpatialTokenSet<'t>)> {
        let f = ctx.constant(features.clone());
        let prim = self.estimate_params(ctx, f)?;
        let centroids = ctx.constant(anchors.clone()).add(prim.residual)?;
        let opacity = self.opacity(ctx, mip, prim.logit)?;
        let pe = self.positional(ctx, centroids)?;
        let raw_tokens = self.form_raw_tokens(ctx, f, pe, prim.log_scales, opacity, anchors)?;
        let field = GaussianField {
            centroids,
            log_scales: prim.log_scales,
            opacity,
            raw_tokens,
        };
        let pooled = self.pool(ctx, raw_tokens)?;
        Ok((field, pooled))
    }
}

/// Rows of uniform weight over contiguous index blocks.
pub fn average_pool_matrix(n_g: usize, n_p: usize) -> Tensor {
    let b = n_p / n_g;
    let mut m = Tensor::zeros(&[n_g, n_p]);
    for i in 0..n_g {
        for j in i * b..(i + 1) * b {
            m.data_mut()[i * n_p + j] = 1.0 / b as f64;
        }
    }
    m
}

/// Binary little-endian PLY with x, y, z, sx, sy, sz (= exp of log-scale)
/// and opacity per vertex.
pub fn write_ply(path: &Path, centroids: &Tensor, log_scales: &Tensor, opacity: &Tensor) -> Result<()> {
    let n = centroids.rows();
    let mut buf = Vec::new();
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment gaussian field, metres, camera frame\nelement vertex {n}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double sx\nproperty double sy\nproperty double sz\n\
         property double opacity\nend_header\n"
    );
    buf.extend_from_slice(header.as_bytes());
    for k in 0..n {
        let vals = [
            centroids.at2(k, 0),
            centroids.at2(k, 1),
            centroids.at2(k, 2),
            log_scales.at2(k, 0).exp(),
            log_scales.at2(k, 1).exp(),
            log_scales.at2(k, 2).exp(),
            opacity.data()[k],
        ];
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
