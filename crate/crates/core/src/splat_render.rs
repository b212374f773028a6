//! Differentiable depth rendering of the Gaussian field and the
//! scale-invariant log depth loss.
//!
//! For a ray from the origin with unit direction `d`, primitive `k` has
//! distance `t_k = ‖c_k‖`, projected depth `z_k = c_k·d`, footprint
//! variance `s_k = Σ_i d_i² exp(2σ_ki)` and ray opacity
//! `a_k = α_k exp(-½ (t_k - z_k)² / s_k)`. Primitives are composited front
//! to back by `t_k`: `w_k = a_k Π_{j<k} (1 - a_j)`, rendered depth `Σ w_k z_k`.

use std::rc::Rc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::autodiff::{grad_check, CustomOp, GradCheckReport, Var};
use crate::camera::{DepthMap, Intrinsics};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scene_synth::SceneSample;
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const DEPTH_FLOOR: f64 = 1e-6;
pub const SILOG_LAMBDA: f64 = 0.85;
/// Distances closer than this are treated as ties and ordered by index.
const TIE: f64 = 1e-12;

/// Rays from the camera origin (origins are implicitly zero).
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub directions: Vec<[f64; 3]>,
    pub target_depths: Vec<f64>,
    pub pixel_ids: Vec<usize>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Rays through `count` pixels of the sample's own camera.
pub fn ray_bundle_from(sample: &SceneSample, count: usize, seed: u64) -> Result<RayBundle> {
    rays_from_depth(&sample.depth, &sample.intrinsics, count, seed)
}

/// Seeded uniform subsample of `count` distinct pixels, in ascending pixel
/// order. `count == H·W` yields every pixel once. Targets are distances
/// along the unit ray, converted from the map's z-depth.
pub fn rays_from_depth(depth: &DepthMap, k: &Intrinsics, count: usize, seed: u64) -> Result<RayBundle> {
    let total = depth.width * depth.height;
    if count > total {
        return Err(Error::Invalid(format!("ray count {count} exceeds {total} pixels")));
    }
    let mut ids = if count == total {
        (0..total).collect::<Vec<_>>()
    } else {
        sample_indices(&mut rng_for(seed, &[0x4A75]), total, count).into_vec()
    };
    ids.sort_unstable();
    let mut b = RayBundle {
        directions: Vec::with_capacity(count),
        target_depths: Vec::with_capacity(count),
        pixel_ids: ids,
    };
    for &p in &b.pixel_ids {
        let (u, v) = (p % depth.width, p / depth.width);
        let t = depth.data[p];
        if !(t > 0.0) {
            return Err(Error::NonPositiveDepth { u, v, value: t });
        }
        let d = k.ray_dir(u as f64, v as f64);
        b.directions.push(d);
        b.target_depths.push(t / d[2]);
    }
    Ok(b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderOptions {
    /// Ignore primitives whose ray residual exceeds three footprint
    /// standard deviations.
    pub footprint_cutoff: bool,
}

pub struct RenderOutput<'t> {
    /// `M × 1` rendered depths.
    pub rendered: Var<'t>,
    /// `M × N` compositing weights in storage order of the primitives.
    pub weights: Tensor,
}

/// Front-to-back order by distance from the origin, ties by index.
fn sort_order(c: &Tensor) -> Vec<usize> {
    let n = c.rows();
    let t: Vec<f64> = (0..n).map(|k| c.row(k).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        if (t[a] - t[b]).abs() < TIE {
            a.cmp(&b)
        } else {
            t[a].total_cmp(&t[b])
        }
    });
    order
}

struct RayTerms {
    t: f64,
    z: f64,
    s: f64,
    floored: bool,
    g: f64,
    a: f64,
}

fn ray_terms(c: &[f64], sig: &[f64], alpha: f64, d: &[f64; 3], cutoff: bool) -> RayTerms {
    let t = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let z = c[0] * d[0] + c[1] * d[1] + c[2] * d[2];
    let raw_s: f64 = (0..3).map(|i| d[i] * d[i] * (2.0 * sig[i]).exp()).sum();
    let (s, floored) = if raw_s < VARIANCE_FLOOR { (VARIANCE_FLOOR, true) } else { (raw_s, false) };
    let e = t - z;
    let q = e * e / s;
    let g = if cutoff && q > 9.0 { 0.0 } else { (-0.5 * q).exp() };
    RayTerms { t, z, s, floored, g, a: alpha * g }
}

struct RenderOp {
    directions: Vec<[f64; 3]>,
    order: Vec<usize>,
    cutoff: bool,
}

/// Render depth along every ray. `centroids` and `log_scales` are `N × 3`,
/// `opacity` is `N × 1`.
pub fn render_depth<'t>(
    centroids: Var<'t>,
    log_scales: Var<'t>,
    opacity: Var<'t>,
    rays: &RayBundle,
    opts: RenderOptions,
) -> Result<RenderOutput<'t>> {
    let (c, sg, al) = (centroids.value(), log_scales.value(), opacity.value());
    let n = c.rows();
    if c.shape() != [n, 3] || sg.shape() != [n, 3] || al.len() != n {
        return Err(Error::ShapeMismatch {
            op: "render_depth",
            lhs: c.shape().to_vec(),
            rhs: sg.shape().to_vec(),
        });
    }
    for (name, t) in [("centroids", &c), ("log_scales", &sg), ("opacity", &al)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("render_depth {name}")));
        }
    }
    let order = sort_order(&c);
    let m = rays.len();
    let mut rendered = Tensor::zeros(&[m, 1]);
    let mut weights = Tensor::zeros(&[m, n]);
    for (r, d) in rays.directions.iter().enumerate() {
        let mut trans = 1.0;
        let mut acc = 0.0;
        let wrow = weights.row_mut(r);
        for &k in &order {
            let rt = ray_terms(c.row(k), sg.row(k), al.data()[k], d, opts.footprint_cutoff);
            let w = rt.a * trans;
            wrow[k] = w;
            acc += w * rt.z;
            trans *= 1.0 - rt.a;
        }
        rendered.data_mut()[r] = acc;
    }
    let op = RenderOp {
        directions: rays.directions.clone(),
        order,
        cutoff: opts.footprint_cutoff,
    };
    let tape = centroids.tape();
    let out = tape.custom(&[centroids, log_scales, opacity], rendered, Box::new(op))?;
    Ok(RenderOutput { rendered: out, weights })
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render_depth"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[Rc<Tensor>], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (c, sg, al) = (&inputs[0], &inputs[1], &inputs[2]);
        let n = c.rows();
        let mut gc = Tensor::zeros(&[n, 3]);
        let mut gs = Tensor::zeros(&[n, 3]);
        let mut ga = Tensor::zeros(al.shape());
        let mut terms: Vec<RayTerms> = Vec::with_capacity(n);
        let mut trans = vec![0.0; n];
        for (r, d) in self.directions.iter().enumerate() {
            let gr = grad_out.data()[r];
            if gr == 0.0 {
                continue;
            }
            terms.clear();
            let mut tr = 1.0;
            for (i, &k) in self.order.iter().enumerate() {
                let rt = ray_terms(c.row(k), sg.row(k), al.data()[k], d, self.cutoff);
                trans[i] = tr;
                tr *= 1.0 - rt.a;
                terms.push(rt);
            }
            // Suffix depth U_i = a_i z_i + (1 - a_i) U_{i+1}; dR/da_i = T_i (z_i - U_{i+1}).
            let mut suffix = 0.0;
            for i in (0..n).rev() {
                let k = self.order[i];
                let rt = &terms[i];
                let d_a = trans[i] * (rt.z - suffix);
                suffix = rt.a * rt.z + (1.0 - rt.a) * suffix;
                let alpha = al.data()[k];
                ga.data_mut()[k] += gr * d_a * rt.g;
                if rt.g == 0.0 {
                    // Only the direct depth term survives.
                    let w = rt.a * trans[i];
                    for j in 0..3 {
                        gc.row_mut(k)[j] += gr * w * d[j];
                    }
                    continue;
                }
                let d_g = d_a * alpha;
                let e = rt.t - rt.z;
                let d_e = d_g * (-rt.g * e / rt.s);
                let d_s = d_g * rt.g * 0.5 * e * e / (rt.s * rt.s);
                let w = rt.a * trans[i];
                let d_z = w - d_e;
                let d_t = d_e;
                let ck = c.row(k);
                let inv_t = if rt.t > 0.0 { 1.0 / rt.t } else { 0.0 };
                for j in 0..3 {
                    gc.row_mut(k)[j] += gr * (d_z * d[j] + d_t * ck[j] * inv_t);
                }
                if !rt.floored {
                    let sk = sg.row(k);
                    for j in 0..3 {
                        gs.row_mut(k)[j] += gr * d_s * 2.0 * d[j] * d[j] * (2.0 * sk[j]).exp();
                    }
                }
            }
        }
        vec![Some(gc), Some(gs), Some(ga)]
    }
}

struct SilogOp {
    residuals: Vec<f64>,
    floored: Vec<bool>,
}

/// `(1/n) Σ dᵢ² - (0.85/n²) (Σ dᵢ)²` with `dᵢ = log max(rᵢ, 1e-6) - log targetᵢ`.
pub fn depth_loss<'t>(rendered: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let r = rendered.value();
    if r.len() != target.len() || target.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "depth_loss",
            lhs: r.shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    if let Some(t) = target.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Invalid(format!("non-positive target depth {t}")));
    }
    let mut residuals = Vec::with_capacity(target.len());
    let mut floored = Vec::with_capacity(target.len());
    for (x, t) in r.data().iter().zip(target) {
        floored.push(*x < DEPTH_FLOOR);
        residuals.push(x.max(DEPTH_FLOOR).ln() - t.ln());
    }
    let value = silog(&residuals);
    let tape = rendered.tape();
    tape.custom(&[rendered], Tensor::scalar(value), Box::new(SilogOp { residuals, floored }))
}

/// Loss value from log residuals.
pub fn silog(residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    let sum: f64 = residuals.iter().sum();
    let sq: f64 = residuals.iter().map(|d| d * d).sum();
    sq / n - SILOG_LAMBDA * sum * sum / (n * n)
}

impl CustomOp for SilogOp {
    fn name(&self) -> &'static str {
        "depth_loss"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[Rc<Tensor>], _output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_out.item();
        let n = self.residuals.len() as f64;
        let sum: f64 = self.residuals.iter().sum();
        let r = &inputs[0];
        let mut out = Tensor::zeros(r.shape());
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            if self.floored[i] {
                continue;
            }
            let dd = 2.0 * self.residuals[i] / n - 2.0 * SILOG_LAMBDA * sum / (n * n);
            *o = g * dd / r.data()[i];
        }
        vec![Some(out)]
    }
}

/// Mean of `|r - t| / t`.
pub fn abs_rel(rendered: &[f64], target: &[f64]) -> f64 {
    rendered.iter().zip(target).map(|(r, t)| (r - t).abs() / t).sum::<f64>() / target.len() as f64
}

/// Seeded field of `n` primitives in front of the camera and a 4×4 grid
/// of rays through them, for gradient verification.
pub fn check_field(seed: u64, n: usize) -> ([Tensor; 3], RayBundle) {
    let mut rng = rng_for(seed, &[0x6C4E]);
    let mut c = Vec::with_capacity(3 * n);
    let mut s = Vec::with_capacity(3 * n);
    let mut a = Vec::with_capacity(n);
    for k in 0..n {
        c.extend([rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)]);
        c.push(0.45 + 0.1 * k as f64 + rng.random_range(-0.02..0.02));
        s.extend((0..3).map(|_| rng.random_range(-3.0..-2.3)));
        a.push(rng.random_range(0.5..0.85));
    }
    let mut directions = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let d: [f64; 3] = [-0.09 + 0.06 * i as f64, -0.08 + 0.055 * j as f64, 1.0];
            let len = (d[0] * d[0] + d[1] * d[1] + 1.0).sqrt();
            directions.push([d[0] / len, d[1] / len, d[2] / len]);
        }
    }
    let rays = RayBundle {
        target_depths: (0..directions.len()).map(|_| rng.random_range(0.4..0.7)).collect(),
        pixel_ids: (0..directions.len()).collect(),
        directions,
    };
    let t = |rows, cols, v| Tensor::new(vec![rows, cols], v).expect("field shape");
    ([t(n, 3, c), t(n, 3, s), t(n, 1, a)], rays)
}

/// Finite-difference check of `depth_loss ∘ render_depth` with respect to
/// centroids, log-scales and opacity.
pub fn grad_check_render(seed: u64, n: usize, step: f64, tol: f64) -> Result<GradCheckReport> {
    let (params, rays) = check_field(seed, n);
    grad_check(
        |_tape, v| {
            let out = render_depth(v[0], v[1], v[2], &rays, RenderOptions::default())?;
            depth_loss(out.rendered, &rays.target_depths)
        },
        &params,
        step,
        tol,
    )
}
