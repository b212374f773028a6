//! Python bindings: scene generation, the differentiable depth renderer,
//! training configs, training runs and trained policies.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use splatvla::action_expert::{self, ActionChunk, AgedChunk, ACTION_DIM};
use splatvla::gst;
use splatvla::params::{Checkpoint, Ctx};
use splatvla::scene_synth::{load_scene, save_scene, SceneSpec};
use splatvla::splat_render::{self, RayBundle, RenderOptions};
use splatvla::trainer::{self, Dataset, EvalOptions, Policy, Prepared, TrainConfig, TrainOptions};
use splatvla::{Error, Tape, Tensor};

create_exception!(splatvla, SplatvlaError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Scene(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => SplatvlaError::new_err(e.to_string()),
    }
}

fn rows3(v: &[[f64; 3]]) -> PyResult<Tensor> {
    Tensor::new(vec![v.len(), 3], v.iter().flatten().copied().collect()).map_err(py_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().get(1).copied().unwrap_or(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn chunk_rows(c: &ActionChunk) -> Vec<Vec<f64>> {
    c.steps.iter().map(|s| s.to_vec()).collect()
}

/// A synthetic tabletop scene with its rendered depth, patch features and
/// annotations.
#[pyclass(module = "splatvla", name = "Scene", skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    spec: SceneSpec,
    prepared: Prepared,
}

impl PyScene {
    fn build(spec: SceneSpec, feature_dim: usize) -> PyResult<Self> {
        let prepared = Prepared::from_spec(&spec, feature_dim).map_err(py_err)?;
        Ok(Self { spec, prepared })
    }

    /// The prepared sample at the feature width a policy expects.
    fn for_width(&self, d_f: usize) -> PyResult<Prepared> {
        if self.prepared.sample.features.shape()[1] == d_f {
            Ok(self.prepared.clone())
        } else {
            Prepared::from_spec(&self.spec, d_f).map_err(py_err)
        }
    }
}

#[pymethods]
impl PyScene {
    #[new]
    #[pyo3(signature = (seed, feature_dim = 32))]
    fn new(seed: u64, feature_dim: usize) -> PyResult<Self> {
        Self::build(SceneSpec::random(seed), feature_dim)
    }

    #[staticmethod]
    #[pyo3(signature = (path, feature_dim = 32))]
    fn load(path: PathBuf, feature_dim: usize) -> PyResult<Self> {
        Self::build(load_scene(&path).map_err(py_err)?, feature_dim)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scene(&self.spec, &path).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.spec.seed
    }

    #[getter]
    fn width(&self) -> usize {
        self.prepared.sample.depth.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.prepared.sample.depth.height
    }

    /// Row-major z-depth in metres.
    #[getter]
    fn depth(&self) -> Vec<f64> {
        self.prepared.sample.depth.data.clone()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows_of(&self.prepared.sample.features)
    }

    #[getter]
    fn target_class(&self) -> usize {
        self.prepared.sample.target_class()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.spec.objects.len()
    }

    #[getter]
    fn proprio(&self) -> Vec<f64> {
        self.prepared.sample.proprio.to_vec()
    }

    /// Ground-truth reasoning chain as token ids.
    #[getter]
    fn chain_tokens(&self) -> Vec<usize> {
        self.prepared.chain.tokens.to_vec()
    }

    /// Scripted demonstration chunk, one row per step.
    #[getter]
    fn demo_actions(&self) -> Vec<Vec<f64>> {
        chunk_rows(&self.prepared.sample.action_gt)
    }

    /// Unit ray directions and distance targets for `count` seeded pixels.
    #[pyo3(signature = (count, seed = 0))]
    fn rays(&self, count: usize, seed: u64) -> PyResult<(Vec<[f64; 3]>, Vec<f64>)> {
        let b = splat_render::ray_bundle_from(&self.prepared.sample, count, seed).map_err(py_err)?;
        Ok((b.directions, b.target_depths))
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(seed={}, objects={}, target_class={})",
            self.spec.seed,
            self.spec.objects.len(),
            self.prepared.sample.target_class()
        )
    }
}

fn bundle(directions: Vec<[f64; 3]>, targets: Option<Vec<f64>>) -> RayBundle {
    let n = directions.len();
    RayBundle {
        target_depths: targets.unwrap_or_else(|| vec![1.0; n]),
        pixel_ids: (0..n).collect(),
        directions,
    }
}

/// Depth along each ray for a set of Gaussian primitives.
#[pyfunction]
#[pyo3(signature = (centroids, log_scales, opacity, directions, footprint_cutoff = false))]
fn render_depth(
    centroids: Vec<[f64; 3]>,
    log_scales: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    directions: Vec<[f64; 3]>,
    footprint_cutoff: bool,
) -> PyResult<Vec<f64>> {
    let tape = Tape::new();
    let n = opacity.len();
    let c = tape.constant(rows3(&centroids)?);
    let s = tape.constant(rows3(&log_scales)?);
    let a = tape.constant(Tensor::new(vec![n, 1], opacity).map_err(py_err)?);
    let out = splat_render::render_depth(c, s, a, &bundle(directions, None), RenderOptions { footprint_cutoff })
        .map_err(py_err)?;
    Ok(out.rendered.value().data().to_vec())
}

/// Scale-invariant log depth loss of the rendered field and its gradients
/// with respect to centroids, log-scales and opacity.
#[pyfunction]
fn render_depth_loss(
    centroids: Vec<[f64; 3]>,
    log_scales: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    directions: Vec<[f64; 3]>,
    targets: Vec<f64>,
) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let tape = Tape::new();
    let n = opacity.len();
    let c = tape.var(rows3(&centroids)?);
    let s = tape.var(rows3(&log_scales)?);
    let a = tape.var(Tensor::new(vec![n, 1], opacity).map_err(py_err)?);
    let rays = bundle(directions, Some(targets));
    let out = splat_render::render_depth(c, s, a, &rays, RenderOptions::default()).map_err(py_err)?;
    let loss = splat_render::depth_loss(out.rendered, &rays.target_depths).map_err(py_err)?;
    tape.backward(loss).map_err(py_err)?;
    let g = |v: splatvla::Var<'_>| v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape()));
    Ok((loss.item(), rows_of(&g(c)), rows_of(&g(s)), g(a).data().to_vec()))
}

/// Loss value from log residuals.
#[pyfunction]
fn silog(residuals: Vec<f64>) -> f64 {
    splat_render::silog(&residuals)
}

/// Finite-difference check of the renderer's gradients on a seeded field.
/// Returns whether every parameter passed and the worst relative error.
#[pyfunction]
#[pyo3(signature = (seed = 0, primitives = 3, step = 1e-6, tol = 1e-4))]
fn grad_check_render(seed: u64, primitives: usize, step: f64, tol: f64) -> PyResult<(bool, f64)> {
    let r = splat_render::grad_check_render(seed, primitives, step, tol).map_err(py_err)?;
    Ok((r.passed(), r.max_rel_err()))
}

#[pyfunction]
#[pyo3(signature = (point, octaves = 6))]
fn fourier_pe(point: [f64; 3], octaves: usize) -> Vec<f64> {
    gst::fourier_pe_values(&point, octaves)
}

/// Blend the current-step predictions of overlapping chunks, newer chunks
/// weighted higher.
#[pyfunction]
fn temporal_ensemble(chunks: Vec<Vec<[f64; ACTION_DIM]>>, ages: Vec<usize>, dt: f64, rate: f64) -> PyResult<Vec<f64>> {
    if chunks.len() != ages.len() {
        return Err(PyValueError::new_err("chunks and ages differ in length"));
    }
    let history: Vec<AgedChunk> = chunks
        .into_iter()
        .zip(ages)
        .map(|(steps, age)| AgedChunk {
            chunk: ActionChunk { steps },
            age,
        })
        .collect();
    Ok(action_expert::temporal_ensemble(&history, dt, rate).map_err(py_err)?.to_vec())
}

/// The default training config as TOML.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_toml()
}

/// Parse and validate a config, returning it normalized. `steps_fraction`
/// scales every stage's step count.
#[pyfunction]
#[pyo3(signature = (text, steps_fraction = None))]
fn normalize_config(text: &str, steps_fraction: Option<(usize, usize)>) -> PyResult<String> {
    let mut cfg = TrainConfig::from_toml(text).map_err(py_err)?;
    if let Some((num, den)) = steps_fraction {
        if den == 0 {
            return Err(PyValueError::new_err("zero denominator"));
        }
        cfg = cfg.scaled_steps(num, den);
    }
    Ok(cfg.to_toml())
}

/// A trained (or freshly initialized) policy with its config.
#[pyclass(module = "splatvla", name = "Policy")]
struct PyPolicy {
    cfg: TrainConfig,
    policy: Policy,
}

fn report_dict(py: Python<'_>, r: &trainer::EvalReport) -> PyResult<Py<pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("depth_loss", r.depth_loss)?;
    d.set_item("depth_abs_rel", r.depth_abs_rel)?;
    d.set_item("token_acc", r.chain.token_acc)?;
    d.set_item("centroid_err_median_m", r.chain.centroid_err_median_m)?;
    d.set_item("contact_err_mean_m", r.chain.contact_err_mean_m)?;
    d.set_item("waypoint_err_mean_m", r.chain.waypoint_err_mean_m)?;
    d.set_item("rollout_err_m", r.rollout_err_m)?;
    Ok(d.unbind())
}

#[pymethods]
impl PyPolicy {
    /// Untrained policy built from a config.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(t) => TrainConfig::from_toml(t).map_err(py_err)?,
            None => TrainConfig::default(),
        };
        let policy = Policy::new(&cfg.model, splatvla::rng::derive(cfg.seed, &[0x1A17])).map_err(py_err)?;
        Ok(Self { cfg, policy })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let (cfg, policy) = trainer::policy_from_checkpoint(&ck).map_err(py_err)?;
        Ok(Self { cfg, policy })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ck = self.policy.to_checkpoint();
        ck.meta.insert("config".into(), self.cfg.to_toml());
        ck.save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> String {
        self.cfg.to_toml()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.policy.store.num_scalars()
    }

    /// Greedily decoded chain tokens; disabled thoughts are `None`.
    fn decode_chain(&self, scene: &PyScene) -> PyResult<Vec<Option<usize>>> {
        let p = scene.for_width(self.policy.cfg.gst.feature_dim)?;
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.policy.store);
        let enc = self.policy.encode(&ctx, &p).map_err(py_err)?;
        let d = self.policy.reasoner.greedy(&ctx, enc.prefix, enc.keys).map_err(py_err)?;
        Ok(d.tokens.to_vec())
    }

    /// One action chunk sampled from seeded noise.
    #[pyo3(signature = (scene, seed = 0))]
    fn act(&self, scene: &PyScene, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let p = scene.for_width(self.policy.cfg.gst.feature_dim)?;
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.policy.store);
        let (_, chunk) = self.policy.act(&ctx, &p, seed).map_err(py_err)?;
        Ok(chunk_rows(&chunk))
    }

    /// Gaussian centroids, log-scales and opacities for a scene.
    fn gaussians(&self, scene: &PyScene) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        let p = scene.for_width(self.policy.cfg.gst.feature_dim)?;
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.policy.store);
        let enc = self.policy.encode(&ctx, &p).map_err(py_err)?;
        let f = &enc.field;
        Ok((
            rows_of(&f.centroids.value()),
            rows_of(&f.log_scales.value()),
            f.opacity.value().data().to_vec(),
        ))
    }

    /// Depth, chain and rollout metrics over the given scenes.
    #[pyo3(signature = (scenes, depth_rays = Some(4096), seed = 0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        scenes: Vec<PyRef<'_, PyScene>>,
        depth_rays: Option<usize>,
        seed: u64,
    ) -> PyResult<Py<pyo3::types::PyDict>> {
        let d_f = self.policy.cfg.gst.feature_dim;
        let prepared = scenes.iter().map(|s| s.for_width(d_f)).collect::<PyResult<Vec<_>>>()?;
        let r = trainer::evaluate(&self.policy, &prepared, EvalOptions { depth_rays, seed }).map_err(py_err)?;
        report_dict(py, &r)
    }
}

/// Run every configured stage on the synthetic dataset the config
/// describes. Returns the policy and the metric log lines.
#[pyfunction]
#[pyo3(signature = (config = None, out_dir = None))]
fn train(config: Option<&str>, out_dir: Option<PathBuf>) -> PyResult<(PyPolicy, Vec<String>)> {
    let cfg = match config {
        Some(t) => TrainConfig::from_toml(t).map_err(py_err)?,
        None => TrainConfig::default(),
    };
    let data = Dataset::synthetic(
        cfg.seed,
        cfg.data.train_scenes,
        cfg.data.val_scenes,
        cfg.model.gst.feature_dim,
    )
    .map_err(py_err)?;
    let opts = TrainOptions {
        out_dir,
        ..Default::default()
    };
    let out = trainer::train(&cfg, &data, opts).map_err(py_err)?;
    let log = out.log.iter().map(|l| l.to_string()).collect();
    Ok((PyPolicy { cfg, policy: out.policy }, log))
}

#[pymodule]
#[pyo3(name = "splatvla")]
fn splatvla_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SplatvlaError", m.py().get_type::<SplatvlaError>())?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(render_depth, m)?)?;
    m.add_function(wrap_pyfunction!(render_depth_loss, m)?)?;
    m.add_function(wrap_pyfunction!(silog, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_render, m)?)?;
    m.add_function(wrap_pyfunction!(fourier_pe, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
