use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use splatvla::action_expert::{temporal_ensemble, ActionExpert, AgedChunk, Conditioning, ExpertConfig, FlowDraw, ACTION_DIM};
use splatvla::autodiff::{grad_check, GradCheckReport};
use splatvla::gst::write_ply;
use splatvla::params::{Checkpoint, Ctx, ParamBuilder, ParamStore};
use splatvla::reasoner::chain_metrics;
use splatvla::reasoner::vocab::ThoughtChain;
use splatvla::rng::{derive, DEFAULT_SEED};
use splatvla::scene_synth::{load_scene, write_dataset};
use splatvla::splat_render::{depth_loss, grad_check_render, rays_from_depth, render_depth, RenderOptions};
use splatvla::trainer::{
    ablation_matrix, evaluate, parse_grid, policy_from_checkpoint, rollout_error, table, train, Dataset, EvalOptions,
    Policy, Prepared, TrainConfig, TrainOptions,
};
use splatvla::{Error, Result, Tape, Tensor};

/// Set to any value to print progress to stderr.
const VERBOSE_ENV: &str = "SPLATVLA_VERBOSE";
const SNAPSHOT: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "splatvla", version, about = "Synthetic-scene spatial policy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write random scene files and a manifest.
    GenScenes(GenScenes),
    /// Run the staged training pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient verification.
    GradCheck(GradCheckArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(AblateArgs),
    /// Write a scene's Gaussian field as binary PLY.
    ExportGaussians(SceneArgs),
    /// Greedy-decode the thought chain for a scene.
    DecodeChain(SceneArgs),
    /// Open-loop and ensembled closed-loop execution on a scene.
    Rollout(RolloutArgs),
    /// Render a full depth image of a scene's Gaussian field.
    RenderDepth(SceneArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenScenes {
    #[arg(long)]
    count: usize,
    /// Trailing scenes assigned to the validation split.
    #[arg(long, default_value_t = 0)]
    val_count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory with a manifest; synthesized from the config seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    skip_s1: bool,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Rays per scene for depth metrics (every pixel when omitted).
    #[arg(long)]
    depth_rays: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum CheckModule {
    SplatRender,
    DepthLoss,
    ActionExpert,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    #[arg(long, value_enum)]
    module: CheckModule,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Directory for the report and snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Base training config the cells override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    depth_rays: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SceneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Closed-loop control steps.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn verbose() -> bool {
    std::env::var_os(VERBOSE_ENV).is_some()
}

fn note(msg: impl AsRef<str>) {
    if verbose() {
        eprintln!("{}", msg.as_ref());
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Invalid(format!("serialize: {e}")))
}

#[derive(Serialize)]
struct Snapshot<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a TrainConfig>,
}

/// Snapshot inside an output directory, or beside an output file.
fn snapshot<A: Serialize>(out: &Path, is_dir: bool, command: &str, args: &A, config: Option<&TrainConfig>) -> Result<()> {
    let path = if is_dir {
        out.join(SNAPSHOT)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".config.toml");
        out.with_file_name(name)
    };
    write(&path, &to_toml(&Snapshot { command, args, config })?)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> Result<(TrainConfig, Policy)> {
    require(path)?;
    policy_from_checkpoint(&Checkpoint::load(path)?)
}

fn load_dataset(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            require(d)?;
            Dataset::from_dir(d, cfg.model.gst.feature_dim)
        }
        None => Dataset::synthetic(cfg.seed, cfg.data.train_scenes, cfg.data.val_scenes, cfg.model.gst.feature_dim),
    }
}

fn scene_input(checkpoint: &Path, scene: &Path) -> Result<(Policy, Prepared)> {
    require(scene)?;
    let (cfg, policy) = load_checkpoint(checkpoint)?;
    let p = Prepared::from_spec(&load_scene(scene)?, cfg.model.gst.feature_dim)?;
    Ok((policy, p))
}

fn gen_scenes(a: &GenScenes) -> Result<()> {
    let m = write_dataset(&a.out, a.count, a.val_count, a.seed)?;
    snapshot(&a.out, true, "gen-scenes", a, None)?;
    println!("wrote {} scenes to {}", m.scenes.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.skip_s1 |= a.skip_s1;
    cfg.validate()?;
    let load = |p: &Option<PathBuf>| -> Result<Option<Checkpoint>> {
        p.as_deref()
            .map(|p| {
                require(p)?;
                Checkpoint::load(p)
            })
            .transpose()
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        init: load(&a.init)?,
        resume: load(&a.resume)?,
        stop_after: a.stop_after,
    };
    let data = load_dataset(&cfg, a.data.as_deref())?;
    note(format!("training on {} scenes", data.train.len()));
    snapshot(&a.out, true, "train", a, Some(&cfg))?;
    let out = train(&cfg, &data, opts)?;
    for r in &out.stages {
        println!(
            "{} steps {} total {:.6} flow {:.6} cot {:.6} depth {:.6}",
            r.stage.label(),
            r.steps_run,
            r.last.total,
            r.last.flow,
            r.last.cot,
            r.last.depth
        );
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, policy) = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&cfg, a.data.as_deref())?;
    let scenes = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let rep = evaluate(
        &policy,
        scenes,
        EvalOptions {
            depth_rays: a.depth_rays,
            seed: a.seed,
        },
    )?;
    snapshot(&a.out, true, "eval", a, Some(&cfg))?;
    write(&a.out.join("eval.toml"), &to_toml(&rep)?)?;
    let line = format!(
        "depth_loss {:e} abs_rel {:e} token_acc {:e} centroid_err_m {:e} rollout_err_m {:e}\n",
        rep.depth_loss, rep.depth_abs_rel, rep.chain.token_acc, rep.chain.centroid_err_median_m, rep.rollout_err_m
    );
    write(&a.out.join("metrics.log"), &line)?;
    print!("{line}");
    Ok(())
}

fn expert_check(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = ExpertConfig {
        layers: 1,
        width: 8,
        heads: 2,
        experts: 4,
        expert_hidden: 8,
        ..Default::default()
    };
    let cond_dim = 8;
    let mut store = ParamStore::new();
    let e = ActionExpert::new(&mut ParamBuilder::new(&mut store, seed, ""), &cfg, cond_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xC0D]));
    let mut rand = |r, c| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (h, l) = (rand(4, cond_dim)?, rand(3, cond_dim)?);
    let mut demo = splatvla::action_expert::ActionChunk::zeros();
    demo.steps[0] = [0.01, -0.02, 0.03, 0.05, 0.0, -0.05, 1.0];
    let draw = FlowDraw::sample(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[0xD4A])));
    let params: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let ctx = Ctx::bound(tape, &store, vars);
            let cond = Conditioning {
                h_vlm: tape.constant(h.clone()),
                l_action: tape.constant(l.clone()),
                proprio: [0.0, 0.1, 0.5, 0.0, 0.0, 0.0, 1.0],
            };
            e.flow_loss(&ctx, &demo, &draw, &cond)
        },
        &params,
        step,
        tol,
    )
}

fn run_grad_check(a: &GradCheckArgs) -> Result<()> {
    let (names, report): (Vec<String>, GradCheckReport) = match a.module {
        CheckModule::SplatRender => (
            ["centroid", "log_scale", "opacity"].map(String::from).to_vec(),
            grad_check_render(a.seed, 3, a.step, a.tol)?,
        ),
        CheckModule::DepthLoss => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(a.seed, &[0x51]));
            let r: Vec<f64> = (0..16).map(|_| rng.random_range(0.3..1.5)).collect();
            let t: Vec<f64> = (0..16).map(|_| rng.random_range(0.3..1.5)).collect();
            (
                vec!["rendered".into()],
                grad_check(|_, v| depth_loss(v[0], &t), &[Tensor::new(vec![16, 1], r)?], a.step, a.tol)?,
            )
        }
        CheckModule::ActionExpert => {
            let r = expert_check(a.seed, a.step, a.tol)?;
            ((0..r.entries.len()).map(|i| format!("param_{i}")).collect(), r)
        }
    };
    let mut text = String::from("param\tmax_rel_err\tmax_abs_err\tresult\n");
    for (n, e) in names.iter().zip(&report.entries) {
        text.push_str(&format!(
            "{n}\t{:.3e}\t{:.3e}\t{}\n",
            e.max_rel_err,
            e.max_abs_err,
            if e.passed { "pass" } else { "fail" }
        ));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write(&out.join("grad_check.tsv"), &text)?;
        snapshot(out, true, "grad-check", a, None)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check failed: max relative error {:.3e} above {:e}",
            report.max_rel_err(),
            a.tol
        )))
    }
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    require(&a.grid)?;
    let base = load_config(a.config.as_deref())?;
    let text = std::fs::read_to_string(&a.grid).map_err(|e| Error::io(&a.grid, e))?;
    let cells = parse_grid(&text, &base)?;
    note(format!("{} cells", cells.len()));
    snapshot(&a.out, true, "ablate", a, Some(&base))?;
    std::fs::copy(&a.grid, a.out.join("grid.toml")).map_err(|e| Error::io(&a.grid, e))?;
    let rows = ablation_matrix(
        &cells,
        EvalOptions {
            depth_rays: a.depth_rays,
            seed: a.seed,
        },
    )?;
    let t = table(&rows);
    write(&a.out.join("ablation.tsv"), &t)?;
    print!("{t}");
    Ok(())
}

fn export_gaussians(a: &SceneArgs) -> Result<()> {
    let (policy, p) = scene_input(&a.checkpoint, &a.scene)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &policy.store);
    let (field, _) = policy.gst.tokenize_parts(&ctx, &p.sample.features, &p.anchors, &p.mip)?;
    write_ply(&a.out, &field.centroids.value(), &field.log_scales.value(), &field.opacity.value())?;
    snapshot(&a.out, false, "export-gaussians", a, None)?;
    println!("wrote {} primitives to {}", field.centroids.shape()[0], a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ChainReport {
    tokens: Vec<Option<usize>>,
    ground_truth_tokens: Vec<usize>,
    decoded: splatvla::reasoner::vocab::ChainValues,
    ground_truth: splatvla::reasoner::vocab::ChainValues,
    metrics: splatvla::reasoner::ChainMetrics,
}

fn decode_chain(a: &SceneArgs) -> Result<()> {
    let (policy, p) = scene_input(&a.checkpoint, &a.scene)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &policy.store);
    let enc = policy.encode(&ctx, &p)?;
    let decoded = policy.reasoner.greedy(&ctx, enc.prefix, enc.keys)?;
    let gt = &p.sample.chain_values;
    let rep = ChainReport {
        tokens: decoded.tokens.to_vec(),
        ground_truth_tokens: ThoughtChain::encode(gt).tokens.to_vec(),
        decoded: decoded.chain_or(&ThoughtChain::encode(gt)).decode()?,
        ground_truth: gt.clone(),
        metrics: chain_metrics(&decoded.tokens, gt, policy.cfg.reasoner.flags)?,
    };
    let text = to_toml(&rep)?;
    write(&a.out, &text)?;
    snapshot(&a.out, false, "decode-chain", a, None)?;
    println!(
        "token_acc {:.4} centroid_err_m {:.4}",
        rep.metrics.token_acc, rep.metrics.centroid_err_m
    );
    Ok(())
}

#[derive(Serialize)]
struct RolloutReport {
    open_loop_err_m: f64,
    open_loop: Vec<[f64; 3]>,
    closed_loop: Vec<[f64; 3]>,
    demo: Vec<[f64; 3]>,
}

fn rollout(a: &RolloutArgs) -> Result<()> {
    let (policy, mut p) = scene_input(&a.checkpoint, &a.scene)?;
    let start = [p.sample.proprio[0], p.sample.proprio[1], p.sample.proprio[2]];
    let act = |p: &Prepared, k: u64| {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &policy.store);
        policy.act(&ctx, p, derive(a.seed, &[0xAC7, k])).map(|(_, c)| c)
    };
    let first = act(&p, 0)?;
    let demo = p.sample.action_gt.positions(start);
    let mut history: Vec<AgedChunk> = Vec::new();
    let mut closed = Vec::new();
    let ens = &policy.cfg.expert;
    for k in 0..a.steps {
        for h in &mut history {
            h.age += 1;
        }
        let chunk = if k == 0 { first.clone() } else { act(&p, k as u64)? };
        history.push(AgedChunk { chunk, age: 0 });
        let u = temporal_ensemble(&history, ens.ensemble_dt, ens.control_rate_hz)?;
        let s = &mut p.sample.proprio;
        for i in 0..ACTION_DIM - 1 {
            s[i] += u[i];
        }
        s[ACTION_DIM - 1] = u[ACTION_DIM - 1].clamp(0.0, 1.0);
        closed.push([s[0], s[1], s[2]]);
        note(format!("step {k} position {:?}", closed[k]));
    }
    let rep = RolloutReport {
        open_loop_err_m: rollout_error(&first, &p.sample.action_gt, start),
        open_loop: first.positions(start),
        closed_loop: closed,
        demo,
    };
    write(&a.out, &to_toml(&rep)?)?;
    snapshot(&a.out, false, "rollout", a, None)?;
    println!("open_loop_err_m {:e}", rep.open_loop_err_m);
    Ok(())
}

/// Little-endian PFM, bottom row first.
fn write_pfm(path: &Path, width: usize, height: usize, v: &[f64]) -> Result<()> {
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for r in (0..height).rev() {
        for x in &v[r * width..(r + 1) * width] {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn render(a: &SceneArgs) -> Result<()> {
    let (policy, p) = scene_input(&a.checkpoint, &a.scene)?;
    let d = &p.sample.depth;
    let n = d.width * d.height;
    let rays = rays_from_depth(d, &p.sample.intrinsics, n, 0)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &policy.store);
    let (field, _) = policy.gst.tokenize_parts(&ctx, &p.sample.features, &p.anchors, &p.mip)?;
    let out = render_depth(field.centroids, field.log_scales, field.opacity, &rays, RenderOptions::default())?;
    let loss = depth_loss(out.rendered, &rays.target_depths)?.item();
    let mut img = vec![0.0; n];
    for (k, id) in rays.pixel_ids.iter().enumerate() {
        img[*id] = out.rendered.value().data()[k];
    }
    write_pfm(&a.out, d.width, d.height, &img)?;
    snapshot(&a.out, false, "render-depth", a, None)?;
    println!("depth_loss {loss:e}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::GradCheck(a) => run_grad_check(a),
        Command::Ablate(a) => run_ablate(a),
        Command::ExportGaussians(a) => export_gaussians(a),
        Command::DecodeChain(a) => decode_chain(a),
        Command::Rollout(a) => rollout(a),
        Command::RenderDepth(a) => render(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match &e {
                Error::MissingPath(_) => ("missing_path", 2),
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing_path", 2),
                Error::Config(_) | Error::Parse { .. } => ("config", 2),
                Error::Diverged { .. } => ("diverged", 1),
                _ => ("runtime", 1),
            };
            eprintln!("error: {kind}: {}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
