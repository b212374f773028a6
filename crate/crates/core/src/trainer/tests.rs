use super::*;
use crate::params::ParamStore;
use crate::rng::derive;
use crate::Tape;
use crate::Tensor;

pub(crate) fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 5;
    cfg.model.gst.feature_dim = 8;
    cfg.model.gst.token_dim = 8;
    cfg.model.gst.num_tokens = 16;
    cfg.model.reasoner.layers = 1;
    cfg.model.reasoner.width = 8;
    cfg.model.reasoner.heads = 2;
    cfg.model.expert.layers = 1;
    cfg.model.expert.width = 8;
    cfg.model.expert.heads = 2;
    cfg.model.expert.experts = 4;
    cfg.model.expert.expert_hidden = 8;
    cfg.data = DataConfig {
        train_scenes: 4,
        val_scenes: 2,
        rays_per_sample: 16,
    };
    for (p, steps) in cfg.stages.iter_mut().zip([3, 2, 2]) {
        p.steps = steps;
        p.batch_size = 2;
    }
    cfg
}

fn tiny_data(cfg: &TrainConfig) -> Dataset {
    Dataset::synthetic(cfg.seed, cfg.data.train_scenes, cfg.data.val_scenes, cfg.model.gst.feature_dim).unwrap()
}

fn log_text(lines: &[MetricLine]) -> Vec<String> {
    lines.iter().map(|l| l.to_string()).collect()
}

#[test]
fn weights_combine_hand_values() {
    let w = LossWeights::default();
    assert!((w.combine(1.0, 2.0, 3.0) - 2.3).abs() < 1e-12);
    assert_eq!(w.combine(0.0, 0.0, 0.0), 0.0);
    assert!(LossWeights { cot: -1.0, depth: 0.1 }.validate().is_err());
}

fn constant_losses<'t>(tape: &'t Tape, flow: Option<f64>, cot: Option<f64>, depth: Option<f64>) -> SampleLosses<'t> {
    let c = |x: Option<f64>| x.map(|v| tape.var(Tensor::scalar(v)));
    SampleLosses {
        flow: c(flow),
        cot: c(cot),
        depth: c(depth),
    }
}

#[test]
fn composite_matches_weighted_sum_and_skips_inactive_terms() {
    let store = ParamStore::new();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let w = LossWeights::default();
    let (l, b) = composite_loss(&ctx, &constant_losses(&tape, Some(1.0), Some(2.0), Some(3.0)), &w).unwrap();
    assert!((l.item() - 2.3).abs() < 1e-12);
    assert!((w.combine(b.flow, b.cot, b.depth) - b.total).abs() < 1e-12);
    // Stage-one objective: no chain term.
    let (l, b) = composite_loss(&ctx, &constant_losses(&tape, Some(0.7), None, Some(0.4)), &w).unwrap();
    assert!((l.item() - (0.7 + 0.1 * 0.4)).abs() < 1e-12);
    assert_eq!(b.cot, 0.0);
    let (l, _) = composite_loss(&ctx, &constant_losses(&tape, Some(0.0), Some(0.0), Some(0.0)), &w).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn composite_gradient_carries_the_weights() {
    let store = ParamStore::new();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let losses = constant_losses(&tape, Some(1.0), Some(2.0), Some(3.0));
    let (l, _) = composite_loss(&ctx, &losses, &LossWeights::default()).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(losses.flow.unwrap().grad().unwrap().item(), 1.0);
    assert_eq!(losses.cot.unwrap().grad().unwrap().item(), 0.5);
    assert_eq!(losses.depth.unwrap().grad().unwrap().item(), 0.1);
}

#[test]
fn non_finite_component_is_named() {
    let store = ParamStore::new();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let err = composite_loss(&ctx, &constant_losses(&tape, Some(1.0), Some(f64::NAN), None), &LossWeights::default())
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("cot")), "{err}");
}

#[test]
fn stage_plans_enforce_stage_rules() {
    for s in [Stage::S1, Stage::S2, Stage::S3] {
        StagePlan::standard(s).validate().unwrap();
    }
    let mut p = StagePlan::standard(Stage::S1);
    p.trainable.push(Group::Reasoner);
    assert!(p.validate().is_err());
    let mut p = StagePlan::standard(Stage::S1);
    p.losses.push(LossKind::Cot);
    assert!(p.validate().is_err());
    let mut p = StagePlan::standard(Stage::S2);
    p.losses.retain(|l| *l != LossKind::Depth);
    assert!(p.validate().is_err());
    let mut p = StagePlan::standard(Stage::S3);
    p.trainable.retain(|g| *g != Group::Gst);
    assert!(p.validate().is_err());
    let mut p = StagePlan::standard(Stage::S3);
    p.steps = 0;
    assert!(p.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.stages[2].learning_rate = 2e-4;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.stages.swap(0, 1);
    assert!(cfg.validate().is_err());
}

#[test]
fn default_schedule_keeps_step_and_batch_ratios() {
    let cfg = TrainConfig::default();
    let steps: Vec<usize> = cfg.stages.iter().map(|p| p.steps).collect();
    let batch: Vec<usize> = cfg.stages.iter().map(|p| p.batch_size).collect();
    let lr: Vec<f64> = cfg.stages.iter().map(|p| p.learning_rate).collect();
    assert_eq!(steps, [4000, 2000, 1000]);
    assert_eq!(batch, [16, 8, 4]);
    assert_eq!(lr, [3e-4, 1e-4, 3e-5]);
    assert_eq!(cfg.clip_norm, 1.0);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny_config();
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let text = format!("{}\nbogus = 1\n", cfg.to_toml());
    assert!(TrainConfig::from_toml(&text).is_err());
    assert!(TrainConfig::from_toml("[model.gst]\nnum_tokens = 100\npool_mode = \"average\"\n").is_err());
}

#[test]
fn resolved_stages_follow_flags() {
    let mut cfg = TrainConfig::default();
    cfg.skip_s1 = true;
    cfg.freeze_gst_in_s2 = true;
    let r = cfg.resolved_stages();
    assert_eq!(r.iter().map(|p| p.stage).collect::<Vec<_>>(), [Stage::S2, Stage::S3]);
    assert!(!r[0].trainable.contains(&Group::Gst));
    assert!(r[1].trainable.contains(&Group::Gst));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
    let g = Tensor::vector(vec![0.3, -4.0, 0.0]);
    let mut adam = Adam::new();
    adam.update(&mut store, &[(id, g.clone())], 0.1);
    let w = store.get(id).data().to_vec();
    // m̂ = g and v̂ = g² after one step.
    for (i, (w0, gi)) in [1.0f64, -2.0, 0.5].iter().zip(g.data()).enumerate() {
        let expect = w0 - 0.1 * gi / (gi.abs() + EPSILON);
        assert!((w[i] - expect).abs() < 1e-15, "{i}");
    }
    // Second step from the hand-rolled recursion.
    let g2 = Tensor::vector(vec![-0.1, 1.0, 2.0]);
    adam.update(&mut store, &[(id, g2.clone())], 0.1);
    for i in 0..3 {
        let (a, b) = (g.data()[i], g2.data()[i]);
        let m = BETA1 * (1.0 - BETA1) * a + (1.0 - BETA1) * b;
        let v = BETA2 * (1.0 - BETA2) * a * a + (1.0 - BETA2) * b * b;
        let mh = m / (1.0 - BETA1 * BETA1);
        let vh = v / (1.0 - BETA2 * BETA2);
        let prev = [1.0f64, -2.0, 0.5][i] - 0.1 * a / (a.abs() + EPSILON);
        let expect = prev - 0.1 * mh / (vh.sqrt() + EPSILON);
        assert!((store.get(id).data()[i] - expect).abs() < 1e-14, "{i}");
    }
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![
        (crate::params::ParamId(0), Tensor::vector(vec![3.0, 0.0])),
        (crate::params::ParamId(1), Tensor::vector(vec![0.0, 4.0])),
    ];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15 && g[0].1.data()[1] == 0.0);
    let mut small = vec![(crate::params::ParamId(0), Tensor::vector(vec![0.1]))];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].1.data(), &[0.1]);
}

#[test]
fn adam_state_survives_checkpoint() {
    let cfg = tiny_config();
    let policy = Policy::new(&cfg.model, 1).unwrap();
    let mut store = policy.store.clone();
    let id = store.ids().next().unwrap();
    let mut adam = Adam::new();
    let g = Tensor::full(store.get(id).shape(), 0.2);
    adam.update(&mut store, &[(id, g)], 1e-3);
    let mut ck = crate::params::Checkpoint::new();
    adam.save_into(&store, &mut ck);
    let back = crate::params::Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(Adam::load_from(&store, &back).unwrap(), adam);
}

#[test]
fn group_masks_partition_parameters() {
    let cfg = tiny_config();
    let p = Policy::new(&cfg.model, 1).unwrap();
    let all = p.mask(&Group::ALL);
    assert!(all.iter().all(|b| *b), "every parameter belongs to a group");
    let g = p.mask(&[Group::Gst]);
    let r = p.mask(&[Group::Reasoner]);
    let e = p.mask(&[Group::Expert]);
    for i in 0..all.len() {
        assert_eq!(u8::from(g[i]) + u8::from(r[i]) + u8::from(e[i]), 1);
    }
}

#[test]
fn stage_one_leaves_the_reasoner_bit_identical() {
    let mut cfg = tiny_config();
    cfg.stages.truncate(1);
    let data = tiny_data(&cfg);
    let fresh = Policy::new(&cfg.model, derive(cfg.seed, &[0x1A17])).unwrap();
    let out = train(&cfg, &data, TrainOptions::default()).unwrap();
    let rep = &out.stages[0];
    assert_eq!(rep.frozen.len(), 1);
    let (g, before, after) = rep.frozen[0];
    assert_eq!(g, Group::Reasoner);
    assert_eq!(before, after);
    assert_eq!(out.policy.checksum(Group::Reasoner), fresh.checksum(Group::Reasoner));
    assert_ne!(out.policy.checksum(Group::Gst), fresh.checksum(Group::Gst));
    assert_ne!(out.policy.checksum(Group::Expert), fresh.checksum(Group::Expert));
    for l in &out.log {
        assert_eq!(l.loss.cot, 0.0);
        let w = LossWeights::default();
        assert!((w.combine(l.loss.flow, l.loss.cot, l.loss.depth) - l.loss.total).abs() < 1e-12);
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let a = train(&cfg, &data, TrainOptions::default()).unwrap();
    let b = train(&cfg, &data, TrainOptions::default()).unwrap();
    assert_eq!(log_text(&a.log), log_text(&b.log));
    assert_eq!(a.log.len(), 7);
    let mut other = cfg.clone();
    other.seed = 6;
    let c = train(&other, &data, TrainOptions::default()).unwrap();
    assert_ne!(log_text(&a.log), log_text(&c.log));
}

#[test]
fn resume_reproduces_the_remaining_log() {
    let mut cfg = tiny_config();
    cfg.checkpoint_every = 1;
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &data, TrainOptions::default()).unwrap();
    let cut = 4; // one step into the second stage
    let partial = train(
        &cfg,
        &data,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(cut),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(partial.log.len(), cut);
    let ck = crate::params::Checkpoint::load(&dir.path().join(format!("step_{cut:06}.ckpt"))).unwrap();
    let resumed = train(
        &cfg,
        &data,
        TrainOptions {
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(log_text(&resumed.log), log_text(&full.log[cut..]));
    assert_eq!(resumed.policy.store.to_map(), full.policy.store.to_map());
}

#[test]
fn metrics_log_and_snapshot_are_written() {
    let mut cfg = tiny_config();
    cfg.skip_s1 = true;
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &cfg,
        &data,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let snap = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(snap.contains("# s1 absent"));
    assert!(snap.contains("# stages run: s2 s3"));
    assert_eq!(TrainConfig::from_toml(&snap).unwrap(), cfg);
    let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + out.log.len());
    assert!(out.log.iter().all(|l| l.stage != Stage::S1));
    for (text, l) in lines[1..].iter().zip(&out.log) {
        let cols: Vec<&str> = text.split(' ').collect();
        assert_eq!(cols.len(), 7);
        let total: f64 = cols[1].parse().unwrap();
        assert_eq!(total, l.loss.total);
    }
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn later_stage_without_checkpoint_is_rejected() {
    let mut cfg = tiny_config();
    cfg.stages.remove(0);
    let data = tiny_data(&cfg);
    assert!(matches!(train(&cfg, &data, TrainOptions::default()), Err(Error::Config(_))));
    let init = Policy::new(&cfg.model, 3).unwrap().to_checkpoint();
    let out = train(
        &cfg,
        &data,
        TrainOptions {
            init: Some(init),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.log.len(), 4);
}

#[test]
fn divergence_halts_and_keeps_last_good_checkpoint() {
    let mut cfg = tiny_config();
    cfg.divergence_threshold = 1e-9;
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &cfg,
        &data,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    let ck = crate::params::Checkpoint::load(&dir.path().join("last_good.ckpt")).unwrap();
    let fresh = Policy::new(&cfg.model, derive(cfg.seed, &[0x1A17])).unwrap();
    assert_eq!(fresh.to_checkpoint().tensors, ck.tensors.into_iter().filter(|(k, _)| k.starts_with("param/")).collect());
}

#[test]
fn evaluation_reports_finite_metrics() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let p = Policy::new(&cfg.model, 2).unwrap();
    let opts = EvalOptions {
        depth_rays: Some(64),
        seed: 1,
    };
    let a = evaluate(&p, &data.val, opts).unwrap();
    assert!(a.depth_loss.is_finite() && a.depth_loss >= 0.0);
    assert!((0.0..=1.0).contains(&a.chain.token_acc));
    assert!(a.rollout_err_m.is_finite());
    assert_eq!(a, evaluate(&p, &data.val, opts).unwrap());
    assert_eq!(a.composite(), 100.0 * a.rollout_err_m);
}

#[test]
fn rollout_error_of_the_demo_is_zero() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let s = &data.val[0].sample;
    let start = [s.proprio[0], s.proprio[1], s.proprio[2]];
    assert_eq!(rollout_error(&s.action_gt, &s.action_gt, start), 0.0);
    let mut shifted = s.action_gt.clone();
    shifted.steps[0][0] += 0.01;
    // The offset persists through every cumulative position.
    assert!((rollout_error(&shifted, &s.action_gt, start) - 0.01).abs() < 1e-12);
}

const GRID: &str = r#"
[[cell]]
name = "full"

[[cell]]
name = "isotropic"
[cell.set.model.gst]
scale_mode = "isotropic"
"#;

#[test]
fn grid_cells_merge_over_the_base() {
    let base = tiny_config();
    let cells = parse_grid(GRID, &base).unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0].1, base);
    assert_eq!(cells[1].1.model.gst.scale_mode, crate::gst::ScaleMode::Isotropic);
    assert_eq!(cells[1].1.model.reasoner, base.model.reasoner);
}

#[test]
fn isotropic_cell_equalizes_scale_heads() {
    let base = tiny_config();
    let cells = parse_grid(GRID, &base).unwrap();
    let cfg = &cells[1].1;
    let data = tiny_data(cfg);
    let p = Policy::new(&cfg.model, 4).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &p.store);
    let (field, _) = p.gst.tokenize_parts(&ctx, &data.val[0].sample.features, &data.val[0].anchors, &data.val[0].mip).unwrap();
    let s = field.log_scales.value();
    let mut spread = 0.0f64;
    for i in 0..s.rows() {
        spread = spread.max((s.at2(i, 0) - s.at2(i, 1)).abs()).max((s.at2(i, 0) - s.at2(i, 2)).abs());
    }
    assert!(spread < 1e-12, "{spread}");
}

#[test]
fn invalid_cells_are_rejected_at_parse() {
    let base = tiny_config();
    let bad_combo = "[[cell]]\nname = \"x\"\n[cell.set.model.gst]\npool_mode = \"average\"\nnum_tokens = 15\n";
    assert!(parse_grid(bad_combo, &base).is_err());
    let unknown = "[[cell]]\nname = \"x\"\n[cell.set.model.gst]\nwarp = 2\n";
    assert!(parse_grid(unknown, &base).is_err());
    let dup = "[[cell]]\nname = \"x\"\n[[cell]]\nname = \"x\"\n";
    assert!(parse_grid(dup, &base).is_err());
    assert!(parse_grid("", &base).is_err());
    let s1_reasoner = "[[cell]]\nname = \"x\"\n[[cell.set.stages]]\nstage = \"s1\"\nsteps = 1\nlearning_rate = 1e-3\nbatch_size = 1\ntrainable = [\"reasoner\"]\nlosses = [\"flow\"]\n";
    assert!(parse_grid(s1_reasoner, &base).is_err());
}

#[test]
fn ablation_matrix_has_one_row_per_cell() {
    let mut base = tiny_config();
    for p in &mut base.stages {
        p.steps = 1;
    }
    let cells = parse_grid(GRID, &base).unwrap();
    let rows = ablation_matrix(
        &cells,
        EvalOptions {
            depth_rays: Some(32),
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    let t = table(&rows);
    assert_eq!(t.lines().count(), 3);
    assert_eq!(t.lines().next().unwrap(), TABLE_HEADER);
    assert!(t.lines().nth(2).unwrap().starts_with("isotropic\t"));
}
