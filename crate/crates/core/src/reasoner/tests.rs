use super::vocab::*;
use super::*;
use crate::autodiff::Tape;
use crate::gst::{Gst, GstConfig};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::scene_synth::{generate, SceneSample, SceneSpec};
use crate::tensor::Tensor;

const D_F: usize = 12;

fn gst_cfg() -> GstConfig {
    GstConfig {
        feature_dim: D_F,
        token_dim: 16,
        num_tokens: 16,
        ..Default::default()
    }
}

fn small_cfg() -> ReasonerConfig {
    ReasonerConfig {
        layers: 1,
        width: 16,
        heads: 2,
        ..Default::default()
    }
}

fn build(cfg: &ReasonerConfig, seed: u64) -> (ParamStore, Gst, Reasoner) {
    let g = gst_cfg();
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, seed, "");
    let gst = Gst::new(&mut pb, &g).unwrap();
    let r = Reasoner::new(&mut pb, cfg, g.token_dim, g.feature_dim, g.num_tokens).unwrap();
    (store, gst, r)
}

fn sample(seed: u64) -> SceneSample {
    generate(&SceneSpec::random(seed), D_F).unwrap()
}

#[test]
fn zero_initialized_injection_is_a_plain_projection() {
    let (store, gst, r) = build(&small_cfg(), 1);
    let s = sample(2);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (_, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let f = ctx.constant(s.features.clone());
    let prefix = r.inject(&ctx, pooled.tokens, f, s.target_class(), &s.proprio).unwrap();
    assert_eq!(prefix.shape(), vec![16 + INSTRUCTION_LEN + 1, 16]);
    assert_eq!(r.prefix_len(), 16 + INSTRUCTION_LEN + 1);
    let w = store.by_name("reasoner.inject.proj.w").unwrap();
    let b = store.by_name("reasoner.inject.proj.b").unwrap();
    let z = pooled.tokens.value();
    let direct = z.matmul(w).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let want = direct.at2(i, j) + b.data()[j];
            assert!((prefix.value().at2(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn instruction_class_only_changes_its_slot() {
    let (store, gst, r) = build(&small_cfg(), 1);
    let s = sample(2);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (_, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let f = ctx.constant(s.features.clone());
    let a = r.inject(&ctx, pooled.tokens, f, 1, &s.proprio).unwrap().value();
    let b = r.inject(&ctx, pooled.tokens, f, 4, &s.proprio).unwrap().value();
    let class_row = 16 + 1;
    for i in 0..a.rows() {
        let same = a.row(i) == b.row(i);
        assert_eq!(same, i != class_row, "row {i}");
    }
}

fn chain_of(s: &SceneSample) -> ThoughtChain {
    s.chain_gt.clone()
}

#[test]
fn disabling_c4_drops_eighteen_supervised_positions() {
    let s = sample(4);
    let mut counts = Vec::new();
    for flags in [ThoughtFlags::default(), ThoughtFlags([true, true, true, false])] {
        let cfg = ReasonerConfig { flags, ..small_cfg() };
        let (store, gst, r) = build(&cfg, 1);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
        let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
        let fwd = r.teacher_forced(&ctx, prefix, field.raw_tokens, &chain_of(&s)).unwrap();
        assert_eq!(fwd.logits.shape()[0], fwd.targets.len());
        assert_eq!(fwd.l_action.shape(), vec![NUM_ACT, 16]);
        counts.push(fwd.targets.len());
    }
    assert_eq!(counts, vec![29, 11]);
}

#[test]
fn dacot_key_source_follows_config() {
    let s = sample(4);
    for (raw, keys) in [(true, 256), (false, 16)] {
        let cfg = ReasonerConfig { dacot_attends_raw: raw, ..small_cfg() };
        let (store, gst, r) = build(&cfg, 1);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
        let kv = r.dacot_keys(field.raw_tokens, pooled.tokens);
        assert_eq!(kv.shape()[0], keys);
        let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
        assert!(r.teacher_forced(&ctx, prefix, kv, &chain_of(&s)).is_ok());
    }
}

#[test]
fn uniform_logits_cost_log_vocab_per_position() {
    let (mut store, gst, r) = build(&small_cfg(), 1);
    let w = store.id("reasoner.head.w").unwrap();
    let b = store.id("reasoner.head.b").unwrap();
    store.get_mut(w).scale_in_place(0.0);
    store.get_mut(b).scale_in_place(0.0);
    let s = sample(5);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
    let fwd = r.teacher_forced(&ctx, prefix, field.raw_tokens, &chain_of(&s)).unwrap();
    let l = cot_loss(&ctx, &fwd).unwrap().item();
    assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let tape = Tape::new();
    let store = ParamStore::new();
    let ctx = Ctx::inference(&tape, &store);
    let targets = vec![3, 70, 110];
    let mut t = Tensor::zeros(&[3, VOCAB_SIZE]);
    for (i, &k) in targets.iter().enumerate() {
        t.row_mut(i)[k] = 60.0;
    }
    let fwd = ChainForward {
        logits: tape.var(t),
        targets,
        h_vlm: tape.constant(Tensor::zeros(&[1, 1])),
        l_action: tape.constant(Tensor::zeros(&[1, 1])),
    };
    assert!(cot_loss(&ctx, &fwd).unwrap().item() < 1e-20);
}

#[test]
fn no_thoughts_means_zero_loss_and_no_gradient() {
    let cfg = ReasonerConfig { flags: ThoughtFlags::NONE, ..small_cfg() };
    let (store, gst, r) = build(&cfg, 1);
    let trainable = vec![true; store.len()];
    let s = sample(5);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Some(&trainable));
    let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
    let fwd = r.teacher_forced(&ctx, prefix, field.raw_tokens, &chain_of(&s)).unwrap();
    let l = cot_loss(&ctx, &fwd).unwrap();
    assert_eq!(l.item(), 0.0);
    assert!(!l.requires_grad());
}

#[test]
fn later_teacher_tokens_do_not_leak_backwards() {
    let (store, gst, r) = build(&small_cfg(), 3);
    let s = sample(6);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
    let a = chain_of(&s);
    let mut b = a.clone();
    // Change every token from content position 12 on.
    for t in b.tokens.iter_mut().skip(12) {
        *t = if *t + 1 < ANGLE_BASE || (*t >= ANGLE_BASE && *t + 1 < BOS) { *t + 1 } else { *t - 1 };
    }
    let la = r.teacher_forced(&ctx, prefix, field.raw_tokens, &a).unwrap().logits.value();
    let lb = r.teacher_forced(&ctx, prefix, field.raw_tokens, &b).unwrap().logits.value();
    // Logit row i predicts content token i from positions before it.
    for i in 0..=12 {
        assert_eq!(la.row(i), lb.row(i), "row {i}");
    }
    assert_ne!(la.row(13), lb.row(13));
}

#[test]
fn greedy_chains_always_parse() {
    for seed in 0..3 {
        let (store, gst, r) = build(&small_cfg(), seed);
        let s = sample(seed + 10);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
        let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), 0, &s.proprio).unwrap();
        let d = r.greedy(&ctx, prefix, field.raw_tokens).unwrap();
        assert!(d.tokens.iter().all(|t| t.is_some()));
        let chain = d.chain_or(&s.chain_gt);
        assert!(chain.decode().is_ok());
        assert_eq!(d.l_action.shape(), vec![NUM_ACT, 16]);
        // Greedy picks are the teacher-forced arg-max within each slot.
        let fwd = r.teacher_forced(&ctx, prefix, field.raw_tokens, &chain).unwrap();
        let logits = fwd.logits.value();
        let slots = content_slots();
        for i in 0..CONTENT_LEN {
            let row = logits.row(i);
            let best = slots[i].range().max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
            assert!((row[best] - row[chain.tokens[i]]).abs() < 1e-12);
        }
        assert!(d.l_action.value().data().iter().zip(fwd.l_action.value().data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

/// Independent de-quantization: bin centre from the token index.
fn centre(token: usize) -> f64 {
    COORD_MIN + (token as f64 + 0.5) * COORD_STEP
}

#[test]
fn metrics_match_brute_force_dequantization() {
    let s = sample(7);
    let gt = &s.chain_values;
    let exact: [Option<usize>; CONTENT_LEN] = std::array::from_fn(|i| Some(s.chain_gt.tokens[i]));
    let m = chain_metrics(&exact, gt, ThoughtFlags::default()).unwrap();
    assert!(m.centroid_err_m <= 0.01 * 3f64.sqrt());
    assert_eq!(m.token_acc, 1.0);
    let mut off = exact;
    off[1] = Some(s.chain_gt.tokens[1] + 1);
    let m = chain_metrics(&off, gt, ThoughtFlags::default()).unwrap();
    let want = ((centre(s.chain_gt.tokens[0]) - gt.centroid[0]).powi(2)
        + (centre(s.chain_gt.tokens[1] + 1) - gt.centroid[1]).powi(2)
        + (centre(s.chain_gt.tokens[2]) - gt.centroid[2]).powi(2))
    .sqrt();
    assert!((m.centroid_err_m - want).abs() < 1e-12);
    // Target centroids sit on bin centres, so one bin off is one bin width.
    assert!((m.centroid_err_m - 0.02).abs() < 1e-9);
    assert!((m.token_acc - 28.0 / 29.0).abs() < 1e-12);
    let mut bad = exact;
    bad[0] = Some(BOS);
    assert!(chain_metrics(&bad, gt, ThoughtFlags::default()).is_err());
}

#[test]
fn cot_gradients_reach_the_primitive_estimator() {
    let (store, gst, r) = build(&small_cfg(), 9);
    let trainable = vec![true; store.len()];
    let s = sample(8);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Some(&trainable));
    let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
    let prefix = r.inject(&ctx, pooled.tokens, ctx.constant(s.features.clone()), s.target_class(), &s.proprio).unwrap();
    let fwd = r.teacher_forced(&ctx, prefix, field.raw_tokens, &s.chain_gt).unwrap();
    tape.backward(cot_loss(&ctx, &fwd).unwrap()).unwrap();
    let grads = ctx.grads();
    let est: Vec<_> = grads.iter().filter(|(id, _)| store.name(*id).starts_with("gst.estimator")).collect();
    assert!(!est.is_empty());
    assert!(est.iter().any(|(_, g)| g.max_abs() > 0.0));
}
