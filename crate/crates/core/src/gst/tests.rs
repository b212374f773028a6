use proptest::prelude::*;

use super::*;
use crate::autodiff::Tape;
use crate::params::ParamStore;
use crate::scene_synth::{generate, SceneSpec};

fn build(cfg: &GstConfig, seed: u64) -> (ParamStore, Gst) {
    let mut store = ParamStore::new();
    let gst = Gst::new(&mut ParamBuilder::new(&mut store, seed, ""), cfg).unwrap();
    (store, gst)
}

fn small_cfg() -> GstConfig {
    GstConfig {
        feature_dim: 12,
        token_dim: 16,
        num_tokens: 32,
        ..Default::default()
    }
}

fn sample(seed: u64, d_f: usize) -> SceneSample {
    generate(&SceneSpec::random(seed), d_f).unwrap()
}

#[test]
fn zero_final_layer_gives_neutral_primitives() {
    let cfg = small_cfg();
    let (store, gst) = build(&cfg, 1);
    let s = sample(3, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let p = gst.estimate_params(&ctx, tape.constant(s.features.clone())).unwrap();
    assert!(p.residual.value().data().iter().all(|v| *v == 0.0));
    assert!(p.log_scales.value().data().iter().all(|v| v.abs() < 1e-15));
    assert!(p.logit.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn paper_width_arithmetic() {
    let cfg = GstConfig { feature_dim: 1152, ..Default::default() };
    assert_eq!(cfg.mip_dim(), 3456);
    assert_eq!(cfg.pe_dim(), 36);
    assert_eq!(cfg.concat_dim(), 1192);
    assert_eq!(cfg.estimator_widths(), [1152, 1152, 768, 576, 7]);
    assert_eq!(GstConfig::default().concat_dim(), 72);
}

#[test]
fn fourier_code_at_origin_and_unit_x() {
    let z = fourier_pe_values(&[0.0; 3], 6);
    assert_eq!(z.len(), 36);
    for l in 0..6 {
        assert_eq!(&z[6 * l..6 * l + 6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
    let x = fourier_pe_values(&[1.0, 0.0, 0.0], 6);
    assert!(x[0].abs() < 1e-12);
    assert!((x[3] + 1.0).abs() < 1e-12);
}

#[test]
fn fourier_var_matches_values() {
    let tape = Tape::new();
    let c = [0.13, -0.07, 0.55];
    let v = fourier_pe(tape.constant(Tensor::new(vec![1, 3], c.to_vec()).unwrap()), 6).unwrap();
    assert_eq!(v.value().data(), fourier_pe_values(&c, 6).as_slice());
}

#[test]
fn fourier_code_is_injective_on_centimetre_grid() {
    // 100 distinct points of the 1 cm workspace lattice.
    let pts: Vec<[f64; 3]> = (0..100)
        .map(|i| {
            let a = (i * 37) % 100;
            [0.01 * (a as f64 - 50.0), 0.01 * ((i * 13 % 100) as f64 - 50.0), 0.2 + 0.01 * ((i * 71) % 80) as f64]
        })
        .collect();
    let codes: Vec<Vec<f64>> = pts.iter().map(|p| fourier_pe_values(p, 6)).collect();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if pts[i] == pts[j] {
                continue;
            }
            let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d > 1e-6, "points {:?} and {:?} share a code", pts[i], pts[j]);
        }
    }
}

#[test]
fn residual_mode_zero_pins_centroids_to_anchors() {
    let cfg = GstConfig { residual_mode: ResidualMode::Zero, ..small_cfg() };
    let (mut store, gst) = build(&cfg, 2);
    // Make the residual head active so the flag is what zeroes it.
    let last = gst.estimator.layers.last().unwrap().w;
    store.get_mut(last).data_mut().iter_mut().for_each(|v| *v = 0.3);
    let s = sample(4, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (field, _) = gst.tokenize(&ctx, &s).unwrap();
    assert_eq!(*field.centroids.value(), sample_anchors(&s).unwrap());
}

#[test]
fn isotropic_mode_equalizes_scales() {
    let cfg = GstConfig { scale_mode: ScaleMode::Isotropic, ..small_cfg() };
    let (mut store, gst) = build(&cfg, 3);
    let last = gst.estimator.layers.last().unwrap().w;
    let n = store.get(last).len();
    for (i, v) in store.get_mut(last).data_mut().iter_mut().enumerate() {
        *v = ((i * 7919) % n) as f64 / n as f64 - 0.5;
    }
    let s = sample(5, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let p = gst.estimate_params(&ctx, tape.constant(s.features.clone())).unwrap();
    let sig = p.log_scales.value();
    // Reference: anisotropic heads from the same parameters, then averaged.
    let aniso = Gst { cfg: small_cfg(), ..gst.clone() };
    let pa = aniso.estimate_params(&ctx, tape.constant(s.features.clone())).unwrap();
    let sa = pa.log_scales.value();
    for k in 0..sig.rows() {
        let mean = (sa.at2(k, 0) + sa.at2(k, 1) + sa.at2(k, 2)) / 3.0;
        for j in 0..3 {
            assert!((sig.at2(k, j) - mean).abs() < 1e-12);
        }
    }
    assert!((sa.at2(0, 0) - sa.at2(0, 1)).abs() > 1e-6);
}

#[test]
fn uniform_features_with_zero_head_give_half_opacity() {
    let cfg = small_cfg();
    let (mut store, gst) = build(&cfg, 4);
    for l in &gst.opacity_head.layers {
        store.get_mut(l.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(l.b.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let features = Tensor::full(&[NUM_PATCHES, cfg.feature_dim], 0.4);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let anchors = Tensor::full(&[NUM_PATCHES, 3], 0.5);
    let (field, _) = gst.tokenize_parts(&ctx, &features, &anchors, &multi_scale_input(&features)).unwrap();
    assert!(field.opacity.value().data().iter().all(|a| (a - 0.5).abs() < 1e-15));
}

#[test]
fn fixed_opacity_mode() {
    let cfg = GstConfig { opacity_mode: OpacityMode::FixedOne, ..small_cfg() };
    let (store, gst) = build(&cfg, 5);
    let s = sample(6, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (field, _) = gst.tokenize(&ctx, &s).unwrap();
    assert!(field.opacity.value().data().iter().all(|a| *a == FIXED_OPACITY));
}

#[test]
fn opacity_flag_leaves_other_heads_bit_identical() {
    let (sa, ga) = build(&small_cfg(), 9);
    let (sb, gb) = build(&GstConfig { opacity_mode: OpacityMode::FixedOne, ..small_cfg() }, 9);
    let s = sample(7, 12);
    let (ta, tb) = (Tape::new(), Tape::new());
    let (ca, cb) = (Ctx::inference(&ta, &sa), Ctx::inference(&tb, &sb));
    let pa = ga.estimate_params(&ca, ta.constant(s.features.clone())).unwrap();
    let pb = gb.estimate_params(&cb, tb.constant(s.features.clone())).unwrap();
    assert_eq!(*pa.residual.value(), *pb.residual.value());
    assert_eq!(*pa.log_scales.value(), *pb.log_scales.value());
}

#[test]
fn multi_scale_input_uses_grid_blocks() {
    let mut f = Tensor::zeros(&[NUM_PATCHES, 1]);
    for k in 0..NUM_PATCHES {
        f.data_mut()[k] = k as f64;
    }
    let m = multi_scale_input(&f);
    assert_eq!(m.cols(), 3);
    // Patch (row 1, col 1): 2×2 block {0, 1, 16, 17}; 4×4 block rows/cols 0..4.
    let k = 17;
    assert_eq!(m.at2(k, 0), 17.0);
    assert_eq!(m.at2(k, 1), (0.0 + 1.0 + 16.0 + 17.0) / 4.0);
    let four: f64 = (0..4).flat_map(|r| (0..4).map(move |c| (r * 16 + c) as f64)).sum::<f64>() / 16.0;
    assert_eq!(m.at2(k, 2), four);
}

#[test]
fn identity_padded_projection_of_zero_inputs_is_zero() {
    let cfg = small_cfg();
    let (mut store, gst) = build(&cfg, 6);
    let w = store.get_mut(gst.token_proj.w);
    let cols = cfg.token_dim;
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = if i / cols == i % cols { 1.0 } else { 0.0 };
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let z = |c| tape.constant(Tensor::zeros(&[NUM_PATCHES, c]));
    let t = gst
        .form_raw_tokens(&ctx, z(cfg.feature_dim), z(36), z(3), z(1), &Tensor::zeros(&[NUM_PATCHES, 3]))
        .unwrap();
    assert_eq!(t.shape(), vec![NUM_PATCHES, cfg.token_dim]);
    assert!(t.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn identical_keys_pool_to_common_value() {
    let cfg = small_cfg();
    let (store, gst) = build(&cfg, 7);
    let row: Vec<f64> = (0..cfg.token_dim).map(|i| (i as f64 * 0.3).sin()).collect();
    let raw = Tensor::new(vec![NUM_PATCHES, cfg.token_dim], row.iter().cycle().take(NUM_PATCHES * cfg.token_dim).copied().collect()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let pooled = gst.pool(&ctx, tape.constant(raw.clone())).unwrap();
    let v = raw.slice_rows(0, 1).matmul(store.get(gst.pool_value.w)).unwrap();
    let out = pooled.tokens.value();
    for i in 0..cfg.num_tokens {
        for j in 0..cfg.token_dim {
            assert!((out.at2(i, j) - v.data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_rows_are_distributions_at_full_size() {
    let cfg = GstConfig::default();
    let (store, gst) = build(&cfg, 8);
    let s = sample(8, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let (_, pooled) = gst.tokenize(&ctx, &s).unwrap();
    assert_eq!(pooled.attention.shape(), &[128, 256]);
    for i in 0..128 {
        let r = pooled.attention.row(i);
        assert!(r.iter().all(|a| *a >= 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn average_pooling_returns_block_means() {
    let cfg = GstConfig { pool_mode: PoolMode::Average, ..small_cfg() };
    let (store, gst) = build(&cfg, 9);
    let b = NUM_PATCHES / cfg.num_tokens;
    let mut raw = Tensor::zeros(&[NUM_PATCHES, cfg.token_dim]);
    for k in 0..NUM_PATCHES {
        for j in 0..cfg.token_dim {
            raw.row_mut(k)[j] = ((k / b) * 3 + j) as f64 * 0.01 + (k % b) as f64 * 1e-3;
        }
    }
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let out = gst.pool(&ctx, tape.constant(raw.clone())).unwrap().tokens.value();
    for i in 0..cfg.num_tokens {
        for j in 0..cfg.token_dim {
            let mean: f64 = (i * b..(i + 1) * b).map(|k| raw.at2(k, j)).sum::<f64>() / b as f64;
            assert!((out.at2(i, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn learned_positional_table_ignores_depth() {
    let cfg = GstConfig { pe_mode: PeMode::Learned2d, ..small_cfg() };
    let (store, gst) = build(&cfg, 10);
    let s = sample(11, cfg.feature_dim);
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let a = sample_anchors(&s).unwrap();
    let mip = multi_scale_input(&s.features);
    let far = a.map(|x| x * 1.7);
    let c1 = gst.positional(&ctx, ctx.constant(a)).unwrap().value();
    let c2 = gst.positional(&ctx, ctx.constant(far)).unwrap().value();
    assert_eq!(c1, c2);
    assert_eq!(c1.shape(), &[NUM_PATCHES, 36]);
    let _ = mip;
}

#[test]
fn tokenizer_is_deterministic() {
    let cfg = small_cfg();
    let s = sample(12, cfg.feature_dim);
    let run = || {
        let (store, gst) = build(&cfg, 11);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let (f, p) = gst.tokenize(&ctx, &s).unwrap();
        ((*f.raw_tokens.value()).clone(), (*p.tokens.value()).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn scaled_depth_scales_anchors() {
    let mut s = sample(13, 8);
    let a = sample_anchors(&s).unwrap();
    s.depth.data.iter_mut().for_each(|d| *d *= 1.25);
    let b = sample_anchors(&s).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((y - 1.25 * x).abs() < 1e-12);
    }
}

#[test]
fn ply_export_has_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.ply");
    let c = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let s = Tensor::zeros(&[2, 3]);
    let a = Tensor::new(vec![2, 1], vec![0.25, 0.75]).unwrap();
    write_ply(&p, &c, &s, &a).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let text_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    let header = std::str::from_utf8(&bytes[..text_end]).unwrap();
    assert!(header.contains("element vertex 2"));
    assert_eq!(bytes.len() - text_end, 2 * 7 * 8);
    let v = |i: usize| f64::from_le_bytes(bytes[text_end + 8 * i..text_end + 8 * i + 8].try_into().unwrap());
    assert_eq!(v(3), 1.0);
    assert_eq!(v(13), 0.75);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_bound_and_scale_range_hold_for_any_weights(seed in 0u64..500, gain in 0.1f64..50.0) {
        let cfg = small_cfg();
        let (mut store, gst) = build(&cfg, seed);
        for l in &gst.estimator.layers {
            let w = store.get_mut(l.w);
            let n = w.len();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = gain * (((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5) / (n as f64).sqrt();
            }
        }
        let s = sample(seed % 20, cfg.feature_dim);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let (field, pooled) = gst.tokenize(&ctx, &s).unwrap();
        let a = sample_anchors(&s).unwrap();
        for (c, p) in field.centroids.value().data().iter().zip(a.data()) {
            // Exact bound on the residual; the subtraction adds one rounding.
            prop_assert!((c - p).abs() <= CENTROID_RESIDUAL_MAX + 1e-15);
        }
        for v in field.log_scales.value().data() {
            prop_assert!(*v >= LOG_SCALE_MIN && *v <= LOG_SCALE_MAX);
        }
        for v in field.opacity.value().data() {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        for i in 0..cfg.num_tokens {
            let r = pooled.attention.row(i);
            prop_assert!(r.iter().all(|x| *x >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
