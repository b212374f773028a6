//! The chain decoder can memorize a handful of scenes: teacher-forced
//! chain loss trends down over 200 Adam steps on four samples.

use splatvla::params::Ctx;
use splatvla::rng::rng_for;
use splatvla::scene_synth::SceneSpec;
use splatvla::trainer::{sample_draw, ActiveLosses, Adam, ModelConfig, Policy, Prepared};
use splatvla::Tape;

fn model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.gst.feature_dim = 12;
    m.gst.token_dim = 16;
    m.gst.num_tokens = 16;
    m.reasoner.layers = 1;
    m.reasoner.width = 32;
    m.reasoner.heads = 2;
    m.expert.layers = 1;
    m.expert.width = 8;
    m.expert.heads = 2;
    m.expert.experts = 4;
    m.expert.expert_hidden = 8;
    m
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn chain_loss_falls_when_overfitting_four_scenes() {
    let cfg = model();
    let mut policy = Policy::new(&cfg, 3).unwrap();
    let scenes: Vec<Prepared> = (0..4)
        .map(|i| Prepared::from_spec(&SceneSpec::random(100 + i), cfg.gst.feature_dim).unwrap())
        .collect();
    let active = ActiveLosses { flow: false, cot: true, depth: false };
    let mask = vec![true; policy.store.len()];
    let mut adam = Adam::new();
    let mut losses = Vec::new();
    for step in 0..200u64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &policy.store, Some(&mask));
        let mut rng = rng_for(1, &[step]);
        let mut total = None;
        for p in &scenes {
            let draw = sample_draw(&mut rng, p, active, 0).unwrap();
            let l = policy.losses(&ctx, p, &draw, active).unwrap().cot.unwrap().scale(0.25);
            total = Some(match total {
                None => l,
                Some(t) => l.add(t).unwrap(),
            });
        }
        let total = total.unwrap();
        losses.push(total.item());
        tape.backward(total).unwrap();
        let grads = ctx.grads();
        drop(ctx);
        adam.update(&mut policy.store, &grads, 3e-3);
    }
    assert!(losses.iter().all(|l| l.is_finite()));
    let first = mean(&losses[..20]);
    let last = mean(&losses[180..]);
    assert!(last < 0.3 * first, "first {first:.4} last {last:.4}");
    // Trend: each 40-step window averages below the one before it.
    let windows: Vec<f64> = losses.chunks(40).map(mean).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}
