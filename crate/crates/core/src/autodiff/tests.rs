use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{concat_cols, concat_rows};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Keeps inputs at least 1e-3 away from a non-smooth or singular locus.
fn away_from(t: Tensor, locus: f64) -> Tensor {
    t.map(|x| if (x - locus).abs() < 1e-3 { locus + 0.1 } else { x })
}

fn check<F>(f: F, params: &[Tensor])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = grad_check(f, params, 1e-5, 1e-5).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let y = x.softmax_lastdim().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_of_zero_is_half() {
    let tape = Tape::new();
    let w = tape.var(Tensor::scalar(2.0));
    let s = tape.constant(Tensor::scalar(0.0)).sigmoid();
    assert_eq!(s.item(), 0.5);
    let loss = s.mul(w).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(w.grad().unwrap().item(), 0.5);
}

#[test]
fn identity_matmul_is_identity() {
    let tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let v = tape.var(Tensor::matrix(3, 2, vec![1., -2., 3.5, 0., 9., 1e-3]).unwrap());
    assert_eq!(*i3.matmul(v).unwrap().value(), *v.value());
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    let loss = x.mul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    let y = x.exp();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_twice_is_an_error_until_reset() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
    tape.reset_grads();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().item(), 6.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[3, 2]));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn grad_check_square() {
    let report = grad_check(
        |_, v| Ok(v[0].mul(v[0])?.sum()),
        &[Tensor::scalar(3.0)],
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.max_rel_err() < 1e-8);
}

#[test]
fn grad_check_constant_function() {
    let report = grad_check(
        |t, v| Ok(v[0].scale(0.0).sum().add(t.constant(Tensor::scalar(4.0)))?),
        &[Tensor::vector(vec![0.3, -0.7])],
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.entries[0].max_abs_err <= 1e-10);
}

#[test]
fn grad_check_flags_non_finite_without_crashing() {
    // log(x) at x = 5e-6 with step 1e-5 evaluates log of a negative number.
    let report = grad_check(|_, v| Ok(v[0].log().sum()), &[Tensor::scalar(5e-6)], 1e-5, 1e-5)
        .unwrap();
    assert!(!report.passed());
    assert_eq!(report.entries[0].non_finite, 1);
}

#[test]
fn grad_check_rejects_step_out_of_range() {
    assert!(grad_check(|_, v| Ok(v[0].sum()), &[Tensor::scalar(1.0)], 1e-2, 1e-4).is_err());
}

#[test]
fn primitive_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4], -3.0, 3.0);
    let b = rand_tensor(&mut rng, &[4, 2], -3.0, 3.0);
    let c = rand_tensor(&mut rng, &[3, 4], -3.0, 3.0);
    let row = rand_tensor(&mut rng, &[4], -3.0, 3.0);
    let col = rand_tensor(&mut rng, &[3, 1], -3.0, 3.0);
    // Weight the outputs so that sum() does not hide sign-symmetric errors.
    let w34 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);

    check(|_, v| Ok(v[0].matmul(v[1])?.sum()), &[a.clone(), b.clone()]);
    check(
        |_, v| Ok(v[0].matmul_ex(v[1], true, false)?.sum()),
        &[rand_tensor(&mut rng, &[4, 3], -3.0, 3.0), b.clone()],
    );
    check(
        |_, v| Ok(v[0].matmul_t(v[1])?.sin().sum()),
        &[a.clone(), rand_tensor(&mut rng, &[5, 4], -3.0, 3.0)],
    );
    check(|t, v| Ok(v[0].add(v[1])?.mul(t.constant(w34.clone()))?.sum()), &[a.clone(), c.clone()]);
    check(|t, v| Ok(v[0].sub(v[1])?.mul(t.constant(w34.clone()))?.sum()), &[a.clone(), c.clone()]);
    check(|_, v| Ok(v[0].mul(v[1])?.sum()), &[a.clone(), c.clone()]);
    check(|t, v| Ok(v[0].add_row(v[1])?.mul(t.constant(w34.clone()))?.sum()), &[a.clone(), row.clone()]);
    check(|t, v| Ok(v[0].mul_row(v[1])?.mul(t.constant(w34.clone()))?.sum()), &[a.clone(), row.clone()]);
    check(|t, v| Ok(v[0].mul_col(v[1])?.mul(t.constant(w34.clone()))?.sum()), &[a.clone(), col.clone()]);
    check(|t, v| Ok(v[0].scale(-1.7).add_scalar(0.3).mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].exp().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(
        |t, v| Ok(v[0].log().mul(t.constant(w34.clone()))?.sum()),
        &[rand_tensor(&mut rng, &[3, 4], 0.05, 3.0)],
    );
    check(|t, v| Ok(v[0].sin().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].cos().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].sigmoid().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].tanh().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].gelu().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].silu().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|t, v| Ok(v[0].softmax_lastdim().mul(t.constant(w34.clone()))?.sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].mean()), &[a.clone()]);
    check(|_, v| Ok(v[0].sum_rows().sin().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].transpose().matmul(v[1])?.sin().sum()), &[a.clone(), c.clone()]);
    check(|_, v| Ok(v[0].reshape(&[4, 3])?.matmul(v[1])?.sin().sum()), &[a.clone(), c.clone()]);
    check(
        |_, v| Ok(concat_cols(&[v[0], v[1]])?.sin().sum()),
        &[a.clone(), rand_tensor(&mut rng, &[3, 2], -3.0, 3.0)],
    );
    check(
        |_, v| Ok(concat_rows(&[v[0], v[1]])?.cos().sum()),
        &[a.clone(), rand_tensor(&mut rng, &[2, 4], -3.0, 3.0)],
    );
    check(|_, v| Ok(v[0].slice_cols(1, 3)?.sin().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].slice_rows(1, 3)?.sin().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].gather_rows(&[2, 0, 2])?.sin().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].scatter_rows(&[1, 1, 4], 5)?.sin().sum()), &[a.clone()]);
    check(
        |t, v| Ok(v[0].layer_norm(v[1], v[2])?.mul(t.constant(w34.clone()))?.sum()),
        &[a.clone(), row.clone(), rand_tensor(&mut rng, &[4], -1.0, 1.0)],
    );
    check(|_, v| v[0].cross_entropy(&[0, 3, 1], &[1.0, 0.5, 2.0]), &[a.clone()]);
}

#[test]
fn log_matches_fd_away_from_its_singularity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = away_from(rand_tensor(&mut rng, &[6], 0.0, 3.0), 0.0);
    check(|_, v| Ok(v[0].log().sum()), &[a]);
}

fn mlp<'t>(x: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>> {
    let h = x.matmul(p[0])?.add_row(p[1])?.gelu();
    let h = h.matmul(p[2])?.add_row(p[3])?.tanh();
    Ok(h.matmul(p[4])?.add_row(p[5])?.sum())
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let params = vec![
        rand_tensor(&mut rng, &[5, 6], -0.5, 0.5),
        rand_tensor(&mut rng, &[6], -0.5, 0.5),
        rand_tensor(&mut rng, &[6, 4], -0.5, 0.5),
        rand_tensor(&mut rng, &[4], -0.5, 0.5),
        rand_tensor(&mut rng, &[4, 1], -0.5, 0.5),
        rand_tensor(&mut rng, &[1], -0.5, 0.5),
    ];
    let report = grad_check(
        |t, v| mlp(t.constant(x.clone()), v),
        &params,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn accumulation_is_linear_over_independent_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let x1 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let x2 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);

    let grad_of = |xs: &[&Tensor]| {
        let tape = Tape::new();
        let wv = tape.var(w.clone());
        let mut total: Option<Var<'_>> = None;
        for x in xs {
            let l = tape.constant((*x).clone()).matmul(wv).unwrap().tanh().sum();
            total = Some(match total {
                Some(t) => t.add(l).unwrap(),
                None => l,
            });
        }
        tape.backward(total.unwrap()).unwrap();
        wv.grad().unwrap()
    };
    let joint = grad_of(&[&x1, &x2]);
    let mut separate = grad_of(&[&x1]);
    separate.add_assign(&grad_of(&[&x2]));
    for (a, b) in joint.data().iter().zip(separate.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let shapes: [&[usize]; 6] = [&[5, 6], &[6], &[6, 4], &[4], &[4, 1], &[1]];
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, -0.5, 0.5)).collect();
        let tape = Tape::new();
        let p: Vec<Var<'_>> = params.iter().map(|t| tape.var(t.clone())).collect();
        let loss = mlp(tape.constant(x), &p).unwrap();
        tape.backward(loss).unwrap();
        let mut bits = vec![loss.item().to_bits()];
        for v in &p {
            bits.extend(v.grad().unwrap().data().iter().map(|g| g.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn elementwise_chain_matches_fd(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let t = Tensor::new(vec![2, 3], vals).unwrap();
            let report = grad_check(
                |_, v| Ok(v[0].sin().mul(v[0].sigmoid())?.exp().softmax_lastdim().silu().sum()),
                &[t],
                1e-5,
                1e-5,
            ).unwrap();
            prop_assert!(report.passed(), "{}", report);
        }
    }
}
