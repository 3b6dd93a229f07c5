//! Finite-difference checks of every differentiable operation and of a
//! whole network built from MBConv and GloRe blocks.

use nasforge_core::net::{evaluate, BnMode, LayerKind, LayerPlan, NetPlan};
use nasforge_core::tensor::{finite_diff_check, Conv3dConfig, Tape, Tensor, Var};
use nasforge_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Input tensor whose entries stay clear of the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Projects the output of `build` onto a fixed random direction so the
/// check sees every output element, then compares tape gradients against
/// central differences.
fn check_op<F>(params: Vec<Tensor>, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let y = build(&mut tape, &vars).expect("forward");
        let n = tape.value(y).numel();
        Tensor::randn(&[1, n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let n = tape.value(y).numel();
        let flat = tape.reshape(y, &[1, n])?;
        let w = tape.leaf(probe.clone());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let loss = tape.linear(flat, w, b)?;
        let loss = tape.reshape(loss, &[1])?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().zip(ps).map(|(v, p)| grads.get_or_zeros(*v, p.shape())).collect()))
    };
    let report = finite_diff_check(f, &params, EPS, TOL).expect("gradient check runs");
    assert!(report.passed, "max relative error {:e} at {:?}", report.max_rel_error, report.worst);
    report.max_rel_error
}

#[test]
fn square_at_three() {
    let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let x = ps[0].data()[0];
        Ok((x * x, vec![Tensor::scalar(2.0 * x)]))
    };
    let report = finite_diff_check(f, &[Tensor::scalar(3.0)], EPS, TOL).unwrap();
    assert!((report.numeric - 6.0).abs() < 1e-6);
    assert!(report.passed);
}

#[test]
fn dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 3, 3, 4, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 3, 3, 3, 3], 0.5, &mut rng);
    check_op(vec![x, k], 11, |t, v| t.conv3d(v[0], v[1], Conv3dConfig { stride: 1, groups: 1 }));
}

#[test]
fn strided_depthwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 4, 5, 5, 5], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 1, 3, 5, 5], 0.5, &mut rng);
    check_op(vec![x, k], 12, |t, v| t.conv3d(v[0], v[1], Conv3dConfig::depthwise(4, 2)));
}

#[test]
fn pointwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[2, 3, 2, 3, 3], 1.0, &mut rng);
    let k = Tensor::randn(&[5, 3, 1, 1, 1], 0.5, &mut rng);
    check_op(vec![x, k], 13, |t, v| t.conv3d(v[0], v[1], Conv3dConfig::POINTWISE));
}

#[test]
fn convolution_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..6 {
        let c = rng.random_range(1..4);
        let groups = if rng.random_bool(0.5) { c } else { 1 };
        let c_out = if groups == 1 { rng.random_range(1..4) } else { c };
        let kt = [1, 3][rng.random_range(0..2)];
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let x = Tensor::randn(&[rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6)], 1.0, &mut rng);
        let k = Tensor::randn(&[c_out, c / groups, kt, ks, ks], 0.5, &mut rng);
        check_op(vec![x, k], 100 + case, move |t, v| t.conv3d(v[0], v[1], Conv3dConfig { stride, groups }));
    }
}

#[test]
fn batch_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[3, 2, 2, 3, 3], 2.0, &mut rng);
    let gamma = Tensor::randn(&[2], 1.0, &mut rng);
    let beta = Tensor::randn(&[2], 1.0, &mut rng);
    check_op(vec![x, gamma, beta], 14, |t, v| Ok(t.batchnorm(v[0], v[1], v[2])?.0));
}

#[test]
fn frozen_batch_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[3, 2, 2, 3, 3], 2.0, &mut rng);
    let gamma = Tensor::randn(&[2], 1.0, &mut rng);
    let beta = Tensor::randn(&[2], 1.0, &mut rng);
    let stats = {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(x.clone()), tape.leaf(gamma.clone()), tape.leaf(beta.clone()));
        tape.batchnorm(a, b, c).unwrap().1
    };
    check_op(vec![x, gamma, beta], 15, move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &stats));
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = away_from_zero(&[2, 3, 2, 2, 2], &mut rng);
    check_op(vec![x.clone()], 16, |t, v| Ok(t.relu(v[0])));
    check_op(vec![x], 17, |t, v| Ok(t.swish(v[0])));
}

#[test]
fn add_scale_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    check_op(vec![a, b], 18, |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, -0.7);
        let s = t.add(s, v[0])?;
        t.reshape(s, &[4, 6])
    });
}

#[test]
fn average_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[2, 3, 2, 3, 3], 1.0, &mut rng);
    check_op(vec![x], 19, |t, v| t.global_avg_pool(v[0]));
}

#[test]
fn fully_connected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[4], 1.0, &mut rng);
    check_op(vec![x, w, b], 20, |t, v| t.linear(v[0], v[1], v[2]));
}

#[test]
fn batched_and_broadcast_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
    let m = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
    check_op(vec![a.clone(), b], 21, |t, v| t.matmul(v[0], v[1], false, true));
    check_op(vec![m, a.clone()], 22, |t, v| t.matmul(v[0], v[1], false, false));
    let c = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
    check_op(vec![a, c], 23, |t, v| t.matmul(v[0], v[1], true, false));
}

#[test]
fn cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::randn(&[4, 3], 2.0, &mut rng);
    let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let l = tape.leaf(ps[0].clone());
        let ce = tape.softmax_cross_entropy(l, &[0, 2, 1, 2])?;
        let g = tape.backward(ce.var)?;
        Ok((ce.loss, vec![g.get_or_zeros(l, ps[0].shape())]))
    };
    assert!(finite_diff_check(f, &[logits], EPS, TOL).unwrap().passed);
}

/// Stem, residual and strided MBConv blocks, a GloRe unit and the head.
fn block_plan() -> NetPlan {
    let layer = |label: &str, kind| LayerPlan { label: label.into(), kind };
    NetPlan {
        input: [3, 3, 4],
        layers: vec![
            layer("stem", LayerKind::Stem { c_in: 3, c_out: 4, stride: 1 }),
            layer("g1.b1", LayerKind::Block { c_in: 4, c_mid: 8, c_out: 4, kt: 3, ks: 3, stride: 1 }),
            layer("g1.glore", LayerKind::GloRe { channels: 4, state: 2, nodes: 1 }),
            layer("g2.b1", LayerKind::Block { c_in: 4, c_mid: 6, c_out: 8, kt: 3, ks: 5, stride: 2 }),
            layer("g2.glore", LayerKind::GloRe { channels: 8, state: 4, nodes: 2 }),
            layer("head", LayerKind::Head { c_in: 8, pool: 8, fc: 6, classes: 4 }),
        ],
    }
}

fn block_inputs() -> (NetPlan, Vec<Tensor>, Tensor, Vec<usize>) {
    let plan = block_plan();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut params = plan.init_params(&mut rng);
    // Non-trivial affine terms so every path carries gradient.
    for p in params.iter_mut().filter(|p| p.shape().len() == 1) {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = Tensor::randn(&[3, 3, 3, 4, 4], 1.0, &mut rng);
    (plan, params, x, vec![0, 3, 1])
}

#[test]
fn mbconv_glore_network() {
    let (plan, params, x, labels) = block_inputs();
    let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let e = evaluate(&plan, ps, &x, &labels, BnMode::Batch, true)?;
        Ok((e.loss, e.grads))
    };
    let report = finite_diff_check(f, &params, EPS, TOL).unwrap();
    assert!(report.checked > 500);
    assert!(report.passed, "max relative error {:e} at {:?}", report.max_rel_error, report.worst);
}

#[test]
fn corrupted_block_gradient_is_caught() {
    let (plan, params, x, labels) = block_inputs();
    let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut e = evaluate(&plan, ps, &x, &labels, BnMode::Batch, true)?;
        let g = &mut e.grads[3].data_mut()[0];
        *g = *g * 1.01 + 1e-3;
        Ok((e.loss, e.grads))
    };
    assert!(!finite_diff_check(f, &params, EPS, TOL).unwrap().passed);
}

#[test]
fn gradients_are_deterministic() {
    let (plan, params, x, labels) = block_inputs();
    let a = evaluate(&plan, &params, &x, &labels, BnMode::Batch, true).unwrap();
    let b = evaluate(&plan, &params, &x, &labels, BnMode::Batch, true).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.grads, b.grads);
}
