//! Hot kernels: convolution, the cost model and one supernet step.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nasforge_core::net::{evaluate, BnMode, NetPlan};
use nasforge_core::space::{preset_x3d_s, SearchSpace};
use nasforge_core::tensor::{Conv3dConfig, Tape, Tensor};
use nasforge_core::{cost_report, ArchParams, PatternMode, Supernet, SupernetConfig, TensorShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[8, 16, 4, 16, 16], 1.0, &mut rng);
    let dense = Tensor::randn(&[16, 16, 1, 1, 1], 0.1, &mut rng);
    let depthwise = Tensor::randn(&[16, 1, 3, 3, 3], 0.1, &mut rng);
    for (name, k, cfg) in [
        ("conv/pointwise", &dense, Conv3dConfig::POINTWISE),
        ("conv/depthwise", &depthwise, Conv3dConfig::depthwise(16, 1)),
    ] {
        c.bench_function(&format!("{name}/forward"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
                black_box(tape.conv3d(xv, kv, cfg).unwrap());
            })
        });
        c.bench_function(&format!("{name}/backward"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
                let y = tape.conv3d(xv, kv, cfg).unwrap();
                let pooled = tape.global_avg_pool(y).unwrap();
                let n = tape.value(pooled).numel();
                let s = tape.reshape(pooled, &[n]).unwrap();
                let w = tape.leaf(Tensor::full(&[1, n], 1.0));
                let flat = tape.reshape(s, &[1, n]).unwrap();
                let bias = tape.leaf(Tensor::zeros(&[1]));
                let out = tape.linear(flat, w, bias).unwrap();
                let out = tape.reshape(out, &[1]).unwrap();
                black_box(tape.backward(out).unwrap());
            })
        });
    }
}

fn cost(c: &mut Criterion) {
    let space = SearchSpace::full();
    let arch = preset_x3d_s();
    let input = TensorShape::new(3, 13, 160, 160);
    c.bench_function("cost_report/x3d_s", |b| b.iter(|| black_box(cost_report(&space, &arch, input).unwrap())));
}

fn supernet_step(c: &mut Criterion) {
    let space = SearchSpace::toy_channels();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = ArchParams::init(&space).sample(&space, &mut rng).arch;
    let plan = net.activate(&arch).unwrap();
    let params = net.gather(&plan).unwrap();
    let x = Tensor::randn(&[8, space.input.c, space.input.t, space.input.s, space.input.s], 1.0, &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % space.head.classes).collect();
    let net_plan: &NetPlan = &plan.net;
    c.bench_function("supernet/toy_step", |b| {
        b.iter(|| black_box(evaluate(net_plan, &params, &x, &labels, BnMode::Batch, true).unwrap()))
    });
}

criterion_group!(benches, conv, cost, supernet_step);
criterion_main!(benches);
