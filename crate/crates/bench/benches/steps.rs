use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use crossgrad::autograd::Tape;
use crossgrad::nets::{init_params, Role};
use crossgrad::trainers::{crossgrad_step, erm_step, Method, OptimizerState, TrainerConfig};
use crossgrad::Tensor;
use crossgrad_bench::{clouds, first_batch, net_for};

fn tape_affine(c: &mut Criterion) {
    let x = Tensor::new(vec![64, 128], (0..64 * 128).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    let w = Tensor::new(vec![128, 64], (0..128 * 64).map(|i| (i % 5) as f64 * 0.01).collect()).unwrap();
    let b = Tensor::zeros(&[64]);
    c.bench_function("tape affine+relu+sum forward/backward 64x128x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let h = tape.affine(xi, wi, bi).unwrap();
            let r = tape.relu(h);
            let s = tape.sum(r);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn steps(c: &mut Criterion) {
    let ds = clouds();
    let net = net_for(&ds);
    let batch = first_batch(&ds, 32);

    let erm = TrainerConfig {
        method: Method::Baseline,
        ..TrainerConfig::default()
    };
    let mut theta_l = init_params(&net, Role::Label { uses_g: false }, 0).unwrap();
    let mut opt = OptimizerState::new(&theta_l);
    c.bench_function("erm_step batch 32", |bench| {
        bench.iter(|| erm_step(&net, &mut theta_l, None, &batch, &erm, &mut opt).unwrap())
    });

    let cg = TrainerConfig::default();
    let mut theta_l = init_params(&net, Role::Label { uses_g: true }, 0).unwrap();
    let mut theta_d = init_params(&net, Role::Domain, 0).unwrap();
    let mut opt_l = OptimizerState::new(&theta_l);
    let mut opt_d = OptimizerState::new(&theta_d);
    c.bench_function("crossgrad_step batch 32", |bench| {
        bench.iter(|| {
            crossgrad_step(&net, &mut theta_l, &mut theta_d, &batch, &cg, &mut opt_l, &mut opt_d).unwrap()
        })
    });
}

criterion_group!(benches, tape_affine, steps);
criterion_main!(benches);
