use crackcnn::net::{Gradients, Workspace};
use crackcnn::train::{cross_entropy_loss, Adam, AdamConfig};
use crackcnn::{Network, NetworkConfig, Rng};
use crackcnn_bench::{input, labels};
use criterion::{criterion_group, criterion_main, Criterion};

fn step(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    let mut net = Network::new(NetworkConfig::standard(2), &mut Rng::new(1)).unwrap();
    let x = input(&[16, 3, 228, 228]);
    let y = labels(16, 2);

    g.bench_function("forward batch 16", |b| b.iter(|| net.forward(&x).unwrap()));

    let mut ws = Workspace::new();
    let mut grads = Gradients::new();
    let mut opt = Adam::new(&net, AdamConfig::default()).unwrap();
    g.bench_function("train step batch 16", |b| {
        b.iter(|| {
            let fwd = net.forward_train(&x, &mut ws).unwrap();
            let loss = cross_entropy_loss(&fwd.probs, &y).unwrap();
            net.backward(&mut ws, &loss.dlogits, false, &mut grads)
                .unwrap();
            opt.step(&mut net, &grads).unwrap();
        })
    });
    g.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
