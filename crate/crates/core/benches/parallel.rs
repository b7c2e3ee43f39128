use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dtss::data::{synthetic, SyntheticConfig};
use dtss::exec;
use dtss::model::{ForwardOptions, Model, ModelConfig};
use dtss::{Graph, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = dtss::rng::stream(seed, "bench");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn matmul(c: &mut Criterion) {
    let a = random(&[8, 64, 64], 1);
    let b = random(&[8, 64, 64], 2);
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.param(a.clone()), g.param(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap()
            });
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn conv(c: &mut Criterion) {
    let x = random(&[16, 16, 16, 16], 3);
    let w = random(&[32, 16, 3, 3], 4);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
                let z = g.conv2d(xv, wv, 1, 1).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap()
            });
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn model_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg, 2, 0).unwrap();
    let data = synthetic(&SyntheticConfig::default(), 0, "bench").unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let (images, _) = data.batch(&idx);
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(20);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                model
                    .forward(&mut g, &images, ForwardOptions::eval())
                    .unwrap()
                    .logits
            });
        });
    }
    group.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, matmul, conv, model_forward);
criterion_main!(benches);
