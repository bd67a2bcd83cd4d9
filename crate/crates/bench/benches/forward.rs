use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tetnp::data::{KernelFamily, KernelSpec};
use tetnp::gp::gp_predictive_ll;
use tetnp::models::Variant;
use tetnp::{Tape, Tensor};
use tetnp_bench::{desk_model, gradient_step, task};

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for variant in Variant::ALL {
        let model = desk_model(variant);
        for context in [16, 64] {
            let t = task(context, 128, 1);
            group.bench_with_input(
                BenchmarkId::new(variant.to_string(), context),
                &t,
                |b, t| b.iter(|| model.predict(black_box(t)).unwrap()),
            );
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    group.sample_size(10);
    let t = task(32, 128, 2);
    for variant in [Variant::Cnp, Variant::Tnp, Variant::TeTnp, Variant::TePtTnp] {
        let model = desk_model(variant);
        group.bench_function(variant.to_string(), |b| {
            b.iter(|| gradient_step(&model, black_box(&t)))
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::new([n, 64], (0..n * 64).map(|i| (i % 11) as f64 - 5.0).collect()).unwrap();
        let w = Tensor::new([64, 64], (0..64 * 64).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::no_grad();
                tape.constant(a.clone())
                    .matmul(&tape.constant(w.clone()))
                    .unwrap()
                    .value()
                    .data()[0]
            })
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let spec = KernelSpec::new(KernelFamily::Se, 0.5, 0.2).unwrap();
    let t = task(64, 128, 3);
    c.bench_function("gp oracle 64x128", |b| {
        b.iter(|| gp_predictive_ll(&spec, &t.xc, &t.yc, &t.xt, &t.yt).unwrap())
    });
}

criterion_group!(benches, predict, train_step, matmul, oracle);
criterion_main!(benches);
