use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mixquant_core::gemm::fast_i2f;
use mixquant_core::mixed_layer::partition_matrix;
use mixquant_core::rng::PortableRng;
use mixquant_core::{
    execute_prepared, random_assignment, I2fMode, LayerSchemes, Matrix, PreparedLayer, QuantScheme,
    TileConfig,
};

fn i2f(c: &mut Criterion) {
    let xs: Vec<i32> = (-(1 << 15)..(1 << 15)).map(|x| x * 61).collect();
    let mut g = c.benchmark_group("i2f");
    g.throughput(Throughput::Elements(xs.len() as u64));
    g.bench_function("native", |b| {
        b.iter(|| black_box(&xs).iter().map(|&x| x as f32).sum::<f32>())
    });
    g.bench_function("fast", |b| {
        b.iter(|| black_box(&xs).iter().map(|&x| fast_i2f(x)).sum::<f32>())
    });
    g.finish();
}

fn mixed_gemm(c: &mut Criterion) {
    let (m, n, k) = (32, 1024, 1024);
    let mut rng = PortableRng::new(1);
    let w = Matrix::from_vec(n, k, (0..n * k).map(|_| 0.05 * rng.normal()).collect()).unwrap();
    let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
    let act = QuantScheme::sym8();
    let mut g = c.benchmark_group("mixed_gemm");
    g.throughput(Throughput::Elements((2 * m * n * k) as u64));
    g.sample_size(20);
    for percent in [0.0, 0.1, 1.0] {
        let asg = random_assignment(&[("w".to_string(), n)], percent, 7).unwrap();
        let layer = partition_matrix("w", &w, &asg.layers[0], &LayerSchemes::default()).unwrap();
        let prepared = PreparedLayer::new(layer, TileConfig::default()).unwrap();
        for mode in [I2fMode::Native, I2fMode::Fast] {
            let id = BenchmarkId::new(format!("{mode:?}").to_lowercase(), format!("p{}", (percent * 100.0) as u32));
            g.bench_with_input(id, &prepared, |b, p| {
                b.iter(|| execute_prepared(black_box(&a), m, p, &act, mode).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, i2f, mixed_gemm);
criterion_main!(benches);
