use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lot_core::{
    analytic_gradient, forward_lot, gaussian_pyramid, inverse_lot, objective, solve_multiscale,
    DensityGrid, GridGeometry, PotentialField, SolverConfig,
};

fn blob(n: usize, cx: f64, cy: f64, s: f64) -> DensityGrid {
    let g = GridGeometry::new(n, n).unwrap();
    DensityGrid::from_fn(g, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
        .unwrap()
        .normalize_mass(1.0, 1e-3 / (n * n) as f64)
        .unwrap()
}

fn perturbed(n: usize, sigma: f64) -> PotentialField {
    let g = GridGeometry::new(n, n).unwrap();
    let coeffs = (0..n * n).map(|i| 0.01 * ((i * 7919 % 101) as f64 / 50.0 - 1.0)).collect();
    PotentialField::new(g, sigma, coeffs).unwrap()
}

fn evaluation(c: &mut Criterion) {
    for n in [32, 64] {
        let (i0, i1) = (blob(n, 0.45, 0.5, 0.1), blob(n, 0.55, 0.5, 0.1));
        let p = perturbed(n, 2.0);
        c.bench_function(&format!("objective {n}x{n}"), |b| {
            b.iter(|| objective(black_box(&p), &i0, &i1).unwrap())
        });
        c.bench_function(&format!("gradient {n}x{n}"), |b| {
            b.iter(|| analytic_gradient(black_box(&p), &i0, &i1).unwrap())
        });
    }
}

fn solving(c: &mut Criterion) {
    let (i0, i1) = (blob(32, 0.45, 0.5, 0.1), blob(32, 0.55, 0.5, 0.1));
    let mut single = SolverConfig::single_scale(2.0, 0.05);
    single.max_iters = 100;
    let mut multi = SolverConfig::multi_scale(vec![6.0, 2.0], vec![0.5, 0.05]);
    multi.max_iters = 100;
    let mut g = c.benchmark_group("solve 32x32, 100 iterations");
    g.sample_size(10);
    g.bench_function("single scale", |b| b.iter(|| solve_multiscale(&i0, &i1, &single).unwrap()));
    g.bench_function("two scales", |b| b.iter(|| solve_multiscale(&i0, &i1, &multi).unwrap()));
    g.finish();
}

fn transforms(c: &mut Criterion) {
    let img = blob(64, 0.55, 0.45, 0.12);
    c.bench_function("pyramid 64x64, 3 levels", |b| {
        b.iter(|| gaussian_pyramid(black_box(&img), 3, 1.0).unwrap())
    });
    let reference = blob(64, 0.5, 0.5, 0.2);
    let mut cfg = SolverConfig::single_scale(2.0, 0.05);
    cfg.max_iters = 50;
    let e = forward_lot(&img, &reference, &cfg).unwrap();
    c.bench_function("inverse lot 64x64", |b| b.iter(|| inverse_lot(black_box(&e)).unwrap()));
}

criterion_group!(benches, evaluation, solving, transforms);
criterion_main!(benches);
