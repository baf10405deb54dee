use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use splineop_bench::recovery_model;
use splineop_core::pde::{solve_pde, solve_subsystem_pde, PdeSettings};
use splineop_core::stochastic::{mc_estimate, random_sine_dynamics};
use splineop_core::surrogate::{l2_project, point_stencil};
use splineop_core::{BasisSpec, Interval};

fn spline(c: &mut Criterion) {
    let unit = Interval { lo: 0.0, hi: 1.0 };
    let basis = BasisSpec::uniform(&[(24, 3, unit), (24, 3, unit)]).unwrap();
    c.bench_function("point_stencil_2d_order2", |b| b.iter(|| point_stencil(&basis, black_box(&[0.37]), black_box(0.61), 2).unwrap()));
    c.bench_function("l2_project_sine_32", |b| {
        let basis = BasisSpec::uniform(&[(32, 3, unit)]).unwrap();
        b.iter(|| l2_project(|u| (2.0 * std::f64::consts::PI * u[0]).sin(), &basis, 6).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let (model, input) = recovery_model(32);
    let params = model.init_params(1);
    c.bench_function("forward_width32", |b| b.iter(|| model.forward(black_box(&params), &input).unwrap()));
    let (out, tape) = model.forward(&params, &input).unwrap();
    let up = vec![1.0; out.len()];
    c.bench_function("backward_width32", |b| {
        b.iter_batched(|| tape.clone(), |t| model.backward(&params, &t, &up).unwrap(), BatchSize::LargeInput)
    });
}

fn oracles(c: &mut Criterion) {
    let mut g = c.benchmark_group("oracles");
    g.sample_size(10);
    let sys = random_sine_dynamics(5);
    g.bench_function("solve_pde_1d_141", |b| {
        b.iter(|| solve_pde(&sys, &PdeSettings { nodes: vec![141], time_levels: 41, dt: None }, 10.0).unwrap())
    });
    g.bench_function("solve_mode_pde_81", |b| {
        b.iter(|| solve_subsystem_pde(3.0, 1.0, 0.2, 1.5, &PdeSettings { nodes: vec![81, 81], time_levels: 21, dt: Some(1e-2) }, 10.0).unwrap())
    });
    g.bench_function("mc_recovery_1000", |b| b.iter(|| mc_estimate(&sys, &[2.0], 5.0, 1000, 1e-3, 7).unwrap()));
    g.finish();
}

criterion_group!(benches, spline, network, oracles);
criterion_main!(benches);
