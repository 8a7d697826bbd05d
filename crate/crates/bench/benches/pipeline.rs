use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;

use koopman_ioc_bench::Fixture;
use koopman_ioc_core::demo_gen::solve_oc;
use koopman_ioc_core::ioc::estimate_weights;
use koopman_ioc_core::koopman::{train_theta, KoopmanModel, TrainSettings};
use koopman_ioc_core::{DerivativeSource, Observable};

fn forward_solve(c: &mut Criterion) {
    let fx = Fixture::new(64);
    let x0 = DVector::from_row_slice(&fx.cfg.x0);
    c.bench_function("solve_oc pendulum T=10", |b| {
        b.iter(|| solve_oc(&fx.sys, &fx.feat, &fx.cfg.omega_true, &x0, fx.cfg.horizon, &fx.cfg.oc).unwrap())
    });
}

fn weight_solve(c: &mut Criterion) {
    let fx = Fixture::new(64);
    let parts = fx.matrices();
    let mut model = KoopmanModel::initialize(&parts[0], fx.cfg.ridge).unwrap();
    for p in &parts[1..] {
        model.incorporate(p).unwrap();
    }
    let mut group = c.benchmark_group("assemble and solve");
    group.bench_function("true", |b| {
        b.iter(|| estimate_weights(&fx.segments, &fx.feat, DerivativeSource::True(&fx.sys)).unwrap())
    });
    group.bench_function("koopman", |b| {
        let source = DerivativeSource::Koopman {
            model: &model,
            observable: &fx.net,
        };
        b.iter(|| estimate_weights(&fx.segments, &fx.feat, source).unwrap())
    });
    group.finish();
}

fn recursive_update(c: &mut Criterion) {
    let mut group = c.benchmark_group("recursive update");
    for width in [64, 256] {
        let fx = Fixture::new(width);
        let parts = fx.matrices();
        let base = KoopmanModel::initialize(&parts[0], fx.cfg.ridge).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(width), &parts, |b, parts| {
            b.iter(|| {
                let mut model = base.clone();
                model.incorporate(&parts[1]).unwrap();
                model
            })
        });
    }
    group.finish();
}

fn observable(c: &mut Criterion) {
    let mut group = c.benchmark_group("observable");
    for width in [64, 256] {
        let fx = Fixture::new(width);
        let x = fx.demo.states[5].clone();
        group.bench_with_input(BenchmarkId::new("jacobian", width), &x, |b, x| {
            b.iter(|| fx.net.state_jacobian(black_box(x)))
        });
        let s = DVector::from_element(fx.net.output_dim(), 1.0);
        group.bench_with_input(BenchmarkId::new("param gradient", width), &x, |b, x| {
            b.iter(|| fx.net.param_gradient(black_box(x), &s))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let fx = Fixture::new(64);
    let parts = fx.matrices();
    let mut model = KoopmanModel::initialize(&parts[0], fx.cfg.ridge).unwrap();
    model.incorporate(&parts[1]).unwrap();
    let settings = TrainSettings {
        max_steps: 10,
        ..TrainSettings::default()
    };
    c.bench_function("train_theta 10 steps", |b| {
        b.iter(|| {
            let mut net = fx.net.clone();
            train_theta(&model, &fx.segments[..2], &mut net, &settings).unwrap()
        })
    });
}

criterion_group!(benches, forward_solve, weight_solve, recursive_update, observable, training);
criterion_main!(benches);
