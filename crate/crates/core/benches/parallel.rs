//! Sequential against rayon execution for the hot paths: silhouette render,
//! its reverse pass, and one self-training epoch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctrpose::exec::Execution;
use ctrpose::kinematics::assemble_camera_mesh;
use ctrpose::perception::{Corruption, MaskProvider};
use ctrpose::reference::{reference_arm, reference_intrinsics};
use ctrpose::selftrain::{initial_params, train_epoch, Perturbation, TrainConfig, TrainData, TrainState};
use ctrpose::softrender::{RenderConfig, SoftRasterizer};
use ctrpose::synthgen::{generate_scenes, Ranges};
use std::hint::black_box;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    if Execution::is_parallel_available() {
        m.push(("parallel", Execution::Parallel));
    }
    m
}

fn render(c: &mut Criterion) {
    let arm = reference_arm();
    let k = reference_intrinsics();
    let scene = &generate_scenes(&arm, &k, 0, 1, &Ranges::default(), Execution::Sequential).unwrap()[0];
    let mesh = assemble_camera_mesh(&arm, &scene.q, &scene.gt_pose).unwrap().mesh;
    let r = SoftRasterizer::new(&mesh, &k, &RenderConfig::default()).unwrap();
    let cot = r.forward(Execution::Sequential);

    let mut g = c.benchmark_group("render");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &e| b.iter(|| black_box(r.forward(e))));
        g.bench_with_input(BenchmarkId::new("backward", name), &exec, |b, &e| {
            b.iter(|| black_box(r.backward_vertices(&cot, e).unwrap()))
        });
    }
    g.finish();
}

fn epoch(c: &mut Criterion) {
    let arm = reference_arm();
    let k = reference_intrinsics();
    let scenes = generate_scenes(&arm, &k, 1, 8, &Ranges::default(), Execution::Sequential).unwrap();
    let masks = MaskProvider::new(scenes.iter().map(|s| s.gt_mask.clone()).collect(), Corruption::default());
    let params = initial_params(&scenes, &Perturbation { gap_px: 4.0, jitter_px: 0.0, seed: 0 }, k.width, k.height);
    let data = TrainData { model: &arm, scenes: &scenes, masks: &masks };

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in modes() {
        let cfg = TrainConfig { execution: exec, ..TrainConfig::default() };
        g.bench_function(name, |b| {
            b.iter_batched(
                || TrainState::new(params.clone(), &cfg),
                |mut st| black_box(train_epoch(&mut st, &data, &cfg).unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, render, epoch);
criterion_main!(benches);
