use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use oneshot_core::pipeline::{self, PipelineConfig};
use oneshot_core::select::{self, DEFAULT_OFFSET_PX};
use oneshot_core::synth::{self, SceneConfig};
use oneshot_core::track::{Direction, NccTracker, TrackerBackend};
use oneshot_core::Exec;

fn modes() -> [(&'static str, Exec); 2] {
    [
        ("sequential", Exec::Sequential),
        ("parallel", Exec::Parallel),
    ]
}

fn bench_tracking(c: &mut Criterion) {
    let scene = synth::generate_scene(&SceneConfig::randomized(11, 3, 2.0)).unwrap();
    let q = scene.query();
    let seeds = select::select_crosshairs(&q, DEFAULT_OFFSET_PX, 2, scene.video.dims())
        .unwrap()
        .points;
    let mut group = c.benchmark_group("track_9_points_30_frames");
    for (name, exec) in modes() {
        let tracker = NccTracker {
            exec,
            ..NccTracker::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                tracker
                    .track(&scene.video, 0, &seeds, Direction::Forward)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_pipeline(c: &mut Criterion) {
    let scene = synth::generate_scene(&SceneConfig::randomized(12, 3, 2.0)).unwrap();
    let anns = [scene.query()];
    let mut group = c.benchmark_group("pipeline_30_frames");
    group.sample_size(10);
    for (name, workers) in [("sequential", 1), ("parallel", 0)] {
        let cfg = PipelineConfig {
            workers,
            ..PipelineConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pipeline::run(&scene.video, &anns, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_tracking, bench_pipeline);
criterion_main!(benches);
