use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gace::infer::Rescorer;
use gace::synth::{generate_frames, DetectorErrorModel, SceneConfig};
use gace::{par, trainer, FeatureGroups, GaceModel, NormConfig};

fn rescore_batch(c: &mut Criterion) {
    let frames = generate_frames(
        &SceneConfig::throughput(),
        &DetectorErrorModel::a(),
        3,
        0..8,
    );
    let model = GaceModel::new(
        NormConfig::default(),
        Default::default(),
        FeatureGroups::all(),
        Default::default(),
        0,
    );
    let net = Rescorer::new(&model);
    let run = || {
        par::map(&frames, |f| {
            let feats = gace::features::extract_frame_features(
                &f.detections,
                &f.points.points,
                &model.norm,
            );
            net.scores(&feats)
        })
    };
    let mut group = c.benchmark_group("rescore_8_frames");
    group.sample_size(20);
    let default_threads = rayon::current_num_threads();
    for threads in [1, default_threads] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, _| {
            b.iter(|| pool.install(run))
        });
        if default_threads == 1 {
            break;
        }
    }
    group.bench_function("single_frame_sequential", |b| {
        b.iter(|| trainer::rescore(&model, &frames[0]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, rescore_batch);
criterion_main!(benches);
