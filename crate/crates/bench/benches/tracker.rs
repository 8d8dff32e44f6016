use criterion::{black_box, criterion_group, criterion_main, Criterion};

use tapkit::evaltap::{self, QueryMode};
use tapkit::losses::LossConfig;
use tapkit::rng::stream;
use tapkit::synthdata::{generate_scene, Domain, SceneConfig};
use tapkit::tracker::predict;
use tapkit::trainer::{ssl_grads, supervised_grads, TrainConfig};
use tapkit_bench::{clips, params};

fn benches(c: &mut Criterion) {
    let p = params();
    let a = clips(Domain::A, 2, 16, 64);
    let b = clips(Domain::B, 2, 16, 64);
    let loss_cfg = LossConfig::at_resolution(64);
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);

    g.bench_function("generate_scene_64x64x16", |bch| {
        let mut s = 0;
        bch.iter(|| {
            s += 1;
            black_box(generate_scene(&SceneConfig::domain(Domain::B, 16, 64, 64, s)).unwrap())
        })
    });
    let queries = evaltap::clip_queries(a[0].tracks.as_ref().unwrap(), QueryMode::QFirst).0;
    let queries = &queries[..queries.len().min(32)];
    g.bench_function("predict_32_queries", |bch| bch.iter(|| black_box(predict(&p, &a[0].video, queries).unwrap())));
    g.bench_function("supervised_grads_batch2", |bch| {
        let refs: Vec<_> = a.iter().collect();
        bch.iter(|| black_box(supervised_grads(&p, &refs, 32, &loss_cfg, &mut stream(1, 1)).unwrap()))
    });
    g.bench_function("ssl_grads_batch2", |bch| {
        let videos: Vec<_> = b.iter().map(|c| c.video.clone()).collect();
        let cfg = TrainConfig::default();
        bch.iter(|| black_box(ssl_grads(&p, &p, &videos, &cfg, &loss_cfg, &mut stream(1, 2)).unwrap()))
    });
    g.bench_function("evaluate_2_clips", |bch| bch.iter(|| black_box(evaltap::evaluate(&p, &b, QueryMode::Strided, 64).unwrap())));
    g.finish();
}

criterion_group!(desk, benches);
criterion_main!(desk);
