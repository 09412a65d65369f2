//! Data-parallel hot paths on the default rayon pool against a one-thread
//! pool. Build with `--no-default-features` to time the compiled sequential
//! fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rayon::ThreadPool;

use fungi_core::backbone::{init_encoder, EncoderConfig, GradientSource};
use fungi_core::evalkit::KnnIndex;
use fungi_core::features::{Extractor, ProjectionKind, Split};
use fungi_core::objectives::{DinoConfig, KlConfig, Objective};
use fungi_core::par;
use fungi_core::rng::rng_from;
use fungi_core::segmem::{IvfIndex, IvfParams, NeighbourSearch};
use fungi_core::synth::{generate, SynthKind, SynthSpec};

fn pools() -> Vec<(String, ThreadPool)> {
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![(format!("rayon_{}", all.current_num_threads()), all), ("sequential".into(), one)]
}

fn uniform_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng_from(seed);
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn knn(c: &mut Criterion) {
    let train = uniform_rows(2000, 128, 1);
    let queries = uniform_rows(400, 128, 2);
    let labels: Vec<i32> = (0..train.len()).map(|i| (i % 10) as i32).collect();
    let index = KnnIndex::new(train, labels, 20).unwrap();
    let mut g = c.benchmark_group("knn_classify_400x2000");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| black_box(index.classify_batch(&queries).unwrap())))
        });
    }
    g.finish();
}

fn extraction(c: &mut Criterion) {
    let cfg = EncoderConfig {
        image_size: 32,
        patch_size: 8,
        ..EncoderConfig::default()
    };
    let params = init_encoder::<f32>(&cfg, 0).unwrap();
    let mut dino = DinoConfig {
        proj_dim: 256,
        ..DinoConfig::default()
    };
    dino.crops.global.size = 32;
    dino.crops.local.size = 32;
    let objectives = vec![
        Objective::kl(KlConfig::default(), cfg.dim, 0).unwrap(),
        Objective::dino(dino, cfg.dim, 0).unwrap(),
    ];
    let source = GradientSource::last_attn_proj(&cfg);
    let extractor = Extractor::new(&params, source, objectives, ProjectionKind::Binary, 0).unwrap();
    let data = generate(
        &SynthSpec {
            size: 32,
            ..SynthSpec::new(SynthKind::Stripes, 16, 4, 3)
        },
        Split::Train,
    )
    .unwrap();
    let mut g = c.benchmark_group("extract_16_images");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| {
                pool.install(|| {
                    black_box(par::try_map_range(data.len(), |i| extractor.record(i as u32, None, &data.images[i])).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn ivf(c: &mut Criterion) {
    let d = 32;
    let base: Vec<f32> = uniform_rows(20_000, d, 4).concat();
    let queries = uniform_rows(256, d, 5);
    let params = IvfParams {
        num_leaves: 128,
        leaves_to_search: 16,
        rerank: 120,
        training_sample: 8192,
        training_iters: 10,
    };
    let index = IvfIndex::build(&base, d, params, 6).unwrap();
    let mut g = c.benchmark_group("ivf_search_256");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| black_box(par::map_slice(&queries, |q| index.search(q, 30).unwrap()))))
        });
    }
    g.finish();
}

criterion_group!(benches, knn, extraction, ivf);
criterion_main!(benches);
