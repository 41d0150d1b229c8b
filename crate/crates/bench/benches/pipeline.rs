use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use comptrack_bench::{pair_fixture, token_matrix};
use comptrack_core::ibdtc::{compress, AttentionWeights, Compression, FusionMode, SvdRowScaling};
use comptrack_core::svd_thin;
use comptrack_core::tracker::PairInput;

fn svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd_thin");
    for n in [32, 128, 512] {
        let x = token_matrix(n, 32);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| svd_thin(black_box(x)).unwrap()));
    }
    g.finish();
}

fn compression(c: &mut Criterion) {
    let f = pair_fixture(Compression::Dynamic(FusionMode::Addition));
    let p = &f.model.params;
    let get = |n: &str| p.get(n).expect("parameter exists");
    let w = AttentionWeights { pool: get("ibdtc.pool"), fuse: None, wq: get("ibdtc.wq"), wk: get("ibdtc.wk"), wv: get("ibdtc.wv") };
    let x = token_matrix(108, f.model.config.channels);
    c.bench_function("compress_108_tokens", |b| {
        b.iter(|| compress(black_box(&x), &w, 0.99, FusionMode::Addition, SvdRowScaling::Unit).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict_pair");
    for comp in [Compression::Dynamic(FusionMode::Addition), Compression::Uncompressed] {
        let f = pair_fixture(comp);
        let input = PairInput { template: &f.template, search: &f.search, sample_seed: 0 };
        g.bench_function(comp.name(), |b| b.iter(|| f.model.predict_pair(black_box(&input)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, svd, compression, forward);
criterion_main!(benches);
