use criterion::{black_box, criterion_group, criterion_main, Criterion};
use crd_core::curation::{curate, CurationOptions};
use crd_core::lab::tasks::lookup_benchmark;
use crd_core::tinyformer::{Model, ModelConfig, ModelParams};
use crd_core::translation::{fit_relative_map, fit_subspace_alignment, rotated_clone, AnchorSet};

fn translation(c: &mut Criterion) {
    let params = ModelParams::init(&ModelConfig::default()).unwrap();
    let (clone, _) = rotated_clone(&params, 3).unwrap();
    let anchor = Model::new(params);
    let target = Model::new(clone);
    let d = anchor.config().d_model;
    let options = CurationOptions {
        calibration_size: 2,
        ..CurationOptions::default()
    };
    let file = curate(&lookup_benchmark(34, 5), &anchor, &options).unwrap().file;
    let anchors = AnchorSet::synthetic(32, 1);

    let mut g = c.benchmark_group("translation");
    g.sample_size(10);
    g.bench_function("fit_subspace", |b| {
        b.iter(|| fit_subspace_alignment(black_box(&anchor), &target, d).unwrap())
    });
    g.bench_function("fit_relative", |b| {
        b.iter(|| fit_relative_map(black_box(&anchors), &anchor, &target).unwrap())
    });
    let map = fit_subspace_alignment(&anchor, &target, d).unwrap();
    g.bench_function("translate_file", |b| b.iter(|| map.translate_file(black_box(&file)).unwrap()));
    g.finish();
}

criterion_group!(benches, translation);
criterion_main!(benches);
