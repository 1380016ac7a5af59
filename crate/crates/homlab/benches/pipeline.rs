//! Parallel vs sequential throughput of the per-sample corrector pipeline.

use criterion::{criterion_group, criterion_main, Criterion};
use homlab::corrector::build_corrector_set;
use homlab::exec;
use homlab::gaussian::{apply_link, synthesize_with_spectrum, embedding_spectrum, CovarianceSpec, LinkKind};
use homlab::operators::Spectral;
use homlab::TorusGrid;

fn sample_abar(spectral: &Spectral, spec: &CovarianceSpec, spectrum: &[f64], k: u64) -> f64 {
    let g = spectral.grid;
    let chan =
        synthesize_with_spectrum(&g, &spectral.fft, spectrum, 0.0, 99, k, 0).unwrap();
    let a = apply_link(spec, &[chan]).unwrap();
    let set = build_corrector_set(spectral, &a, 1e-8, false).unwrap();
    set.abar[0]
}

fn bench_batch(c: &mut Criterion) {
    let grid = TorusGrid::new(2, 16.0, 64).unwrap();
    let spectral = Spectral::new(grid);
    let spec = CovarianceSpec::new(4.0, 1.0, 2, LinkKind::ScalarSigmoid { lambda: 0.25 }).unwrap();
    let (spectrum, _) = embedding_spectrum(&spec, &grid, &spectral.fft);
    let batch = 4usize;

    let mut group = c.benchmark_group("corrector_batch");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::map_samples_serial(batch, |k| {
                let sp = Spectral::new(grid);
                sample_abar(&sp, &spec, &spectrum, k as u64)
            })
        })
    });
    group.bench_function("rayon", |b| {
        b.iter(|| {
            exec::map_samples(batch, |k| {
                let sp = Spectral::new(grid);
                sample_abar(&sp, &spec, &spectrum, k as u64)
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
