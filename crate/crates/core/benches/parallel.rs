//! Rayon-backed helpers against the same work pinned to one thread.

use beatsmith::dsp::PatchGrid;
use beatsmith::encoder::{init_encoder, EmbeddingSequence, EncoderConfig};
use beatsmith::ensemble::{ensemble, CombinerMode, EnsembleOptions};
use beatsmith::fixtures::table2_manifest;
use beatsmith::mixture::{MixtureSpec, Sampler, WithinDomain};
use beatsmith::par;
use beatsmith::pretrain::batch_gradients;
use beatsmith::tensor::{matmul, Tensor};
use beatsmith::tokenizer::fit_codebook;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Benchmarks `f` twice: on the global pool and inside `par::sequential`.
fn both<F>(c: &mut Criterion, group: &str, f: F)
where
    F: Fn() + Sync + Send,
{
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::num_threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let (a, b) = (random(256, 256, 1), random(256, 256, 2));
    both(c, "matmul_256", || {
        std::hint::black_box(matmul(&a, &b).unwrap());
    });
}

fn bench_batch_gradients(c: &mut Criterion) {
    let cfg = EncoderConfig { codebook_size: 16, ..EncoderConfig::base_toy() };
    let w = init_encoder(&cfg, 0).unwrap();
    let grids: Vec<PatchGrid> = (0..8)
        .map(|i| PatchGrid {
            patches: random(24, 256, 10 + i),
            rows_time: 6,
            rows_freq: 4,
            patch_size: 16,
            frame_rate: 100.0,
        })
        .collect();
    let masks: Vec<Vec<usize>> = (0..8)
        .map(|i| {
            let mut m: Vec<usize> = (0..18).map(|k| (k + i) % 24).collect();
            m.sort_unstable();
            m
        })
        .collect();
    let targets: Vec<Vec<usize>> = (0..8).map(|i| (0..24).map(|k| (k * 7 + i) % 16).collect()).collect();
    let gr: Vec<&PatchGrid> = grids.iter().collect();
    let tr: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    both(c, "mlm_batch_8", || {
        std::hint::black_box(batch_gradients(&w, &gr, &masks, &tr).unwrap());
    });
}

fn bench_kmeans(c: &mut Criterion) {
    let x = random(2048, 64, 3);
    both(c, "kmeans_2048x64_k16", || {
        std::hint::black_box(fit_codebook(&x, 16, 10, 0).unwrap());
    });
}

fn bench_ensemble(c: &mut Criterion) {
    let clips: Vec<Vec<EmbeddingSequence>> = (0..64)
        .map(|i| {
            vec![
                EmbeddingSequence::new(random(6, 96, i), 6.25, "a").unwrap(),
                EmbeddingSequence::new(random(3, 64, 1000 + i), 4.0, "b").unwrap(),
            ]
        })
        .collect();
    let opts = EnsembleOptions { standardize: true, ..Default::default() };
    both(c, "ensemble_64_clips", || {
        std::hint::black_box(par::map(&clips, |s| ensemble(s, CombinerMode::Concatenate, &opts).unwrap()));
    });
}

fn bench_sampler(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    beatsmith::fixtures::generate_corpus(&Default::default(), dir.path()).unwrap();
    let mut m = table2_manifest();
    m.base_dir = dir.path().to_path_buf();
    let s = Sampler::new(&m, &MixtureSpec::speech_heavy(), WithinDomain::Hours, 0).unwrap();
    both(c, "sampler_100k", || {
        std::hint::black_box(s.draw_range(0, 100_000));
    });
}

criterion_group!(benches, bench_matmul, bench_batch_gradients, bench_kmeans, bench_ensemble, bench_sampler);
criterion_main!(benches);
