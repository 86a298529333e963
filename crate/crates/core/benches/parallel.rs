use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ssmrec::data::{split_dataset, SplitRatios};
use ssmrec::eval::{evaluate, EvalOptions};
use ssmrec::losses::{batch_objective, Batch, LossConfig, LossKind, Similarity};
use ssmrec::models::{forward, init_xavier, RecommenderConfig};
use ssmrec::sampling::in_batch_negatives;
use ssmrec::theory::{self, ParetoParams};
use ssmrec::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let ds = theory::generate_synthetic(&theory::SyntheticConfig::default()).unwrap();
    let split = split_dataset(&ds, SplitRatios::default(), 0).unwrap();
    let emb = init_xavier(ds.num_users(), ds.num_items(), 64, 0).unwrap();
    let lightgcn = RecommenderConfig::lightgcn(3);
    let reps = forward(&lightgcn, &emb, &split.train, Exec::Sequential).unwrap();
    let positives: Vec<(usize, usize)> = split.train.pairs().take(1024).collect();
    let negatives = in_batch_negatives(&positives).unwrap().negatives;
    let batch = Batch { positives, negatives };
    let ssm = LossConfig::new(LossKind::Ssm, Similarity::Cosine);
    let pareto = ParetoParams::new(3.0).unwrap();
    let magnitude = theory::MagnitudeModel::new(0.5, 0.5, 0.5, 1.0, 3.0).unwrap();

    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("pareto_monte_carlo", name), &exec, |b, &e| {
            b.iter(|| theory::pareto_moments(&pareto, 200_000, 1, e))
        });
        g.bench_with_input(BenchmarkId::new("magnitude_monte_carlo", name), &exec, |b, &e| {
            b.iter(|| theory::magnitude_sweep(&magnitude, 3.0, &[16], 20_000, 1, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("lightgcn_forward", name), &exec, |b, &e| {
            b.iter(|| forward(&lightgcn, black_box(&emb), &split.train, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("in_batch_ssm_objective", name), &exec, |b, &e| {
            b.iter(|| batch_objective(&ssm, black_box(&batch), &reps, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("all_ranking_eval", name), &exec, |b, &e| {
            b.iter(|| evaluate(black_box(&reps), &split.train, None, &split.test, EvalOptions::default(), e))
        });
        g.bench_with_input(BenchmarkId::new("finite_differences", name), &exec, |b, &e| {
            b.iter(|| {
                theory::gradcheck::check_gradient(LossKind::Ssm, &RecommenderConfig::lightgcn(2), Similarity::Cosine, 3, false, e)
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
