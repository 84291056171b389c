use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sf2_core::data::{make_synthetic_split, SyntheticSpec};
use sf2_core::eval::{build_pairs, initial_bank, pair_scores};
use sf2_core::loss::OneVsAll;
use sf2_core::par::Exec;
use sf2_core::shard::{sharded_batch_one_vs_all, ShardPlan, ShardedBank};
use sf2_core::sphere::{sample_sphere_uniform, ClassifierBank, Hyperparams};
use sf2_core::train::{train, EncoderModel, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sharded_step(c: &mut Criterion) {
    let (classes, dim, batch) = (1 << 14, 64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bank = ClassifierBank::random(classes, dim, &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..batch).map(|_| sample_sphere_uniform(dim, &mut rng).unwrap()).collect();
    let ys: Vec<usize> = (0..batch).map(|i| i * 997 % classes).collect();
    let head = OneVsAll::sphereface2(&Hyperparams::ablation_default()).unwrap();
    let mut group = c.benchmark_group("sharded_step");
    for shards in [1, 4] {
        let sharded = ShardedBank::from_bank(&bank, ShardPlan::contiguous(classes, shards).unwrap()).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, shards), &sharded, |b, s| {
                b.iter(|| sharded_batch_one_vs_all(black_box(&xs), &ys, s, &head, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn train_epoch(c: &mut Criterion) {
    let spec = SyntheticSpec { classes: 20, dim: 32, per_class: 16, concentration: 4.0 };
    let (ds, _) = make_synthetic_split(&spec, 1, 0).unwrap();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = TrainConfig { epochs: 1, exec, ..TrainConfig::default() };
        let bank = initial_bank(spec.classes, config.feat_dim, 0).unwrap();
        group.bench_function(name, |b| b.iter(|| train(&config, &ds, bank.clone(), None).unwrap()));
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let spec = SyntheticSpec { classes: 50, dim: 32, per_class: 20, concentration: 4.0 };
    let (ds, _) = make_synthetic_split(&spec, 1, 0).unwrap();
    let pairs = build_pairs(&ds, 2000, 2000, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = EncoderModel::new(&[32, 64, 64, 64], &mut rng).unwrap();
    let mut group = c.benchmark_group("pair_scores");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| pair_scores(&model, &ds, &pairs, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, sharded_step, train_epoch, scoring);
criterion_main!(benches);
