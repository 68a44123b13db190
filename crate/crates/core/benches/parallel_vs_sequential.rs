//! Parallel versus sequential execution of the hot paths. The "sequential"
//! arm pins work to a one-thread pool (or the sequential kernel); build with
//! `--no-default-features` to time the rayon-free fallback itself.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ices_core::checks::random_episode_batch;
use ices_core::config::{EnvConfig, ExperimentConfig};
use ices_core::nn::dist::{monte_carlo_kl, LatentGaussian};
use ices_core::nn::kernels::{matmul_par, matmul_seq};
use ices_core::par;
use ices_core::policies::{ExploitParams, PolicyDims};
use ices_core::trainer::run_training;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arms() -> [(&'static str, Option<usize>); 2] {
    [("sequential", Some(1)), ("parallel", None)]
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [64usize, 256] {
        let a: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.bench_with_input(BenchmarkId::new("sequential", size), &size, |bench, &n| {
            bench.iter(|| matmul_seq(black_box(&a), black_box(&b), n, n, n))
        });
        g.bench_with_input(BenchmarkId::new("parallel", size), &size, |bench, &n| {
            bench.iter(|| matmul_par(black_box(&a), black_box(&b), n, n, n))
        });
    }
    g.finish();
}

fn kl_monte_carlo(c: &mut Criterion) {
    let p = LatentGaussian::new(vec![0.2, -0.4, 0.1, 0.0], vec![0.1, -0.3, 0.2, 0.0]).unwrap();
    let q = LatentGaussian::new(vec![-0.1, 0.3, 0.0, 0.5], vec![0.0, 0.2, -0.1, 0.3]).unwrap();
    let mut g = c.benchmark_group("kl_monte_carlo_200k");
    g.sample_size(10);
    for (name, threads) in arms() {
        g.bench_function(name, |bench| bench.iter(|| par::with_threads(threads, || monte_carlo_kl(&p, &q, 200_000, 7))));
    }
    g.finish();
}

fn td_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = PolicyDims { obs_dim: 30, state_dim: 96, n_agents: 2, n_actions: 5, hidden: 64, mixer_embed: 32 };
    let batch = random_episode_batch(&dims, &mut rng, 32).unwrap();
    let p = ExploitParams::new(dims, &mut rng);
    let mut g = c.benchmark_group("td_loss_batch32");
    g.sample_size(10);
    for (name, threads) in arms() {
        g.bench_function(name, |bench| bench.iter(|| par::with_threads(threads, || p.td_loss(&batch, &batch.rewards, 0.99).unwrap())));
    }
    g.finish();
}

fn seed_fan_out(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::new(EnvConfig::corridor());
    cfg.step_max = 1_500;
    cfg.algo.batch_size = 4;
    cfg.algo.hidden_dim = 16;
    cfg.algo.mixer_embed_dim = 8;
    cfg.algo.scaffold_hidden = 16;
    cfg.algo.decoder_hidden = 16;
    cfg.algo.eval_interval = 1_500;
    cfg.algo.eval_episodes = 2;
    let configs: Vec<ExperimentConfig> = (0..4)
        .map(|s| ExperimentConfig { seed: s, ..cfg.clone() })
        .collect();
    let mut g = c.benchmark_group("four_seed_runs");
    g.sample_size(10);
    for (name, threads) in arms() {
        g.bench_function(name, |bench| {
            bench.iter(|| par::with_threads(threads, || par::map_slice(&configs, |c| run_training(c.clone()).unwrap().metrics.len())))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, kl_monte_carlo, td_loss, seed_fan_out);
criterion_main!(benches);
