use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use momentum_hmm::backtest::simulate_returns;
use momentum_hmm::baum_welch::{baum_welch, forward_backward, EmConfig};
use momentum_hmm::hmm::run_hmm_signal;
use momentum_hmm::mcmc::{mcmc_sample, McmcConfig, McmcPrior};
use momentum_hmm::side_info::{ewma_vol, fit_zero_mean_spline, EwmaConfig};
use momentum_hmm::{HmmParams, TransferFunction, TrendGrid};

fn sticky(k: usize) -> HmmParams {
    let stay = 0.95;
    let off = (1.0 - stay) / (k - 1) as f64;
    let trans = (0..k)
        .map(|i| (0..k).map(|j| if i == j { stay } else { off }).collect())
        .collect();
    let means = (0..k).map(|i| i as f64 - (k - 1) as f64 / 2.0).collect();
    HmmParams::new(
        trans,
        vec![1.0 / k as f64; k],
        means,
        vec![0.09; k],
        TrendGrid::new(0.1, 3.0).unwrap(),
    )
    .unwrap()
}

fn data(k: usize, n: usize) -> (HmmParams, Vec<f64>) {
    let p = sticky(k);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = simulate_returns(&p, n, &mut rng).0;
    (p, r)
}

fn filter(c: &mut Criterion) {
    let mut g = c.benchmark_group("filter");
    for k in [2, 3, 6] {
        let (p, r) = data(k, 10_000);
        g.bench_with_input(BenchmarkId::new("signal", k), &k, |b, _| {
            b.iter(|| run_hmm_signal(black_box(&r), &p, TransferFunction::Sign).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |b, _| {
            b.iter(|| forward_backward(black_box(&r), &p).unwrap())
        });
    }
    g.finish();
}

fn learners(c: &mut Criterion) {
    let mut g = c.benchmark_group("learners");
    g.sample_size(10);
    let (p, r) = data(2, 5_000);
    g.bench_function("baum_welch_k2", |b| {
        b.iter(|| baum_welch(black_box(&r), p.grid(), 2, &EmConfig::default()).unwrap())
    });
    let cfg = McmcConfig {
        burn_in: 100,
        run_length: 600,
        seed: 2,
        permute: true,
    };
    g.bench_function("gibbs_k2_500_draws", |b| {
        b.iter(|| mcmc_sample(black_box(&r), p.grid(), 2, &McmcPrior::default(), &cfg).unwrap())
    });
    g.finish();
}

fn side_info(c: &mut Criterion) {
    let (_, r) = data(2, 50_000);
    c.bench_function("ewma_vol_psi100", |b| {
        b.iter(|| ewma_vol(black_box(&r), &EwmaConfig::default()).unwrap())
    });
    let x: Vec<f64> = (0..20_000).map(|i| i as f64 / 20_000.0).collect();
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin()).collect();
    c.bench_function("spline_fit_10_knots", |b| {
        b.iter(|| fit_zero_mean_spline(black_box(&x), &y, 10).unwrap())
    });
}

criterion_group!(benches, filter, learners, side_info);
criterion_main!(benches);
