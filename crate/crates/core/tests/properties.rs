//! Property tests for the cross-module invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use momentum_hmm::backtest::{
    decisions_from_forecasts, ingest_ticks, simulate, simulate_returns, to_returns, CostModel,
    DecisionSeries, Instrument, ReturnSeries,
};
use momentum_hmm::baum_welch::{baum_welch, EmConfig};
use momentum_hmm::hmm::{
    filter_step, init_filter, log_likelihood, run_hmm_signal, stationary_distribution,
};
use momentum_hmm::side_info::{ewma_vol, fit_zero_mean_spline, vol_ratio, EwmaConfig};
use momentum_hmm::{HmmParams, SignalSeries, TransferFunction, TrendGrid};

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Random valid parameters on a grid of `±steps` ticks of size 0.1.
fn params_strategy() -> impl Strategy<Value = HmmParams> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(k, steps)| {
        let omega = steps as f64 * 0.1;
        (
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), k),
            prop::collection::vec(0.01f64..1.0, k),
            prop::collection::vec(-omega..=omega, k),
            prop::collection::vec(1.0f64..50.0, k),
        )
            .prop_map(move |(rows, pi, means, scale)| {
                let grid = TrendGrid::with_steps(0.1, steps).unwrap();
                let floor = grid.variance_floor();
                HmmParams::new(
                    rows.into_iter().map(normalize).collect(),
                    normalize(pi),
                    means,
                    scale.into_iter().map(|s| s * floor).collect(),
                    grid,
                )
                .unwrap()
            })
    })
}

fn on_grid(params: &HmmParams, codes: &[usize]) -> Vec<f64> {
    let g = params.grid();
    codes.iter().map(|c| g.value(c % g.len())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn params_are_stochastic_and_emissions_normalized(p in params_strategy()) {
        for i in 0..p.k() {
            prop_assert!((p.transition_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mass: f64 = p.log_emission_row(i).iter().map(|l| l.exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
            prop_assert!(p.variances()[i] >= p.grid().variance_floor() * (1.0 - 1e-12));
            prop_assert!(p.discretized_means()[i].abs() <= p.grid().omega() + 1e-12);
        }
        let pi = stationary_distribution(p.transition_flat(), p.k());
        for j in 0..p.k() {
            let next: f64 = (0..p.k()).map(|i| pi[i] * p.transition(i, j)).sum();
            prop_assert!((next - pi[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_posteriors_are_distributions(p in params_strategy(), codes in prop::collection::vec(0usize..64, 1..40)) {
        let y = on_grid(&p, &codes);
        let mut state = init_filter(&p, y[0]).unwrap();
        for (t, &dy) in y.iter().enumerate() {
            if t > 0 {
                state = filter_step(&state, &p, dy).unwrap();
            }
            prop_assert!(state.omega_filt.iter().all(|w| *w >= 0.0));
            prop_assert!((state.omega_filt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((state.omega_pred.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_is_label_invariant(p in params_strategy(), codes in prop::collection::vec(0usize..64, 1..40)) {
        let y = on_grid(&p, &codes);
        let perm: Vec<usize> = (0..p.k()).rev().collect();
        let a = log_likelihood(&y, &p).unwrap();
        let b = log_likelihood(&y, &p.permuted(&perm).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn signal_prefix_is_causal(
        p in params_strategy(),
        codes in prop::collection::vec(0usize..64, 2..60),
        cut in 0usize..60,
        scale in 0.0f64..100.0,
    ) {
        let y = on_grid(&p, &codes);
        let cut = cut % y.len();
        for tf in [TransferFunction::Sign, TransferFunction::LinearClip { scale }, TransferFunction::Identity] {
            let full = run_hmm_signal(&y, &p, tf).unwrap();
            let prefix = run_hmm_signal(&y[..=cut], &p, tf).unwrap();
            prop_assert_eq!(&full.values()[..=cut], prefix.values());
            prop_assert!(full.values().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn costs_never_raise_net_return(
        signal in prop::collection::vec(-1.0f64..=1.0, 30),
        returns in prop::collection::vec(-0.01f64..0.01, 30),
        low in 0.0f64..1e-3,
        extra in 0.0f64..1e-3,
        fixed in 0.0f64..1e-4,
    ) {
        let series = ReturnSeries::from_days(returns, 10).unwrap();
        let d = decisions_from_forecasts(&SignalSeries::new(signal).unwrap());
        let total = |c: CostModel| simulate(&d, &series, &c).unwrap().net.iter().sum::<f64>();
        let base = total(CostModel::new(low, fixed).unwrap());
        prop_assert!(total(CostModel::new(low + extra, fixed).unwrap()) <= base + 1e-15);
        prop_assert!(total(CostModel::new(low, fixed + extra).unwrap()) <= base + 1e-15);
        let gross: f64 = simulate(&d, &series, &CostModel::default()).unwrap().gross.iter().sum();
        prop_assert!(base <= gross + 1e-15);
    }

    #[test]
    fn long_only_is_the_security(
        values in (1usize..5).prop_flat_map(|days| prop::collection::vec(-0.01f64..0.01, days * 7)),
    ) {
        let series = ReturnSeries::from_days(values.clone(), 7).unwrap();
        let sim = simulate(&DecisionSeries::constant(1.0, values.len()).unwrap(), &series, &CostModel::default()).unwrap();
        prop_assert_eq!(sim.gross, values);
    }

    #[test]
    fn zero_mean_spline_integrates_to_zero(
        xs in prop::collection::vec(-5.0f64..5.0, 100..300),
        seed in any::<u64>(),
        knots in 2usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = xs.iter().map(|x| x.sin() + rand::RngExt::random_range(&mut rng, -1.0..1.0)).collect();
        prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
        let s = fit_zero_mean_spline(&xs, &y, knots).unwrap();
        let (a, b) = s.domain();
        let n = 4000;
        let h = (b - a) / n as f64;
        let simpson: f64 = (0..n)
            .map(|i| {
                let x = a + i as f64 * h;
                h / 6.0 * (s.eval(x) + 4.0 * s.eval(x + h / 2.0) + s.eval(x + h))
            })
            .sum();
        let scale = (b - a) * s.max_abs(2000).max(1e-12);
        prop_assert!(s.integral().abs() <= 1e-8 * scale);
        prop_assert!(simpson.abs() <= 1e-6 * scale);
    }

    #[test]
    fn ewma_symmetries(returns in prop::collection::vec(-0.05f64..0.05, 60..120), c in 0.01f64..100.0) {
        let cfg = EwmaConfig::new(0.79, 50).unwrap();
        let base = ewma_vol(&returns, &cfg).unwrap();
        let flipped: Vec<f64> = returns.iter().map(|r| -r).collect();
        prop_assert_eq!(&base, &ewma_vol(&flipped, &cfg).unwrap());
        let scaled: Vec<f64> = returns.iter().map(|r| c * r).collect();
        for (a, b) in base.iter().zip(ewma_vol(&scaled, &cfg).unwrap()) {
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((c * a - b).abs() <= 1e-12 * b.abs().max(1e-300)),
                (None, None) => {}
                _ => prop_assert!(false, "warm-up differs"),
            }
        }
        let r0 = vol_ratio(&returns, 0.79, 10, 50).unwrap();
        let r1 = vol_ratio(&scaled, 0.79, 10, 50).unwrap();
        for (a, b) in r0.iter().zip(&r1) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ingested_days_have_full_sessions_on_the_tick_grid(
        ticks in prop::collection::vec((0u32..2, 0u32..856, 0u32..60, -40i32..40), 1..200),
    ) {
        let mut ticks = ticks;
        ticks.sort_by_key(|t| (t.0, t.1, t.2));
        let mut csv = String::from("timestamp,price,volume\n");
        for (day, minute, second, steps) in ticks {
            let m = 60 + minute;
            csv += &format!(
                "2011-03-{:02}T{:02}:{:02}:{:02}-06:00,{},1\n",
                1 + day, m / 60, m % 60, second, 1300.0 + 0.25 * steps as f64
            );
        }
        let inst = Instrument::default();
        let bars = ingest_ticks(csv.as_bytes(), &inst).unwrap();
        for day in &bars.days {
            prop_assert_eq!(day.closes.len(), 856);
            prop_assert!(day.closes.iter().all(|p| (p / inst.tick_size).fract() == 0.0));
        }
        let r = to_returns(&bars).unwrap();
        prop_assert_eq!(r.len(), 855 * bars.days.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_never_decreases_likelihood(p in params_strategy(), seed in any::<u64>(), k in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = simulate_returns(&p, 400, &mut rng).0;
        let mut distinct = y.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() >= k);
        let fit = baum_welch(&y, p.grid(), k, &EmConfig { max_iterations: 50, ..EmConfig::default() }).unwrap();
        for w in fit.trace.logliks.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}
