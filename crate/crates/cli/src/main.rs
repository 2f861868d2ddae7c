mod config;
mod pipeline;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use momentum_hmm::backtest::{
    decisions_from_forecasts, generate_synthetic, ingest_ticks, simulate, BacktestReport,
    CostModel, StrategyReport, SyntheticSpec,
};
use momentum_hmm::baum_welch::{baum_welch, select_k_penalized, write_scores_csv, EmInit};
use momentum_hmm::iohmm::{fit_partition, iohmm_learn, spline_roots};
use momentum_hmm::mcmc::{mcmc_sample, posterior_mode, select_k_bridge};
use momentum_hmm::plr::{default_theta, plr_segment_with, PlrConfig};
use momentum_hmm::side_info::{fit_zero_mean_spline, SplinePredictor};
use momentum_hmm::{HmmParams, TrendGrid};

use config::{KRange, Learner, Predictor, RunConfig, Tf};
use pipeline::{
    create, predictor_series, read_json, slice_signal, standardized, write_json, Market, ModelFile,
};

#[derive(Parser)]
#[command(
    name = "momentum-hmm",
    version,
    about = "Regime-switching intraday momentum models"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Bar series JSON (or tick CSV for `ingest`).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Model JSON written by `learn`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    learner: Option<Learner>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    k_range: Option<KRange>,
    #[arg(long, global = true, value_enum)]
    predictor: Option<Predictor>,
    #[arg(long, global = true, value_enum)]
    tf: Option<Tf>,
    #[arg(long, global = true)]
    cost_bps: Option<f64>,
    #[arg(long, global = true)]
    train_days: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trending market from the `[synth]` settings.
    Synth,
    /// Aggregate a tick CSV onto minute bars.
    Ingest,
    /// Fit a model on the training days.
    Learn,
    /// Score a range of state counts.
    SelectK,
    /// Fit the zero-mean spline predictor on the training days.
    FitSpline,
    /// Run a learned model over the held-out days.
    Backtest,
}

impl Cli {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.learner {
            cfg.learner = l;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(r) = self.k_range {
            cfg.k_range = r;
        }
        if let Some(p) = self.predictor {
            cfg.predictor = p;
        }
        if let Some(tf) = self.tf {
            cfg.tf = tf;
        }
        if self.cost_bps.is_some() {
            cfg.cost_bps = self.cost_bps;
        }
        if self.train_days.is_some() {
            cfg.train_days = self.train_days;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.resolve()?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Ingest => cmd_ingest(&cfg, cli.input.as_deref(), out),
        Command::Learn => cmd_learn(&cfg, &Market::load(cli.input.as_deref(), &cfg)?, out),
        Command::SelectK => cmd_select_k(&cfg, &Market::load(cli.input.as_deref(), &cfg)?, out),
        Command::FitSpline => cmd_fit_spline(&cfg, &Market::load(cli.input.as_deref(), &cfg)?, out),
        Command::Backtest => {
            let Some(model_path) = cli.model.as_deref() else {
                bail!("--model is required for backtest")
            };
            if !model_path.exists() {
                bail!("model file {} not found", model_path.display());
            }
            let model: ModelFile = read_json(model_path)?;
            cmd_backtest(
                &cfg,
                &Market::load(cli.input.as_deref(), &cfg)?,
                &model,
                out,
            )
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let s = &cfg.synth;
    let k = s.means.len();
    if k == 0 || s.variances.len() != k {
        bail!("synth.means and synth.variances must be non-empty and equally long");
    }
    let switch = if k > 1 {
        (1.0 - s.stay) / (k - 1) as f64
    } else {
        0.0
    };
    let trans = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j && k > 1 {
                        s.stay
                    } else if k > 1 {
                        switch
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect();
    let grid = TrendGrid::with_steps(cfg.instrument.tick_size / s.start_price, s.grid_steps)?;
    let params = HmmParams::new(
        trans,
        vec![1.0 / k as f64; k],
        s.means.clone(),
        s.variances.clone(),
        grid,
    )?;
    let spec = SyntheticSpec {
        params,
        days: s.days,
        start_price: s.start_price,
        instrument: cfg.instrument.clone(),
        seed: cfg.seed,
        input: None,
    };
    let market = generate_synthetic(&spec)?;
    write_json(&out.join("bars.json"), &market.bars)?;
    write_json(&out.join("truth.json"), &spec)?;
    let mut w = create(&out.join("states.csv"))?;
    writeln!(w, "t,state,return")?;
    for (t, (s, r)) in market.states.iter().zip(&market.returns).enumerate() {
        writeln!(w, "{t},{s},{r}")?;
    }
    w.flush()?;
    println!(
        "wrote {} days to {}",
        spec.days,
        out.join("bars.json").display()
    );
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let Some(path) = input else {
        bail!("--input is required")
    };
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let bars = ingest_ticks(std::io::BufReader::new(file), &cfg.instrument)?;
    write_json(&out.join("bars.json"), &bars)?;
    println!("ingested {} days", bars.days.len());
    Ok(())
}

fn em_config(
    cfg: &RunConfig,
    market: &Market,
    grid: &TrendGrid,
) -> anyhow::Result<momentum_hmm::baum_welch::EmConfig> {
    let mut em = cfg.em_config();
    if cfg.em.segmentation_start {
        let segmentation = plr_segment_with(&market.train_prices(), &PlrConfig::default())?;
        let start = default_theta(cfg.k, cfg.default_stay, grid, &segmentation)?;
        em.init = EmInit::FromParams(start);
    }
    Ok(em)
}

fn fit_predictor(cfg: &RunConfig, market: &Market) -> anyhow::Result<SplinePredictor> {
    let train = market.train();
    let x = predictor_series(cfg, cfg.predictor, &train)?;
    let y = standardized(cfg, &train)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(&y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    let knots = cfg.predictor.kind().default_knots();
    let mut spline = fit_zero_mean_spline(&xs, &ys, knots)?;
    spline.kind = Some(cfg.predictor.kind());
    spline.window = Some((0, market.train_days));
    Ok(spline)
}

fn cmd_learn(cfg: &RunConfig, market: &Market, out: &Path) -> anyhow::Result<()> {
    let grid = market.grid()?;
    let train = market.train();
    let data = &train.values;
    let (model, trace) = match cfg.learner {
        Learner::Plr => {
            let seg = plr_segment_with(&market.train_prices(), &PlrConfig::default())?;
            let params = default_theta(cfg.k, cfg.default_stay, &grid, &seg)?;
            let trace =
                json!({ "change_points": seg.change_points, "segments": seg.segments.len() });
            (
                ModelFile::Hmm {
                    learner: Learner::Plr,
                    params,
                },
                trace,
            )
        }
        Learner::Bw => {
            let fit = baum_welch(data, &grid, cfg.k, &em_config(cfg, market, &grid)?)?;
            let trace = serde_json::to_value(&fit.trace)?;
            (
                ModelFile::Hmm {
                    learner: Learner::Bw,
                    params: fit.params,
                },
                trace,
            )
        }
        Learner::Mcmc => {
            let chain = mcmc_sample(data, &grid, cfg.k, &cfg.prior, &cfg.mcmc_config())?;
            chain.write_csv(create(&out.join("chain.csv"))?)?;
            let params = posterior_mode(&chain)?;
            let trace = json!({
                "draws": chain.draws.len(),
                "acceptance": chain.acceptance,
                "ordered_means": chain.ordered_mean_summary(),
                "mode_loglik": momentum_hmm::hmm::log_likelihood(data, &params)?,
            });
            (
                ModelFile::Hmm {
                    learner: Learner::Mcmc,
                    params,
                },
                trace,
            )
        }
        Learner::Iohmm => {
            let x = predictor_series(cfg, cfg.predictor, &train)?;
            let partition = fit_partition(
                &x,
                &standardized(cfg, &train)?,
                cfg.predictor.kind().default_knots(),
            )?;
            let mut params = iohmm_learn(
                data,
                &x,
                &partition,
                &grid,
                cfg.k,
                &em_config(cfg, market, &grid)?,
            )?;
            params.kind = Some(cfg.predictor.kind());
            let trace = json!({ "roots": partition.roots, "buckets": partition.len() });
            (
                ModelFile::Iohmm {
                    predictor: cfg.predictor,
                    params,
                },
                trace,
            )
        }
    };
    write_json(&out.join("model.json"), &model)?;
    write_json(
        &out.join("trace.json"),
        &json!({ "config": cfg, "trace": trace }),
    )?;
    println!(
        "wrote {} model to {}",
        model.name(),
        out.join("model.json").display()
    );
    Ok(())
}

fn cmd_select_k(cfg: &RunConfig, market: &Market, out: &Path) -> anyhow::Result<()> {
    let grid = market.grid()?;
    let data = market.train().values;
    let path = out.join("scores.csv");
    let best = match cfg.criterion() {
        Some(criterion) => {
            let sel = select_k_penalized(
                &data,
                &grid,
                cfg.k_range.range(),
                criterion,
                &cfg.em_config(),
            )?;
            write_scores_csv(&sel.scores, create(&path)?)?;
            sel.best_k
        }
        None => {
            let sel = select_k_bridge(
                &data,
                &grid,
                cfg.k_range.range(),
                &cfg.prior,
                &cfg.mcmc_config(),
                &cfg.bridge_config(),
            )?;
            let mut w = create(&path)?;
            writeln!(w, "K,log_ml,std_error")?;
            for (k, e) in &sel.estimates {
                writeln!(w, "{k},{},{}", e.log_ml, e.std_error)?;
            }
            for (k, reason) in &sel.failures {
                log::warn!("K = {k} failed: {reason}");
            }
            w.flush()?;
            sel.best_k
        }
    };
    println!("best K = {best}");
    Ok(())
}

fn cmd_fit_spline(cfg: &RunConfig, market: &Market, out: &Path) -> anyhow::Result<()> {
    let spline = fit_predictor(cfg, market)?;
    let partition = spline_roots(&spline)?;
    write_json(
        &out.join("spline.json"),
        &json!({ "config": cfg, "spline": spline, "partition": partition }),
    )?;
    println!("spline with {} buckets", partition.len());
    Ok(())
}

fn cmd_backtest(
    cfg: &RunConfig,
    market: &Market,
    model: &ModelFile,
    out: &Path,
) -> anyhow::Result<()> {
    let returns = &market.returns;
    let signal = model.signal(cfg, returns, cfg.transfer())?;
    let (from, to) = market.test_range();
    let test = returns.slice_days(from, to);
    let decisions = decisions_from_forecasts(&slice_signal(&signal, returns, from, to)?);
    let cost = match cfg.cost_bps {
        Some(bps) => CostModel::from_bps(bps)?,
        None => {
            let first = market.bars.days[from].closes[0];
            CostModel::half_tick(&market.bars.instrument, first)
        }
    };
    let sim = simulate(&decisions, &test, &cost)?;
    let strategy = StrategyReport::new(&model.name(), &sim, &test)?;
    let report = BacktestReport::build(serde_json::to_value(cfg)?, &test, strategy, Vec::new())?;
    write_json(&out.join("report.json"), &report)?;
    report.write_plot_csv(create(&out.join("cumret.csv"))?)?;
    let fmt = |s: Option<f64>| s.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    println!(
        "{}: Sharpe pre {} post {}, {} trades",
        report.strategy,
        fmt(report.sharpe_pre),
        fmt(report.sharpe_post),
        report.trade_count
    );
    Ok(())
}
