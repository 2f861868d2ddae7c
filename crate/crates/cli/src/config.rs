use std::ops::RangeInclusive;
use std::path::Path;

use anyhow::{bail, Context};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use momentum_hmm::backtest::Instrument;
use momentum_hmm::baum_welch::{Criterion, EmConfig};
use momentum_hmm::mcmc::{BridgeConfig, McmcConfig, McmcPrior};
use momentum_hmm::side_info::{EwmaConfig, PredictorKind, RollingSplineConfig};
use momentum_hmm::TransferFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Learner {
    Plr,
    Bw,
    Mcmc,
    Iohmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Bic,
    Aic,
    Bridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Volratio,
    Seasonal,
}

impl Predictor {
    pub fn kind(self) -> PredictorKind {
        match self {
            Predictor::Volratio => PredictorKind::VolatilityRatio,
            Predictor::Seasonal => PredictorKind::Seasonality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Tf {
    Sign,
    Linear,
    Identity,
}

/// Inclusive `lo..=hi` range of state counts, written `lo..hi` or `lo-hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KRange {
    pub lo: usize,
    pub hi: usize,
}

impl KRange {
    pub fn range(self) -> RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

impl std::str::FromStr for KRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parts: Vec<&str> = if let Some((a, b)) = s.split_once("..") {
            vec![a, b.trim_start_matches('=')]
        } else if let Some((a, b)) = s.split_once('-') {
            vec![a, b]
        } else {
            vec![s, s]
        };
        let num = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid K range `{s}`"))
        };
        let (lo, hi) = (num(parts[0])?, num(parts[1])?);
        if lo == 0 || hi < lo {
            return Err(format!("invalid K range `{s}`: need 1 <= lo <= hi"));
        }
        Ok(KRange { lo, hi })
    }
}

impl TryFrom<String> for KRange {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<KRange> for String {
    fn from(r: KRange) -> String {
        format!("{}..{}", r.lo, r.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub tied_variances: bool,
    /// Start EM from the segmentation-based default model.
    pub segmentation_start: bool,
}

impl Default for EmSettings {
    fn default() -> Self {
        let d = EmConfig::default();
        EmSettings {
            max_iterations: d.max_iterations,
            tolerance: d.tolerance,
            tied_variances: d.tied_variances,
            segmentation_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    pub lambda: f64,
    pub fast_window: usize,
    pub slow_window: usize,
    /// Trailing EWMA used to standardize returns before spline fitting.
    pub normalize: EwmaConfig,
    pub spline: RollingSplineConfig,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            lambda: EwmaConfig::default().lambda,
            fast_window: 50,
            slow_window: 100,
            normalize: EwmaConfig {
                lambda: 0.99,
                window: 500,
            },
            spline: RollingSplineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub stay: f64,
    pub days: usize,
    pub start_price: f64,
    /// Grid half-width in ticks.
    pub grid_steps: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            means: vec![-1.5e-5, 1.5e-5],
            variances: vec![4e-8, 4e-8],
            stay: 0.995,
            days: 40,
            start_price: 1300.0,
            grid_steps: 8,
        }
    }
}

/// Every setting of a run; serialized into reports as the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub instrument: Instrument,
    pub learner: Learner,
    pub k: usize,
    pub k_range: KRange,
    pub selection: Selection,
    /// Self-transition probability of the segmentation-based default model.
    pub default_stay: f64,
    /// Days used for learning; the rest are held out for backtests.
    pub train_days: Option<usize>,
    pub seed: u64,
    pub em: EmSettings,
    pub prior: McmcPrior,
    pub mcmc: McmcConfig,
    pub bridge: BridgeConfig,
    pub predictor: Predictor,
    pub side_info: PredictorSettings,
    pub tf: Tf,
    pub linear_scale: f64,
    /// Proportional cost in basis points; half a tick when absent.
    pub cost_bps: Option<f64>,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            instrument: Instrument::default(),
            learner: Learner::Bw,
            k: 2,
            k_range: KRange { lo: 1, hi: 6 },
            selection: Selection::Bic,
            default_stay: 0.99,
            train_days: None,
            seed: 0,
            em: EmSettings::default(),
            prior: McmcPrior::default(),
            mcmc: McmcConfig::default(),
            bridge: BridgeConfig::default(),
            predictor: Predictor::Volratio,
            side_info: PredictorSettings::default(),
            tf: Tf::Sign,
            linear_scale: 1e4,
            cost_bps: None,
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if !(self.default_stay > 0.0 && self.default_stay < 1.0) {
            bail!("default_stay must be in (0, 1)");
        }
        if self.mcmc.run_length <= self.mcmc.burn_in {
            bail!("mcmc.run_length must exceed mcmc.burn_in");
        }
        if self.train_days == Some(0) {
            bail!("train_days must be positive");
        }
        if let Some(c) = self.cost_bps {
            if !(c >= 0.0) {
                bail!("cost_bps must be non-negative");
            }
        }
        EwmaConfig::new(self.side_info.lambda, self.side_info.fast_window)?;
        EwmaConfig::new(self.side_info.lambda, self.side_info.slow_window)?;
        self.side_info.normalize.validate()?;
        Ok(())
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iterations: self.em.max_iterations,
            tolerance: self.em.tolerance,
            tied_variances: self.em.tied_variances,
            ..EmConfig::default()
        }
    }

    pub fn mcmc_config(&self) -> McmcConfig {
        McmcConfig {
            seed: self.seed,
            ..self.mcmc
        }
    }

    pub fn bridge_config(&self) -> BridgeConfig {
        BridgeConfig {
            seed: self.seed,
            ..self.bridge
        }
    }

    pub fn criterion(&self) -> Option<Criterion> {
        match self.selection {
            Selection::Bic => Some(Criterion::Bic),
            Selection::Aic => Some(Criterion::Aic),
            Selection::Bridge => None,
        }
    }

    pub fn transfer(&self) -> TransferFunction {
        match self.tf {
            Tf::Sign => TransferFunction::Sign,
            Tf::Linear => TransferFunction::LinearClip {
                scale: self.linear_scale,
            },
            Tf::Identity => TransferFunction::Identity,
        }
    }
}
