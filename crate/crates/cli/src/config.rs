//! Experiment configuration: a versioned JSON document resolved into a
//! game, a training configuration and evaluation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drbsde::calibration::{CsvOptions, LikelihoodForm};
use drbsde::market::{OUParams, TimeGrid};
use drbsde::neural::AdamConfig;
use drbsde::oracle::{ExpectationRule, GridSpec, Interpolation};
use drbsde::presets;
use drbsde::solver::{BarrierSpec, EpochSchedule, GameSpec, PayoffSpec, TrainConfig};
use drbsde::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub game: GameConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
}

/// Where the OU coefficients come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuConfig {
    /// Diagonal coefficients given component-wise.
    Explicit { kappa: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64> },
    /// `kappa_i ~ U[1.5, 2.5]`, `mu = 0`, `sigma = I`.
    BenchmarkUniform { dim: usize, kappa_seed: u64 },
    /// Built-in per-country fits; `markets` selects rows by label, the
    /// default being the 24-market CfD basket.
    MarketTable {
        #[serde(default)]
        markets: Option<Vec<String>>,
    },
    /// `fits.json` written by the `calibrate` command.
    Calibration {
        path: PathBuf,
        #[serde(default)]
        markets: Option<Vec<String>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    SymmetricAverage {
        alpha: f64,
    },
    /// Strikes default to `mu + U(0.9, 1.1)` drawn from `strike_seed`;
    /// weights default to `1/d`.
    Cfd {
        rho: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        strike: Option<Vec<f64>>,
        #[serde(default)]
        strike_seed: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub ou: OuConfig,
    /// Defaults to the long-run mean `mu`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub barriers: BarrierSpec,
    pub payoff: PayoffConfig,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_steps() -> usize {
    presets::DEFAULT_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: EpochSchedule,
    pub retrains: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub warm_start: bool,
    pub reuse_paths: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingConfig {
            batch_size: t.batch_size,
            lr: t.adam.lr,
            epochs: t.epochs,
            retrains: 1,
            seed: 0,
            hidden_width: t.hidden_width,
            hidden_layers: t.hidden_layers,
            warm_start: t.warm_start,
            reuse_paths: t.reuse_paths,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            seed: self.seed,
            warm_start: self.warm_start,
            reuse_paths: self.reuse_paths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Fresh paths per retrain for exit statistics and the payoff estimate.
    pub paths: usize,
    /// Number of individual `Y_t` realisations written out.
    pub export_paths: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { paths: 1 << 14, export_paths: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub paths: usize,
    /// Paths written out individually; the rest only enter the summary.
    pub export_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { paths: 1000, export_paths: 10 }
    }
}

/// Overrides for the automatic oracle grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub nodes: Option<usize>,
    pub quadrature: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub rule: ExpectationRule,
    pub interpolation: Interpolation,
    /// Paths used for the comparison with a trained solver.
    pub compare_paths: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            nodes: None,
            quadrature: None,
            lo: None,
            hi: None,
            rule: ExpectationRule::default(),
            interpolation: Interpolation::default(),
            compare_paths: 1 << 14,
        }
    }
}

impl OracleConfig {
    pub fn grid_spec(&self, game: &GameSpec<f64>) -> Result<GridSpec> {
        let auto = GridSpec::auto(game)?;
        Ok(GridSpec {
            lo: self.lo.unwrap_or(auto.lo),
            hi: self.hi.unwrap_or(auto.hi),
            nodes: self.nodes.unwrap_or(auto.nodes),
            quadrature: self.quadrature.unwrap_or(auto.quadrature),
            rule: self.rule,
            interpolation: self.interpolation,
            ..auto
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub dt: f64,
    pub period_days: i64,
    pub form: LikelihoodForm,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let o = CsvOptions::default();
        CalibrationConfig { dt: o.dt, period_days: o.period_days, form: LikelihoodForm::default() }
    }
}

impl CalibrationConfig {
    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions { dt: self.dt, period_days: self.period_days }
    }
}

/// Summary row of `fits.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub label: String,
    pub kappa: f64,
    pub mu: f64,
    pub sigma: f64,
    pub se_kappa: f64,
    pub se_mu: f64,
    pub se_sigma: f64,
    pub ks_pvalue: f64,
    pub transitions: usize,
    pub warnings: Vec<String>,
}

/// Everything a command needs, with every default filled in.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub game: GameSpec<f64>,
    pub labels: Vec<String>,
    pub strike_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base).validate()
    }

    /// Makes relative file references relative to the config's directory.
    fn rebase(mut self, base: &Path) -> Self {
        if let OuConfig::Calibration { path, .. } = &mut self.game.ou {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        self
    }

    pub fn validate(self) -> Result<Self> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if let OuConfig::Calibration { path, .. } = &self.game.ou {
            if !path.is_file() {
                return Err(Error::Config(format!("calibration file {} does not exist", path.display())));
            }
        }
        if self.training.retrains == 0 {
            return Err(Error::Config("training.retrains must be at least 1".into()));
        }
        if self.evaluation.paths == 0 || self.simulation.paths == 0 {
            return Err(Error::Config("path counts must be at least 1".into()));
        }
        self.training.train_config().validate()?;
        Ok(self)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let g = &self.game;
        let (labels, kappa, mu, sigma) = ou_rows(&g.ou)?;
        let d = kappa.len();
        let ou = OUParams::diagonal(&kappa, &mu, &sigma)?;
        let x0 = g.x0.clone().unwrap_or_else(|| mu.clone());
        let mut strike_seed = None;
        let payoff = match &g.payoff {
            PayoffConfig::SymmetricAverage { alpha } => PayoffSpec::SymmetricAverage { alpha: *alpha },
            PayoffConfig::Cfd { rho, weights, strike, strike_seed: seed } => {
                let strike = match (strike, seed) {
                    (Some(k), _) => k.clone(),
                    (None, Some(s)) => {
                        strike_seed = Some(*s);
                        presets::cfd_strikes(&mu, *s)
                    }
                    (None, None) => return Err(Error::Config("cfd payoff needs either strike or strike_seed".into())),
                };
                PayoffSpec::Cfd { weights: weights.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]), strike, rho: *rho }
            }
        };
        let game = GameSpec { ou, x0, grid: TimeGrid::new(g.horizon, g.steps)?, barriers: g.barriers, payoff };
        game.validate()?;
        Ok(Resolved { game, labels, strike_seed })
    }
}

type Rows = (Vec<String>, Vec<f64>, Vec<f64>, Vec<f64>);

fn select(rows: Vec<(String, f64, f64, f64)>, markets: &Option<Vec<String>>) -> Result<Rows> {
    let picked: Vec<(String, f64, f64, f64)> = match markets {
        None => rows,
        Some(names) => names
            .iter()
            .map(|n| {
                rows.iter()
                    .find(|r| &r.0 == n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("market {n:?} is not available")))
            })
            .collect::<Result<_>>()?,
    };
    if picked.is_empty() {
        return Err(Error::Config("no markets selected".into()));
    }
    Ok((
        picked.iter().map(|r| r.0.clone()).collect(),
        picked.iter().map(|r| r.1).collect(),
        picked.iter().map(|r| r.2).collect(),
        picked.iter().map(|r| r.3).collect(),
    ))
}

fn ou_rows(ou: &OuConfig) -> Result<Rows> {
    match ou {
        OuConfig::Explicit { kappa, mu, sigma } => {
            if kappa.len() != mu.len() || kappa.len() != sigma.len() || kappa.is_empty() {
                return Err(Error::Config("kappa, mu and sigma must be non-empty and of equal length".into()));
            }
            Ok(((0..kappa.len()).map(|i| format!("x{i}")).collect(), kappa.clone(), mu.clone(), sigma.clone()))
        }
        OuConfig::BenchmarkUniform { dim, kappa_seed } => {
            if *dim == 0 {
                return Err(Error::Config("dimension must be at least 1".into()));
            }
            let kappa = presets::benchmark_kappas(*dim, *kappa_seed);
            Ok(((0..*dim).map(|i| format!("x{i}")).collect(), kappa, vec![0.0; *dim], vec![1.0; *dim]))
        }
        OuConfig::MarketTable { markets } => {
            let rows: Vec<(String, f64, f64, f64)> = match markets {
                None => presets::cfd_markets().into_iter().map(|(l, k, m, s)| (l.to_string(), k, m, s)).collect(),
                Some(_) => presets::EU_MARKETS.iter().map(|&(l, k, m, s, _)| (l.to_string(), k, m, s)).collect(),
            };
            select(rows, markets)
        }
        OuConfig::Calibration { path, markets } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let fits: Vec<FitSummary> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            select(fits.into_iter().map(|f| (f.label, f.kappa, f.mu, f.sigma)).collect(), markets)
        }
    }
}
