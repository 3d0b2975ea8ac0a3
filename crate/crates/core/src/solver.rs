//! Backward-in-time neural solver for doubly reflected BSDEs arising from
//! two-player Dynkin games.
//!
//! At each grid time `t_n` a network maps `(t_n, X_n)` to `(Y~_n, Z_n)`.
//! Stage `n` is trained on fresh Euler paths by minimising
//!
//! ```text
//! (1/M) sum_j | Y^_{n+1} - (Y~_n - phi(t_n, X_n) dt + Z_n . dB_{n+1}) |^2
//! ```
//!
//! with `Y^_N = g(X_N)` and `Y^_{n+1} = clamp(Y~_{n+1})` from the frozen
//! stage `n + 1`, where `clamp` projects onto `[-f2, f1]`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{sample_stage, simulate_paths, OUParams, PathBatch, TimeGrid};
use crate::neural::{self, adam_step, init_params, AdamConfig, AdamState, GradientBundle, MlpParams, MlpSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::stats::{self, Summary};

/// Early-exit penalties: player 1 pays `f1` (upper barrier), player 2 pays
/// `f2` (lower barrier is `-f2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BarrierSpec {
    Constant { upper: f64, lower: f64 },
    /// `f1 = gamma1 e^{-rho t}`, `f2 = gamma2 e^{-rho t}`.
    ExpDecay { gamma1: f64, gamma2: f64, rho: f64 },
}

impl BarrierSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BarrierSpec::Constant { upper, lower } => {
                if !upper.is_finite() || !lower.is_finite() {
                    return Err(Error::Config("barrier levels must be finite".into()));
                }
                if !(upper + lower > 0.0) {
                    return Err(Error::Model(format!("lower barrier {} is not below upper barrier {upper}", -lower)));
                }
            }
            BarrierSpec::ExpDecay { gamma1, gamma2, rho } => {
                if !(gamma1 > 0.0 && gamma2 > 0.0 && rho > 0.0) || !(gamma1 + gamma2 + rho).is_finite() {
                    return Err(Error::Config(format!(
                        "exponential barriers need gamma1, gamma2, rho > 0, got ({gamma1}, {gamma2}, {rho})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn f1<S: Scalar>(&self, t: S) -> S {
        match *self {
            BarrierSpec::Constant { upper, .. } => S::of(upper),
            BarrierSpec::ExpDecay { gamma1, rho, .. } => S::of(gamma1) * (-S::of(rho) * t).exp(),
        }
    }

    pub fn f2<S: Scalar>(&self, t: S) -> S {
        match *self {
            BarrierSpec::Constant { lower, .. } => S::of(lower),
            BarrierSpec::ExpDecay { gamma2, rho, .. } => S::of(gamma2) * (-S::of(rho) * t).exp(),
        }
    }

    /// `(-f2(t), f1(t))`, checked for strict separation.
    pub fn bounds<S: Scalar>(&self, t: S) -> Result<(S, S)> {
        let (lo, hi) = (-self.f2(t), self.f1(t));
        if !(lo < hi) {
            return Err(Error::Model(format!(
                "barriers inverted at t = {}: -f2 = {} >= f1 = {}",
                t.as_f64(),
                lo.as_f64(),
                hi.as_f64()
            )));
        }
        Ok((lo, hi))
    }

    /// The game seen from the other player: penalties exchanged.
    pub fn swapped(&self) -> Self {
        match *self {
            BarrierSpec::Constant { upper, lower } => BarrierSpec::Constant { upper: lower, lower: upper },
            BarrierSpec::ExpDecay { gamma1, gamma2, rho } => BarrierSpec::ExpDecay { gamma1: gamma2, gamma2: gamma1, rho },
        }
    }
}

type RunningFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// User-supplied running payoff `phi(t, x)` and terminal payoff `g(x)`.
#[derive(Clone)]
pub struct CustomPayoff {
    pub label: String,
    pub running: Arc<RunningFn>,
    pub terminal: Arc<TerminalFn>,
}

impl std::fmt::Debug for CustomPayoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomPayoff({})", self.label)
    }
}

impl PartialEq for CustomPayoff {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && Arc::ptr_eq(&self.running, &other.running) && Arc::ptr_eq(&self.terminal, &other.terminal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// `phi(t, x) = -(alpha / d) 1'x`, `g = 0`.
    SymmetricAverage { alpha: f64 },
    /// `phi(t, x) = <w, (K - x) e^{-rho t}>`, `g = 0`.
    Cfd { weights: Vec<f64>, strike: Vec<f64>, rho: f64 },
    #[serde(skip)]
    Custom(CustomPayoff),
}

impl PayoffSpec {
    pub fn custom(
        label: &str,
        running: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        PayoffSpec::Custom(CustomPayoff { label: label.into(), running: Arc::new(running), terminal: Arc::new(terminal) })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            PayoffSpec::SymmetricAverage { alpha } => {
                if !alpha.is_finite() {
                    return Err(Error::Config("alpha must be finite".into()));
                }
            }
            PayoffSpec::Cfd { weights, strike, rho } => {
                if weights.len() != d || strike.len() != d {
                    return Err(Error::Config(format!(
                        "CfD needs {d} weights and strikes, got {} and {}",
                        weights.len(),
                        strike.len()
                    )));
                }
                if weights.iter().chain(strike).any(|v| !v.is_finite()) || !rho.is_finite() {
                    return Err(Error::Config("CfD weights, strikes and rho must be finite".into()));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("CfD weights sum to {sum}, expected 1")));
                }
            }
            PayoffSpec::Custom(_) => {}
        }
        Ok(())
    }

    /// Sign-flipped running payoff (terminal payoff negated as well).
    pub fn negated(&self) -> Self {
        match self {
            PayoffSpec::SymmetricAverage { alpha } => PayoffSpec::SymmetricAverage { alpha: -alpha },
            PayoffSpec::Cfd { weights, strike, rho } => {
                let (w, k, r) = (weights.clone(), strike.clone(), *rho);
                PayoffSpec::custom("negated cfd", move |t, x| -cfd_phi(&w, &k, r, t, x), |_| 0.0)
            }
            PayoffSpec::Custom(c) => {
                let (run, term) = (c.running.clone(), c.terminal.clone());
                PayoffSpec::custom(&format!("negated {}", c.label), move |t, x| -run(t, x), move |x| -term(x))
            }
        }
    }

    pub fn running_at(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            PayoffSpec::SymmetricAverage { alpha } => -alpha / x.len() as f64 * x.iter().sum::<f64>(),
            PayoffSpec::Cfd { weights, strike, rho } => cfd_phi(weights, strike, *rho, t, x),
            PayoffSpec::Custom(c) => (c.running)(t, x),
        }
    }

    pub fn terminal_at(&self, x: &[f64]) -> f64 {
        match self {
            PayoffSpec::Custom(c) => (c.terminal)(x),
            _ => 0.0,
        }
    }

    /// `phi(t, x_j)` for every row of `x`.
    pub fn running<S: Scalar>(&self, t: S, x: ArrayView2<S>) -> Array1<S> {
        match self {
            PayoffSpec::SymmetricAverage { alpha } => {
                let c = S::of(-alpha / x.ncols() as f64);
                x.sum_axis(Axis(1)).mapv(|v| c * v)
            }
            PayoffSpec::Cfd { weights, strike, rho } => {
                let disc = (-S::of(*rho) * t).exp();
                let w: Vec<S> = weights.iter().map(|&v| S::of(v)).collect();
                let k: Vec<S> = strike.iter().map(|&v| S::of(v)).collect();
                x.outer_iter()
                    .map(|row| row.iter().enumerate().fold(S::zero(), |acc, (i, &xi)| acc + w[i] * (k[i] - xi)) * disc)
                    .collect()
            }
            PayoffSpec::Custom(c) => {
                let tf = t.as_f64();
                x.outer_iter()
                    .map(|row| {
                        let v: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                        S::of((c.running)(tf, &v))
                    })
                    .collect()
            }
        }
    }

    /// `g(x_j)` for every row of `x`.
    pub fn terminal<S: Scalar>(&self, x: ArrayView2<S>) -> Array1<S> {
        match self {
            PayoffSpec::Custom(c) => x
                .outer_iter()
                .map(|row| {
                    let v: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    S::of((c.terminal)(&v))
                })
                .collect(),
            _ => Array1::zeros(x.nrows()),
        }
    }
}

fn cfd_phi(w: &[f64], k: &[f64], rho: f64, t: f64, x: &[f64]) -> f64 {
    let s: f64 = w.iter().zip(k).zip(x).map(|((w, k), x)| w * (k - x)).sum();
    s * (-rho * t).exp()
}

/// A complete game: forward dynamics, grid, barriers and payoffs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct GameSpec<S: Scalar = f64> {
    pub ou: OUParams<S>,
    pub x0: Vec<S>,
    pub grid: TimeGrid<S>,
    pub barriers: BarrierSpec,
    pub payoff: PayoffSpec,
}

impl<S: Scalar> GameSpec<S> {
    pub fn dim(&self) -> usize {
        self.ou.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.len() != self.ou.dim() {
            return Err(Error::Config(format!(
                "x0 has {} components, the price model has {}",
                self.x0.len(),
                self.ou.dim()
            )));
        }
        self.barriers.validate()?;
        self.payoff.validate(self.ou.dim())?;
        for &t in self.grid.nodes() {
            self.barriers.bounds(t)?;
        }
        Ok(())
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Ok(GameSpec { grid: TimeGrid::new(self.grid.horizon(), steps)?, ..self.clone() })
    }

    pub fn simulate(&self, m: usize, seed: u64) -> Result<PathBatch<S>> {
        simulate_paths(&self.ou, ArrayView1::from(&self.x0), &self.grid, m, seed)
    }

    pub fn cast<T: Scalar>(&self) -> GameSpec<T> {
        GameSpec {
            ou: self.ou.cast(),
            x0: self.x0.iter().map(|v| T::of(v.as_f64())).collect(),
            grid: self.grid.cast(),
            barriers: self.barriers.clone(),
            payoff: self.payoff.clone(),
        }
    }
}

/// Elementwise `min(max(y, -f2(t)), f1(t))`.
pub fn clamp_to_barriers<S: Scalar>(y_tilde: ArrayView1<S>, t: S, barriers: &BarrierSpec) -> Result<Array1<S>> {
    let (lo, hi) = barriers.bounds(t)?;
    Ok(y_tilde.mapv(|v| v.max(lo).min(hi)))
}

/// Number of epochs per stage: `long` for the last `long_stages` stages
/// (trained first), `short` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSchedule {
    pub long: usize,
    pub short: usize,
    pub long_stages: usize,
}

impl Default for EpochSchedule {
    fn default() -> Self {
        EpochSchedule { long: 500, short: 100, long_stages: 2 }
    }
}

impl EpochSchedule {
    pub fn uniform(epochs: usize) -> Self {
        EpochSchedule { long: epochs, short: epochs, long_stages: 0 }
    }

    pub fn epochs(&self, n: usize, steps: usize) -> usize {
        if n + self.long_stages >= steps {
            self.long
        } else {
            self.short
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: EpochSchedule,
    pub adam: AdamConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    /// Initialise stage `n` from the trained stage `n + 1`.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Train every epoch of a stage on the same batch instead of fresh paths.
    #[serde(default)]
    pub reuse_paths: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1 << 10,
            epochs: EpochSchedule::default(),
            adam: AdamConfig::default(),
            hidden_width: 50,
            hidden_layers: 3,
            seed: 0,
            warm_start: true,
            reuse_paths: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid optimiser settings {a:?}")));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mlp_spec(&self, d: usize) -> MlpSpec {
        MlpSpec { hidden_width: self.hidden_width, hidden_layers: self.hidden_layers, ..MlpSpec::stage_default(d) }
    }
}

/// Per-feature affine standardisation of the network input `(t, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct Normalizer<S: Scalar = f64> {
    pub mean: Vec<S>,
    pub scale: Vec<S>,
}

impl<S: Scalar> Normalizer<S> {
    /// Sample mean and standard deviation of `(t, x_j)`; features with
    /// (numerically) zero spread get unit scale.
    pub fn fit(t: S, x: ArrayView2<S>) -> Self {
        let m = S::of_usize(x.nrows());
        let mut mean = vec![t];
        let mut scale = vec![S::one()];
        for col in x.axis_iter(Axis(1)) {
            let mu = col.sum() / m;
            let var = col.fold(S::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / m;
            let sd = var.sqrt();
            let floor = S::of(1e-8) * mu.abs().max(S::one());
            mean.push(mu);
            scale.push(if sd > floor { sd } else { S::one() });
        }
        Normalizer { mean, scale }
    }

    pub fn apply(&self, t: S, x: ArrayView2<S>) -> Array2<S> {
        let (m, d) = x.dim();
        let mut out = Array2::zeros((m, d + 1));
        out.column_mut(0).fill((t - self.mean[0]) / self.scale[0]);
        Zip::from(out.slice_mut(s![.., 1..]).columns_mut())
            .and(x.columns())
            .and(&ArrayView1::from(&self.mean[1..]))
            .and(&ArrayView1::from(&self.scale[1..]))
            .for_each(|mut o, xc, &mu, &sd| Zip::from(&mut o).and(&xc).for_each(|o, &v| *o = (v - mu) / sd));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.scale.len()
            || self.mean.iter().any(|v| !v.is_finite())
            || self.scale.iter().any(|v| !(v.is_finite() && *v > S::zero()))
        {
            return Err(Error::Data("normalizer statistics must be finite with positive scale".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageNetwork<S: Scalar = f64> {
    pub step: usize,
    pub params: MlpParams<S>,
    pub normalizer: Normalizer<S>,
}

impl<S: Scalar> StageNetwork<S> {
    /// Raw outputs `(Y~, Z_1..Z_d)` per row.
    pub fn eval(&self, t: S, x: ArrayView2<S>) -> Result<Array2<S>> {
        self.params.predict(self.normalizer.apply(t, x).view())
    }
}

/// Loss and residuals of one stage given network outputs.
#[derive(Clone, Debug)]
pub struct StageLoss<S: Scalar = f64> {
    pub loss: S,
    /// `r_j = Y^_{n+1} - (Y~_n - phi dt + Z_n . dB)`.
    pub residuals: Array1<S>,
}

/// Mean squared one-step residual for outputs `out = (Y~_n, Z_n)`.
pub fn loss_from_outputs<S: Scalar>(
    out: ArrayView2<S>,
    next_y_hat: ArrayView1<S>,
    phi_dt: ArrayView1<S>,
    db: ArrayView2<S>,
) -> Result<StageLoss<S>> {
    let m = out.nrows();
    if next_y_hat.len() != m || phi_dt.len() != m || db.nrows() != m || out.ncols() != db.ncols() + 1 {
        return Err(Error::Contract(format!(
            "stage loss shapes disagree: outputs {:?}, targets {}, phi {}, dB {:?}",
            out.dim(),
            next_y_hat.len(),
            phi_dt.len(),
            db.dim()
        )));
    }
    let mut residuals = Array1::zeros(m);
    Zip::from(&mut residuals)
        .and(out.rows())
        .and(&next_y_hat)
        .and(&phi_dt)
        .and(db.rows())
        .for_each(|r, o, &target, &pd, b| {
            let zdb = o.slice(s![1..]).dot(&b);
            *r = target - (o[0] - pd + zdb);
        });
    let loss = residuals.fold(S::zero(), |acc, &r| acc + r * r) / S::of_usize(m);
    Ok(StageLoss { loss, residuals })
}

/// Stage loss and its gradient with respect to every parameter of `params`,
/// for already normalised inputs.
pub fn stage_gradient<S: Scalar>(
    params: &MlpParams<S>,
    input: ArrayView2<S>,
    next_y_hat: ArrayView1<S>,
    phi_dt: ArrayView1<S>,
    db: ArrayView2<S>,
) -> Result<(StageLoss<S>, GradientBundle<S>)> {
    let (out, tape) = params.forward(input)?;
    let sl = loss_from_outputs(out.view(), next_y_hat, phi_dt, db)?;
    let two = S::of(2.0);
    let mut g = Array2::zeros(out.raw_dim());
    Zip::from(g.rows_mut()).and(&sl.residuals).and(db.rows()).for_each(|mut row, &r, b| {
        row[0] = -two * r;
        Zip::from(row.slice_mut(s![1..])).and(&b).for_each(|gz, &bk| *gz = -two * r * bk);
    });
    let grads = params.backward(&tape, g.view())?;
    Ok((sl, grads))
}

/// Stage loss of `net` at step `n` on states `x_n` with increments `db`.
pub fn stage_loss<S: Scalar>(
    net: &StageNetwork<S>,
    next_y_hat: ArrayView1<S>,
    x_n: ArrayView2<S>,
    db: ArrayView2<S>,
    payoff: &PayoffSpec,
    grid: &TimeGrid<S>,
) -> Result<StageLoss<S>> {
    let t = grid.time(net.step);
    let out = net.eval(t, x_n)?;
    let phi_dt = payoff.running(t, x_n).mapv(|v| v * grid.dt());
    loss_from_outputs(out.view(), next_y_hat, phi_dt.view(), db)
}

#[derive(Clone, Debug)]
pub struct TrainedSolver<S: Scalar = f64> {
    pub game: GameSpec<S>,
    pub config: TrainConfig,
    pub stages: Vec<StageNetwork<S>>,
    pub loss_history: Vec<Vec<f64>>,
}

impl<S: Scalar> TrainedSolver<S> {
    /// Loss of the last epoch of each stage.
    pub fn final_losses(&self) -> Vec<f64> {
        self.loss_history.iter().map(|h| h.last().copied().unwrap_or(f64::NAN)).collect()
    }

    /// Clamped stage-0 value at the initial state.
    pub fn y0(&self) -> Result<S> {
        let x0 = Array2::from_shape_vec((1, self.game.dim()), self.game.x0.clone()).unwrap();
        let out = self.stages[0].eval(S::zero(), x0.view())?;
        let (lo, hi) = self.game.barriers.bounds(S::zero())?;
        Ok(out[[0, 0]].max(lo).min(hi))
    }
}

fn clamped_y<S: Scalar>(net: &StageNetwork<S>, t: S, x: ArrayView2<S>, barriers: &BarrierSpec) -> Result<Array1<S>> {
    let out = net.eval(t, x)?;
    clamp_to_barriers(out.column(0), t, barriers)
}

/// Trains all stages from `N - 1` down to `0`.
pub fn train_backward<S: Scalar>(game: &GameSpec<S>, cfg: &TrainConfig) -> Result<TrainedSolver<S>> {
    game.validate()?;
    cfg.validate()?;
    let grid = &game.grid;
    let steps = grid.steps();
    let d = game.dim();
    let spec = cfg.mlp_spec(d);
    let x0 = ArrayView1::from(&game.x0);
    let dt = grid.dt();
    let m = cfg.batch_size;

    let mut stages: Vec<StageNetwork<S>> = Vec::with_capacity(steps);
    let mut loss_history = vec![Vec::new(); steps];
    for n in (0..steps).rev() {
        let t_n = grid.time(n);
        let t_next = grid.time(n + 1);
        let epochs = cfg.epochs.epochs(n, steps);
        let mut params = match (cfg.warm_start, stages.last()) {
            (true, Some(next)) => next.params.clone(),
            _ => init_params::<S>(&spec, rng::derive(cfg.seed, &[rng::tag("init"), n as u64]))?,
        };
        let mut adam = AdamState::new(&params, cfg.adam);
        let mut normalizer: Option<Normalizer<S>> = None;
        let mut history = Vec::with_capacity(epochs);
        for e in 0..epochs.max(1) {
            let key = if cfg.reuse_paths { 0 } else { e as u64 };
            let batch = sample_stage(&game.ou, x0, grid, n, m, rng::derive(cfg.seed, &[rng::tag("paths"), n as u64, key]))?;
            let x_n = batch.x_n.view();
            let x_next = batch.x_next.view();
            let db = batch.increment.view();
            let norm = normalizer.get_or_insert_with(|| Normalizer::fit(t_n, x_n));
            if e >= epochs {
                break;
            }
            let target = match stages.last() {
                None => game.payoff.terminal(x_next),
                Some(next) => clamped_y(next, t_next, x_next, &game.barriers)?,
            };
            let input = norm.apply(t_n, x_n);
            let phi_dt = game.payoff.running(t_n, x_n).mapv(|v| v * dt);
            let (sl, grads) = stage_gradient(&params, input.view(), target.view(), phi_dt.view(), db)?;
            let loss = sl.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Training { stage: n, detail: format!("loss became {loss} at epoch {e}") });
            }
            history.push(loss);
            adam_step(&mut params, &grads, &mut adam)
                .map_err(|e| Error::Training { stage: n, detail: e.to_string() })?;
        }
        let normalizer = normalizer.expect("at least one batch is drawn per stage");
        normalizer.validate()?;
        loss_history[n] = history;
        stages.push(StageNetwork { step: n, params, normalizer });
    }
    stages.reverse();
    Ok(TrainedSolver { game: game.clone(), config: cfg.clone(), stages, loss_history })
}

/// Network values along a batch of paths.
#[derive(Clone, Debug)]
pub struct Rollout<S: Scalar = f64> {
    /// `(N+1) x M`; row `N` holds `g(X_N)`.
    pub y_tilde: Array2<S>,
    /// `(N+1) x M`, clamped.
    pub y_hat: Array2<S>,
    /// `N x M x d`.
    pub z: Array3<S>,
}

pub fn rollout<S: Scalar>(solver: &TrainedSolver<S>, paths: &PathBatch<S>) -> Result<Rollout<S>> {
    let grid = &solver.game.grid;
    if paths.grid != *grid {
        return Err(Error::Contract("paths were simulated on a different grid".into()));
    }
    if paths.dim() != solver.game.dim() {
        return Err(Error::Contract(format!("paths have dimension {}, game has {}", paths.dim(), solver.game.dim())));
    }
    let steps = grid.steps();
    let m = paths.paths();
    let d = paths.dim();
    let mut y_tilde = Array2::zeros((steps + 1, m));
    let mut y_hat = Array2::zeros((steps + 1, m));
    let mut z = Array3::zeros((steps, m, d));
    for n in 0..steps {
        let t = grid.time(n);
        let out = solver.stages[n].eval(t, paths.at(n))?;
        y_tilde.row_mut(n).assign(&out.column(0));
        y_hat.row_mut(n).assign(&clamp_to_barriers(out.column(0), t, &solver.game.barriers)?);
        z.index_axis_mut(Axis(0), n).assign(&out.slice(s![.., 1..]));
    }
    let g = solver.game.payoff.terminal(paths.at(steps));
    y_tilde.row_mut(steps).assign(&g);
    y_hat.row_mut(steps).assign(&g);
    Ok(Rollout { y_tilde, y_hat, z })
}

/// Grid indices of the first barrier contact per path; `N` (i.e. `T`) if
/// the path never reaches the barrier before maturity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExitTimes {
    pub tau1: Vec<usize>,
    pub tau2: Vec<usize>,
}

/// Contact means the unclamped value reaches `f1` (player 1) or `-f2`
/// (player 2). The terminal node never counts as an exit.
pub fn extract_exit_times<S: Scalar>(y_tilde: ArrayView2<S>, barriers: &BarrierSpec, grid: &TimeGrid<S>) -> Result<ExitTimes> {
    let steps = grid.steps();
    if y_tilde.nrows() < steps {
        return Err(Error::Contract(format!("need {steps} time rows, got {}", y_tilde.nrows())));
    }
    let m = y_tilde.ncols();
    let mut tau1 = vec![steps; m];
    let mut tau2 = vec![steps; m];
    for n in (0..steps).rev() {
        let (lo, hi) = barriers.bounds(grid.time(n))?;
        for (j, &v) in y_tilde.row(n).iter().enumerate() {
            if v >= hi {
                tau1[j] = n;
            }
            if v <= lo {
                tau2[j] = n;
            }
        }
    }
    Ok(ExitTimes { tau1, tau2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Player1,
    Player2,
    Maturity,
}

impl ExitTimes {
    /// Who ends the game on path `j`, and at which index. Player 1 wins ties.
    pub fn outcome(&self, j: usize, steps: usize) -> (Exit, usize) {
        let (a, b) = (self.tau1[j], self.tau2[j]);
        if a <= b && a < steps {
            (Exit::Player1, a)
        } else if b < a {
            (Exit::Player2, b)
        } else {
            (Exit::Maturity, steps)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// Monte Carlo estimate of the game payoff for given stopping indices,
/// with the running integral by left-endpoint quadrature.
pub fn evaluate_payoff<S: Scalar>(
    paths: &PathBatch<S>,
    tau1: &[usize],
    tau2: &[usize],
    payoff: &PayoffSpec,
    barriers: &BarrierSpec,
) -> Result<PayoffEstimate> {
    let grid = &paths.grid;
    let steps = grid.steps();
    let m = paths.paths();
    if tau1.len() != m || tau2.len() != m {
        return Err(Error::Contract(format!("{m} paths but {} / {} stopping times", tau1.len(), tau2.len())));
    }
    if tau1.iter().chain(tau2).any(|&t| t > steps) {
        return Err(Error::Contract("stopping index beyond maturity".into()));
    }
    let dt = grid.dt().as_f64();
    let times = ExitTimes { tau1: tau1.to_vec(), tau2: tau2.to_vec() };
    let stop: Vec<usize> = (0..m).map(|j| times.outcome(j, steps).1).collect();
    let mut values = vec![0.0f64; m];
    for n in 0..steps {
        if stop.iter().all(|&s| s <= n) {
            break;
        }
        let phi = payoff.running(grid.time(n), paths.at(n));
        for j in 0..m {
            if n < stop[j] {
                values[j] += phi[j].as_f64() * dt;
            }
        }
    }
    let g = payoff.terminal(paths.at(steps));
    for (j, v) in values.iter_mut().enumerate() {
        let (who, at) = times.outcome(j, steps);
        *v += match who {
            Exit::Player1 => barriers.f1(grid.time(at)).as_f64(),
            Exit::Player2 => -barriers.f2(grid.time(at)).as_f64(),
            Exit::Maturity => g[j].as_f64(),
        };
    }
    let sm = stats::summarize(&values);
    Ok(PayoffEstimate { mean: sm.mean, std_error: sm.std_error, paths: m })
}

/// Exit statistics over one evaluation batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSummary {
    pub paths: usize,
    pub no_exit_fraction: f64,
    pub player1_fraction: f64,
    pub player2_fraction: f64,
    /// Mean exit time over paths that end early; NaN if none do.
    pub mean_exit_time: f64,
    /// Exit times of the paths that player 1 (resp. 2) ends early.
    pub exit_times_p1: Vec<f64>,
    pub exit_times_p2: Vec<f64>,
    /// Largest overshoot of the unclamped value beyond either barrier.
    pub barrier_violation_max: f64,
}

pub fn summarize_exits<S: Scalar>(
    roll: &Rollout<S>,
    times: &ExitTimes,
    barriers: &BarrierSpec,
    grid: &TimeGrid<S>,
) -> Result<ExitSummary> {
    let steps = grid.steps();
    let m = times.tau1.len();
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for j in 0..m {
        match times.outcome(j, steps) {
            (Exit::Player1, n) => p1.push(grid.time(n).as_f64()),
            (Exit::Player2, n) => p2.push(grid.time(n).as_f64()),
            _ => {}
        }
    }
    let mut violation = 0.0f64;
    for n in 0..steps {
        let (lo, hi) = barriers.bounds(grid.time(n))?;
        for &v in roll.y_tilde.row(n) {
            violation = violation.max((v - hi).as_f64()).max((lo - v).as_f64());
        }
    }
    let exits = p1.len() + p2.len();
    let mean_exit_time = if exits > 0 { (p1.iter().sum::<f64>() + p2.iter().sum::<f64>()) / exits as f64 } else { f64::NAN };
    Ok(ExitSummary {
        paths: m,
        no_exit_fraction: (m - exits) as f64 / m as f64,
        player1_fraction: p1.len() as f64 / m as f64,
        player2_fraction: p2.len() as f64 / m as f64,
        mean_exit_time,
        exit_times_p1: p1,
        exit_times_p2: p2,
        barrier_violation_max: violation,
    })
}

/// Everything measured on one trained solver with one evaluation batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub y0: f64,
    pub exits: ExitSummary,
    pub payoff: PayoffEstimate,
    pub final_losses: Vec<f64>,
}

pub fn evaluate<S: Scalar>(solver: &TrainedSolver<S>, eval_paths: usize, seed: u64) -> Result<Evaluation> {
    let paths = solver.game.simulate(eval_paths, seed)?;
    let roll = rollout(solver, &paths)?;
    let grid = &solver.game.grid;
    let times = extract_exit_times(roll.y_tilde.view(), &solver.game.barriers, grid)?;
    let exits = summarize_exits(&roll, &times, &solver.game.barriers, grid)?;
    let payoff = evaluate_payoff(&paths, &times.tau1, &times.tau2, &solver.game.payoff, &solver.game.barriers)?;
    Ok(Evaluation { seed: solver.config.seed, y0: solver.y0()?.as_f64(), exits, payoff, final_losses: solver.final_losses() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Y0Source {
    /// One value per independent retrain.
    Retrains,
    /// One value per evaluation path of a single solver.
    EvaluationPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub y0_samples: Vec<f64>,
    pub y0_source: Y0Source,
    pub y0: Summary,
    /// Pooled over retrains.
    pub exit_times_p1: Vec<f64>,
    pub exit_times_p2: Vec<f64>,
    pub no_exit_fraction: f64,
    pub player1_fraction: f64,
    pub player2_fraction: f64,
    pub mean_exit_time: f64,
    /// Payoff of the learned stopping rule, averaged over retrains, with
    /// the standard error of the pooled estimate.
    pub payoff: PayoffEstimate,
    pub barrier_violation_max: f64,
    pub retrains: Vec<Evaluation>,
}

impl SolveReport {
    pub fn from_evaluations(evals: Vec<Evaluation>) -> Self {
        let y0_samples: Vec<f64> = evals.iter().map(|e| e.y0).collect();
        let total: usize = evals.iter().map(|e| e.exits.paths).sum();
        let weighted = |f: &dyn Fn(&Evaluation) -> f64| evals.iter().map(|e| f(e) * e.exits.paths as f64).sum::<f64>() / total as f64;
        let p1: Vec<f64> = evals.iter().flat_map(|e| e.exits.exit_times_p1.iter().copied()).collect();
        let p2: Vec<f64> = evals.iter().flat_map(|e| e.exits.exit_times_p2.iter().copied()).collect();
        let exits = p1.len() + p2.len();
        let mean_exit_time =
            if exits > 0 { (p1.iter().sum::<f64>() + p2.iter().sum::<f64>()) / exits as f64 } else { f64::NAN };
        let k = evals.len() as f64;
        let payoff = PayoffEstimate {
            mean: evals.iter().map(|e| e.payoff.mean).sum::<f64>() / k,
            std_error: evals.iter().map(|e| e.payoff.std_error.powi(2)).sum::<f64>().sqrt() / k,
            paths: evals.iter().map(|e| e.payoff.paths).sum(),
        };
        SolveReport {
            y0: stats::summarize(&y0_samples),
            y0_samples,
            y0_source: Y0Source::Retrains,
            no_exit_fraction: weighted(&|e| e.exits.no_exit_fraction),
            player1_fraction: weighted(&|e| e.exits.player1_fraction),
            player2_fraction: weighted(&|e| e.exits.player2_fraction),
            mean_exit_time,
            exit_times_p1: p1,
            exit_times_p2: p2,
            payoff,
            barrier_violation_max: evals.iter().map(|e| e.exits.barrier_violation_max).fold(0.0, f64::max),
            retrains: evals,
        }
    }
}

pub fn retrain_seed(base_seed: u64, retrain: usize) -> u64 {
    rng::derive(base_seed, &[rng::tag("retrain"), retrain as u64])
}

pub fn eval_seed(train_seed: u64) -> u64 {
    rng::derive(train_seed, &[rng::tag("eval")])
}

/// Trains `retrains` independent solvers and evaluates each on its own
/// batch of `eval_paths` fresh paths. The first solver is returned for
/// persistence.
pub fn y0_distribution<S: Scalar>(
    game: &GameSpec<S>,
    cfg: &TrainConfig,
    retrains: usize,
    eval_paths: usize,
    base_seed: u64,
) -> Result<(SolveReport, TrainedSolver<S>)> {
    if retrains == 0 {
        return Err(Error::Config("retrains must be at least 1".into()));
    }
    let runs: Vec<(Evaluation, Option<TrainedSolver<S>>)> = (0..retrains)
        .into_par_iter()
        .map(|r| {
            let seed = retrain_seed(base_seed, r);
            let run = || -> Result<(Evaluation, Option<TrainedSolver<S>>)> {
                let solver = train_backward(game, &TrainConfig { seed, ..cfg.clone() })?;
                let ev = evaluate(&solver, eval_paths, eval_seed(seed))?;
                Ok((ev, (r == 0).then_some(solver)))
            };
            run().map_err(|e| Error::Retrain { retrain: r, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let mut first = None;
    let mut evals = Vec::with_capacity(retrains);
    for (ev, solver) in runs {
        evals.push(ev);
        first = first.or(solver);
    }
    Ok((SolveReport::from_evaluations(evals), first.expect("retrain 0 is kept")))
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
struct SolverManifest<S: Scalar> {
    format: u32,
    dtype: String,
    game: GameSpec<S>,
    config: TrainConfig,
    final_losses: Vec<Option<f64>>,
    normalizers: Vec<Normalizer<S>>,
}

const SOLVER_FORMAT: u32 = 1;

fn stage_prefix(dir: &Path, n: usize) -> std::path::PathBuf {
    dir.join(format!("stage_{n:03}"))
}

/// Writes `solver.json` plus one parameter blob per stage into `dir`.
pub fn save_solver<S: Scalar>(solver: &TrainedSolver<S>, dir: &Path) -> Result<Vec<String>> {
    if matches!(solver.game.payoff, PayoffSpec::Custom(_)) {
        return Err(Error::Unsupported("solvers with custom payoffs cannot be persisted".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SolverManifest {
        format: SOLVER_FORMAT,
        dtype: S::DTYPE.into(),
        game: solver.game.clone(),
        config: solver.config.clone(),
        final_losses: solver.final_losses().into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        normalizers: solver.stages.iter().map(|s| s.normalizer.clone()).collect(),
    };
    let mut files = vec!["solver.json".to_string()];
    let path = dir.join("solver.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    for stage in &solver.stages {
        neural::save_params(&stage.params, &stage_prefix(dir, stage.step))?;
        files.push(format!("stage_{:03}.json", stage.step));
        files.push(format!("stage_{:03}.bin", stage.step));
    }
    Ok(files)
}

pub fn load_solver<S: Scalar>(dir: &Path) -> Result<TrainedSolver<S>> {
    let path = dir.join("solver.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SolverManifest<S> = serde_json::from_slice(&bytes)?;
    if manifest.format != SOLVER_FORMAT {
        return Err(Error::Data(format!("unsupported solver format {}", manifest.format)));
    }
    manifest.game.validate()?;
    let steps = manifest.game.grid.steps();
    if manifest.normalizers.len() != steps {
        return Err(Error::Data(format!("{} normalizers for {steps} stages", manifest.normalizers.len())));
    }
    let mut stages = Vec::with_capacity(steps);
    for (n, normalizer) in manifest.normalizers.into_iter().enumerate() {
        normalizer.validate()?;
        let params: MlpParams<S> = neural::load_params(&stage_prefix(dir, n))?;
        if params.spec().input_dim != manifest.game.dim() + 1 || params.spec().output_dim != manifest.game.dim() + 1 {
            return Err(Error::Data(format!("stage {n} network does not match the game dimension")));
        }
        stages.push(StageNetwork { step: n, params, normalizer });
    }
    Ok(TrainedSolver {
        game: manifest.game,
        config: manifest.config,
        stages,
        loss_history: manifest.final_losses.into_iter().map(|v| vec![v.unwrap_or(f64::NAN)]).collect(),
    })
}
