//! Reference solutions for one-dimensional games.
//!
//! [`grid_dp_solve`] runs the discrete backward scheme
//!
//! ```text
//! Y_N = g(X_N)
//! Y~_n(x) = E[Y_{n+1}(X_{n+1}) | X_n = x] + phi(t_n, x) dt
//! Y_n(x) = min(max(Y~_n(x), -f2(t_n)), f1(t_n))
//! ```
//!
//! on a spatial grid, with the conditional expectation taken by
//! Gauss–Hermite quadrature over an interpolant of `Y_{n+1}`.
//! [`nested_mc_solve`] evaluates the same recursion by brute-force nested
//! simulation and serves as an independent check on short grids.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::market::{ou_marginal, scalar_transition, PathBatch, TransitionMode};
use crate::rng;
use crate::solver::{self, evaluate_payoff, ExitTimes, GameSpec, PayoffEstimate, TrainedSolver};
use crate::stats::{self, KsResult};

pub const MIN_NODES: usize = 200;
pub const MIN_QUADRATURE: usize = 16;
pub const MAX_QUADRATURE: usize = 1024;
pub const COVERAGE_TOL: f64 = 1e-6;

/// Gauss–Hermite rule for `int exp(-x^2) f(x) dx`: `(nodes, weights)`,
/// nodes ascending, from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!((1..=MAX_QUADRATURE).contains(&q), "Gauss–Hermite order {q} outside 1..={MAX_QUADRATURE}");
    let mut d = vec![0.0; q];
    let mut e: Vec<f64> = (0..q).map(|i| if i + 1 < q { ((i + 1) as f64 / 2.0).sqrt() } else { 0.0 }).collect();
    let mut z0 = vec![0.0; q];
    z0[0] = 1.0;
    tridiagonal_ql(&mut d, &mut e, &mut z0);
    let mut pairs: Vec<(f64, f64)> =
        d.into_iter().zip(z0).map(|(x, v)| (x, std::f64::consts::PI.sqrt() * v * v)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrise
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if q % 2 == 1 {
        pairs[q / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Implicit QL on a symmetric tridiagonal matrix (diagonal `d`,
/// sub-diagonal `e[0..n-1]`). On return `d` holds the eigenvalues and `z`
/// the first row of the eigenvector matrix, given `z` = first row of the
/// identity on entry.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        for _ in 0..200 {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let fz = z[i + 1];
                z[i + 1] = s * z[i] + c * fz;
                z[i] = c * z[i] - s * fz;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Nodes `xi_k` and probability weights `p_k` with
/// `E[f(N(0, 1))] ~ sum_k p_k f(xi_k)`.
pub fn standard_normal_rule(q: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(q);
    let s = std::f64::consts::SQRT_2;
    let c = std::f64::consts::PI.sqrt();
    (x.iter().map(|v| v * s).collect(), w.iter().map(|v| v / c).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Monotone piecewise-cubic Hermite (Fritsch–Carlson slopes).
    #[default]
    Pchip,
    Linear,
}

/// Values on a uniform grid with constant extension beyond the ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolant {
    lo: f64,
    h: f64,
    y: Vec<f64>,
    slopes: Option<Vec<f64>>,
}

impl Interpolant {
    pub fn new(lo: f64, h: f64, y: Vec<f64>, kind: Interpolation) -> Self {
        let slopes = match kind {
            Interpolation::Linear => None,
            Interpolation::Pchip => Some(pchip_slopes(h, &y)),
        };
        Interpolant { lo, h, y, slopes }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        let u = (x - self.lo) / self.h;
        if !(u > 0.0) {
            return self.y[0];
        }
        if u >= (n - 1) as f64 {
            return self.y[n - 1];
        }
        let i = (u.floor() as usize).min(n - 2);
        let s = u - i as f64;
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        match &self.slopes {
            None => y0 + s * (y1 - y0),
            Some(d) => {
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                h00 * y0 + h10 * self.h * d[i] + h01 * y1 + h11 * self.h * d[i + 1]
            }
        }
    }
}

fn pchip_slopes(h: f64, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let del: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    if n == 2 {
        return vec![del[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (del[k - 1], del[k]);
        d[k] = if a * b <= 0.0 { 0.0 } else { 2.0 / (1.0 / a + 1.0 / b) };
    }
    let end = |d0: f64, d1: f64| {
        let s = (3.0 * d0 - d1) / 2.0;
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(del[0], del[1]);
    d[n - 1] = end(del[n - 2], del[n - 3]);
    d
}

/// How `E[Y_{n+1}(X_{n+1}) | X_n = x]` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationRule {
    /// Six-point Gauss–Legendre on every interpolation cell within eight
    /// standard deviations, closed-form Gaussian tails beyond the grid.
    /// Exact to rounding for the piecewise-cubic interpolant.
    #[default]
    Cellwise,
    /// Gauss–Hermite of order `quadrature` applied to the interpolant.
    GaussHermite,
}

/// Spatial grid and quadrature for [`grid_dp_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    pub quadrature: usize,
    #[serde(default)]
    pub rule: ExpectationRule,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub transition: TransitionMode,
}

impl GridSpec {
    pub const DEFAULT_NODES: usize = 801;
    pub const DEFAULT_QUADRATURE: usize = 64;

    /// Bounds `min(x0, mu) - 8 s` to `max(x0, mu) + 8 s` with `s` the
    /// stationary standard deviation.
    pub fn auto(game: &GameSpec<f64>) -> Result<Self> {
        let (kappa, mu, sigma) = scalar_ou(game)?;
        let s = stationary_sd(kappa, sigma)?;
        let x0 = game.x0[0];
        Ok(GridSpec {
            lo: x0.min(mu) - 8.0 * s,
            hi: x0.max(mu) + 8.0 * s,
            nodes: Self::DEFAULT_NODES,
            quadrature: Self::DEFAULT_QUADRATURE,
            rule: ExpectationRule::Cellwise,
            interpolation: Interpolation::Pchip,
            transition: TransitionMode::Euler,
        })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn validate(&self, game: &GameSpec<f64>) -> Result<()> {
        if !(self.lo < self.hi) || !(self.hi - self.lo).is_finite() {
            return Err(Error::Config(format!("grid bounds [{}, {}] are not an interval", self.lo, self.hi)));
        }
        if self.nodes < MIN_NODES {
            return Err(Error::Config(format!("{} grid nodes, need at least {MIN_NODES}", self.nodes)));
        }
        if !(MIN_QUADRATURE..=MAX_QUADRATURE).contains(&self.quadrature) {
            return Err(Error::Config(format!(
                "quadrature order {} outside {MIN_QUADRATURE}..={MAX_QUADRATURE}",
                self.quadrature
            )));
        }
        let (kappa, _, sigma) = scalar_ou(game)?;
        let s = stationary_sd(kappa, sigma)?;
        let x0 = game.x0[0];
        if self.lo > x0 - 6.0 * s || self.hi < x0 + 6.0 * s {
            return Err(Error::Config(format!(
                "grid [{}, {}] does not cover x0 +- 6 stationary sd = [{}, {}]",
                self.lo,
                self.hi,
                x0 - 6.0 * s,
                x0 + 6.0 * s
            )));
        }
        Ok(())
    }
}

fn scalar_ou(game: &GameSpec<f64>) -> Result<(f64, f64, f64)> {
    if game.dim() != 1 {
        return Err(Error::Unsupported(format!("the grid oracle is one-dimensional, game has d = {}", game.dim())));
    }
    Ok(game.ou.diagonal_entries()?[0])
}

fn stationary_sd(kappa: f64, sigma: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Unsupported(format!("the grid oracle needs kappa > 0, got {kappa}")));
    }
    Ok(sigma.abs() / (2.0 * kappa).sqrt())
}

/// Stopping decision at a grid node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRegion {
    Continue,
    /// `Y~ >= f1`: player 1 stops.
    Upper,
    /// `Y~ <= -f2`: player 2 stops.
    Lower,
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub game: GameSpec<f64>,
    pub spec: GridSpec,
    pub x: Vec<f64>,
    /// `(N+1)` rows of clamped values on the spatial grid.
    pub y: Vec<Vec<f64>>,
    /// `N` rows of continuation values `Y~_n`.
    pub y_tilde: Vec<Vec<f64>>,
    /// `N` rows of `Z_n = E[Y_{n+1} dB] / dt`.
    pub z: Vec<Vec<f64>>,
    pub stop: Vec<Vec<StopRegion>>,
    /// Value at `x0`, computed by quadrature at `x0` itself.
    pub y0: f64,
    pub y0_tilde: f64,
}

impl OracleSolution {
    fn interp(&self, row: &[f64]) -> Interpolant {
        Interpolant::new(self.spec.lo, self.spec.spacing(), row.to_vec(), self.spec.interpolation)
    }

    pub fn value_at(&self, n: usize, x: f64) -> f64 {
        self.interp(&self.y[n]).eval(x)
    }

    pub fn continuation_at(&self, n: usize, x: f64) -> f64 {
        self.interp(&self.y_tilde[n]).eval(x)
    }
}

struct Stepper {
    kappa: f64,
    mu: f64,
    sigma: f64,
    dt: f64,
    mode: TransitionMode,
    rule: ExpectationRule,
    xi: Vec<f64>,
    p: Vec<f64>,
}

const GL6: [(f64, f64); 6] = [
    (-0.932_469_514_203_152_1, 0.171_324_492_379_170_4),
    (-0.661_209_386_466_264_5, 0.360_761_573_048_138_6),
    (-0.238_619_186_083_196_9, 0.467_913_934_572_691_0),
    (0.238_619_186_083_196_9, 0.467_913_934_572_691_0),
    (0.661_209_386_466_264_5, 0.360_761_573_048_138_6),
    (0.932_469_514_203_152_1, 0.171_324_492_379_170_4),
];

impl Stepper {
    /// `(E[f(X')], E[f(X') dB] / dt)` given `X = x`.
    fn expect(&self, f: &Interpolant, x: f64) -> (f64, f64) {
        let (m, sd) = scalar_transition(self.kappa, self.mu, self.sigma, x, self.dt, self.mode);
        let sq = self.dt.sqrt();
        if sd == 0.0 {
            return (f.eval(m), 0.0);
        }
        let (e, ez) = match self.rule {
            ExpectationRule::GaussHermite => {
                let (mut e, mut ez) = (0.0, 0.0);
                for (&xi, &p) in self.xi.iter().zip(&self.p) {
                    let v = f.eval(m + sd * xi);
                    e += p * v;
                    ez += p * v * xi;
                }
                (e, ez)
            }
            ExpectationRule::Cellwise => cellwise(f, m, sd),
        };
        (e, ez / sq)
    }
}

/// `(E[f(m + sd U)], E[f(m + sd U) U])` for standard normal `U`.
fn cellwise(f: &Interpolant, m: f64, sd: f64) -> (f64, f64) {
    let normal = Normal::standard();
    let n = f.y.len();
    let grid_hi = f.lo + (n - 1) as f64 * f.h;
    let (a, b) = ((f.lo - m) / sd, (grid_hi - m) / sd);
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    // constant extension beyond the grid
    let mut e = f.y[0] * normal.cdf(a) + f.y[n - 1] * normal.sf(b);
    let mut ez = -f.y[0] * pdf(a) + f.y[n - 1] * pdf(b);
    let reach = 8.0 * sd;
    let first = (((m - reach - f.lo) / f.h).floor().max(0.0)) as usize;
    let last = ((((m + reach - f.lo) / f.h).ceil()).max(0.0) as usize).min(n - 1);
    for i in first..last {
        let x0 = f.lo + i as f64 * f.h;
        let half = 0.5 * f.h;
        let mid = x0 + half;
        for &(g, w) in &GL6 {
            let x = mid + half * g;
            let u = (x - m) / sd;
            let v = f.eval(x) * pdf(u) * w * half / sd;
            e += v;
            ez += v * u;
        }
    }
    (e, ez)
}

/// Mass of the marginal law of `X_{t_n}` outside the grid, maximised over
/// `n`.
pub fn coverage_defect(game: &GameSpec<f64>, spec: &GridSpec) -> Result<f64> {
    let (kappa, mu, sigma) = scalar_ou(game)?;
    let normal = Normal::standard();
    let dt = game.grid.dt();
    let mut worst = 0.0f64;
    for n in 0..=game.grid.steps() {
        let (m, sd) = ou_marginal(kappa, mu, sigma, game.x0[0], dt, n, spec.transition);
        let out = if sd > 0.0 {
            normal.cdf((spec.lo - m) / sd) + normal.sf((spec.hi - m) / sd)
        } else if m < spec.lo || m > spec.hi {
            1.0
        } else {
            0.0
        };
        worst = worst.max(out);
    }
    Ok(worst)
}

pub fn grid_dp_solve(game: &GameSpec<f64>, spec: &GridSpec) -> Result<OracleSolution> {
    game.validate()?;
    spec.validate(game)?;
    let defect = coverage_defect(game, spec)?;
    if defect > COVERAGE_TOL {
        return Err(Error::Coverage(format!(
            "probability {defect:.3e} of leaving [{}, {}] exceeds {COVERAGE_TOL:e}",
            spec.lo, spec.hi
        )));
    }
    let (kappa, mu, sigma) = scalar_ou(game)?;
    let grid = &game.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let (xi, p) = standard_normal_rule(spec.quadrature);
    let stepper = Stepper { kappa, mu, sigma, dt, mode: spec.transition, rule: spec.rule, xi, p };
    let x: Vec<f64> = (0..spec.nodes).map(|i| spec.node(i)).collect();
    let payoff = &game.payoff;
    let barriers = &game.barriers;

    let mut y = vec![Vec::new(); steps + 1];
    let mut y_tilde = vec![Vec::new(); steps];
    let mut z = vec![Vec::new(); steps];
    let mut stop = vec![Vec::new(); steps];
    y[steps] = x.iter().map(|&v| payoff.terminal_at(&[v])).collect();
    let mut y0_tilde = f64::NAN;
    for n in (0..steps).rev() {
        let t = grid.time(n);
        let (lo, hi) = barriers.bounds(t)?;
        let next = Interpolant::new(spec.lo, spec.spacing(), y[n + 1].clone(), spec.interpolation);
        let row: Vec<(f64, f64)> = x
            .par_iter()
            .map(|&xv| {
                let (e, ez) = stepper.expect(&next, xv);
                (e + payoff.running_at(t, &[xv]) * dt, ez)
            })
            .collect();
        y_tilde[n] = row.iter().map(|r| r.0).collect();
        z[n] = row.iter().map(|r| r.1).collect();
        y[n] = y_tilde[n].iter().map(|&v| v.max(lo).min(hi)).collect();
        stop[n] = y_tilde[n]
            .iter()
            .map(|&v| {
                if v >= hi {
                    StopRegion::Upper
                } else if v <= lo {
                    StopRegion::Lower
                } else {
                    StopRegion::Continue
                }
            })
            .collect();
        if n == 0 {
            let x0 = game.x0[0];
            let (e, _) = stepper.expect(&next, x0);
            y0_tilde = e + payoff.running_at(t, &[x0]) * dt;
        }
        if let Some(bad) = y[n].iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step: n, detail: format!("oracle value at node {bad} is not finite") });
        }
    }
    let (lo0, hi0) = barriers.bounds(0.0)?;
    Ok(OracleSolution {
        game: game.clone(),
        spec: *spec,
        x,
        y,
        y_tilde,
        z,
        stop,
        y0: y0_tilde.max(lo0).min(hi0),
        y0_tilde,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedEstimate {
    pub y0: f64,
    pub std_error: f64,
    pub samples_per_node: usize,
}

pub const NESTED_MAX_STEPS: usize = 5;

/// Nested conditional Monte Carlo of the scheme: every node of the tree
/// draws `samples_per_node` children.
pub fn nested_mc_solve(
    game: &GameSpec<f64>,
    samples_per_node: usize,
    seed: u64,
    mode: TransitionMode,
) -> Result<NestedEstimate> {
    game.validate()?;
    let (kappa, mu, sigma) = scalar_ou(game)?;
    let steps = game.grid.steps();
    if steps > NESTED_MAX_STEPS {
        return Err(Error::Config(format!("nested simulation supports at most {NESTED_MAX_STEPS} steps, got {steps}")));
    }
    if samples_per_node < 2 {
        return Err(Error::Config("need at least 2 samples per node".into()));
    }
    let dt = game.grid.dt();
    let x0 = game.x0[0];
    let (m, sd) = scalar_transition(kappa, mu, sigma, x0, dt, mode);

    fn value(
        game: &GameSpec<f64>,
        p: (f64, f64, f64, TransitionMode),
        n: usize,
        x: f64,
        k: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<f64> {
        let grid = &game.grid;
        if n == grid.steps() {
            return Ok(game.payoff.terminal_at(&[x]));
        }
        let t = grid.time(n);
        let (m, sd) = scalar_transition(p.0, p.1, p.2, x, grid.dt(), p.3);
        let mut acc = 0.0;
        for _ in 0..k {
            let child = m + sd * rng::normal(rng);
            acc += value(game, p, n + 1, child, k, rng)?;
        }
        let (lo, hi) = game.barriers.bounds(t)?;
        Ok((acc / k as f64 + game.payoff.running_at(t, &[x]) * grid.dt()).max(lo).min(hi))
    }

    let children: Vec<f64> = (0..samples_per_node)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::path_rng(seed, c);
            let child = m + sd * rng::normal(&mut r);
            value(game, (kappa, mu, sigma, mode), 1, child, samples_per_node, &mut r)
        })
        .collect::<Result<_>>()?;
    let s = stats::summarize(&children);
    let (lo, hi) = game.barriers.bounds(0.0)?;
    Ok(NestedEstimate {
        y0: (s.mean + game.payoff.running_at(0.0, &[x0]) * dt).max(lo).min(hi),
        std_error: s.std_error,
        samples_per_node,
    })
}

/// Anything that yields continuation values `Y~_n` along paths of a
/// one-dimensional game.
pub trait ValueModel {
    fn game(&self) -> &GameSpec<f64>;
    fn value_y0(&self) -> Result<f64>;
    /// `(N+1) x M` unclamped values, row `N` holding `g(X_N)`.
    fn continuation(&self, paths: &PathBatch<f64>) -> Result<ndarray::Array2<f64>>;
}

impl ValueModel for OracleSolution {
    fn game(&self) -> &GameSpec<f64> {
        &self.game
    }

    fn value_y0(&self) -> Result<f64> {
        Ok(self.y0)
    }

    fn continuation(&self, paths: &PathBatch<f64>) -> Result<ndarray::Array2<f64>> {
        let steps = self.game.grid.steps();
        let m = paths.paths();
        let mut out = ndarray::Array2::zeros((steps + 1, m));
        for n in 0..steps {
            let f = self.interp(&self.y_tilde[n]);
            let xs = paths.at(n);
            for j in 0..m {
                out[[n, j]] = if n == 0 { self.y0_tilde } else { f.eval(xs[[j, 0]]) };
            }
        }
        let xs = paths.at(steps);
        for j in 0..m {
            out[[steps, j]] = self.game.payoff.terminal_at(&[xs[[j, 0]]]);
        }
        Ok(out)
    }
}

impl ValueModel for TrainedSolver<f64> {
    fn game(&self) -> &GameSpec<f64> {
        &self.game
    }

    fn value_y0(&self) -> Result<f64> {
        self.y0()
    }

    fn continuation(&self, paths: &PathBatch<f64>) -> Result<ndarray::Array2<f64>> {
        Ok(solver::rollout(self, paths)?.y_tilde)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub y0_model: f64,
    pub y0_oracle: f64,
    pub y0_abs_error: f64,
    /// Root mean square of `Y^_n(X_n) - Y_n(X_n)` over all paths and
    /// `n = 0..N-1`.
    pub rmse_y: f64,
    /// Two-sample test between the game-ending times `tau1 ^ tau2` of the
    /// model and of the oracle on the same paths.
    pub exit_ks: KsResult,
    pub payoff_model: PayoffEstimate,
    pub payoff_oracle: PayoffEstimate,
    pub paths: usize,
}

fn same_game(a: &GameSpec<f64>, b: &GameSpec<f64>) -> Result<()> {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0);
    let ok = a.grid == b.grid
        && a.barriers == b.barriers
        && a.payoff == b.payoff
        && a.x0.len() == b.x0.len()
        && a.x0.iter().zip(&b.x0).all(|(x, y)| close(*x, *y))
        && a.ou.dim() == b.ou.dim()
        && a.ou.kappa().iter().zip(b.ou.kappa()).all(|(x, y)| close(*x, *y))
        && a.ou.mu().iter().zip(b.ou.mu()).all(|(x, y)| close(*x, *y))
        && a.ou.sigma().iter().zip(b.ou.sigma()).all(|(x, y)| close(*x, *y));
    if !ok {
        return Err(Error::Contract("model and oracle solve different games".into()));
    }
    Ok(())
}

fn ending_times(times: &ExitTimes, steps: usize, dt: f64) -> Vec<f64> {
    (0..times.tau1.len()).map(|j| times.outcome(j, steps).1 as f64 * dt).collect()
}

/// Compares any value model with the oracle on `eval_paths` fresh paths.
pub fn compare_models(oracle: &OracleSolution, model: &dyn ValueModel, eval_paths: usize, seed: u64) -> Result<ComparisonReport> {
    same_game(&oracle.game, model.game())?;
    let game = &oracle.game;
    let grid = &game.grid;
    let steps = grid.steps();
    let paths = game.simulate(eval_paths, seed)?;
    let ym = model.continuation(&paths)?;
    let yo = oracle.continuation(&paths)?;
    let mut sq = 0.0;
    for n in 0..steps {
        let (lo, hi) = game.barriers.bounds(grid.time(n))?;
        for j in 0..eval_paths {
            let d = ym[[n, j]].max(lo).min(hi) - yo[[n, j]].max(lo).min(hi);
            sq += d * d;
        }
    }
    let tm = solver::extract_exit_times(ym.view(), &game.barriers, grid)?;
    let to = solver::extract_exit_times(yo.view(), &game.barriers, grid)?;
    let dt = grid.dt();
    let exit_ks = stats::ks_two_sample(&ending_times(&tm, steps, dt), &ending_times(&to, steps, dt));
    let y0_model = model.value_y0()?;
    Ok(ComparisonReport {
        y0_model,
        y0_oracle: oracle.y0,
        y0_abs_error: (y0_model - oracle.y0).abs(),
        rmse_y: (sq / (steps * eval_paths) as f64).sqrt(),
        exit_ks,
        payoff_model: evaluate_payoff(&paths, &tm.tau1, &tm.tau2, &game.payoff, &game.barriers)?,
        payoff_oracle: evaluate_payoff(&paths, &to.tau1, &to.tau2, &game.payoff, &game.barriers)?,
        paths: eval_paths,
    })
}

pub fn compare_to_deep(oracle: &OracleSolution, deep: &TrainedSolver<f64>, eval_paths: usize, seed: u64) -> Result<ComparisonReport> {
    compare_models(oracle, deep, eval_paths, seed)
}

/// Oracle continuation values and their clamped versions along paths,
/// `(N+1) x M` each.
pub fn oracle_paths(oracle: &OracleSolution, paths: &PathBatch<f64>) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let yt = oracle.continuation(paths)?;
    let grid = &oracle.game.grid;
    let mut yh = yt.clone();
    for n in 0..grid.steps() {
        let (lo, hi) = oracle.game.barriers.bounds(grid.time(n))?;
        yh.row_mut(n).mapv_inplace(|v| v.max(lo).min(hi));
    }
    Ok((yt, yh))
}

/// `t,x,Y,Y_tilde,Z,stop` per grid node; `stop` is 1 (upper), -1 (lower)
/// or 0.
pub fn write_surfaces_csv(sol: &OracleSolution, path: &Path) -> Result<()> {
    let mut s = String::from("t,x,Y,Y_tilde,Z,stop\n");
    let grid = &sol.game.grid;
    for n in 0..=grid.steps() {
        let t = grid.time(n);
        for (i, &x) in sol.x.iter().enumerate() {
            let (yt, z, st) = if n < grid.steps() {
                let flag = match sol.stop[n][i] {
                    StopRegion::Upper => 1,
                    StopRegion::Lower => -1,
                    StopRegion::Continue => 0,
                };
                (sol.y_tilde[n][i], sol.z[n][i], flag)
            } else {
                (sol.y[n][i], 0.0, 0)
            };
            s += &format!("{t:e},{x:e},{:e},{yt:e},{z:e},{st}\n", sol.y[n][i]);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{OUParams, TimeGrid};
    use crate::solver::{BarrierSpec, PayoffSpec};

    fn game(alpha: f64, gamma: f64, x0: f64, steps: usize) -> GameSpec<f64> {
        GameSpec {
            ou: OUParams::scalar(2.0, 0.0, 1.0).unwrap(),
            x0: vec![x0],
            grid: TimeGrid::new(1.0, steps).unwrap(),
            barriers: BarrierSpec::Constant { upper: gamma, lower: gamma },
            payoff: PayoffSpec::SymmetricAverage { alpha },
        }
    }

    #[test]
    fn hermite_rule_moments() {
        for q in [1, 2, 5, 16, 33, 64, 128, 256, 512] {
            let (x, p) = standard_normal_rule(q);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-13, "q = {q}");
            let m = |k: i32| x.iter().zip(&p).map(|(x, p)| p * x.powi(k)).sum::<f64>();
            assert!(m(1).abs() < 1e-12);
            if q >= 2 {
                assert!((m(2) - 1.0).abs() < 1e-12);
            }
            if q >= 3 {
                assert!((m(4) - 3.0).abs() < 1e-11);
            }
            if q >= 4 {
                assert!((m(6) - 15.0).abs() < 1e-10);
            }
            assert!(x.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn pchip_is_exact_on_lines_and_monotone() {
        let f = Interpolant::new(0.0, 0.5, (0..10).map(|i| 2.0 * i as f64 * 0.5 + 1.0).collect(), Interpolation::Pchip);
        for k in 0..40 {
            let x = k as f64 * 0.1;
            assert!((f.eval(x) - (2.0 * x + 1.0)).abs() < 1e-12);
        }
        let step = Interpolant::new(0.0, 1.0, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], Interpolation::Pchip);
        let mut prev = -1.0;
        for k in 0..=500 {
            let v = step.eval(k as f64 * 0.01);
            assert!(v >= prev - 1e-15 && (0.0..=1.0).contains(&v));
            prev = v;
        }
        assert_eq!(step.eval(-3.0), 0.0);
        assert_eq!(step.eval(30.0), 1.0);
    }

    #[test]
    fn zero_game_is_zero() {
        let g = game(0.0, 0.5, 0.0, 10);
        let sol = grid_dp_solve(&g, &GridSpec::auto(&g).unwrap()).unwrap();
        assert!(sol.y.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(sol.y0, 0.0);
        let mc = nested_mc_solve(&g.with_steps(3).unwrap(), 20, 1, TransitionMode::Euler).unwrap();
        assert_eq!(mc.y0, 0.0);
    }

    #[test]
    fn unbarriered_terminal_mean() {
        let mut g = game(0.0, 1e6, 0.7, 20);
        g.ou = OUParams::scalar(1.5, 0.3, 0.8).unwrap();
        g.payoff = PayoffSpec::custom("identity", |_, _| 0.0, |x| x[0]);
        for mode in [TransitionMode::Exact, TransitionMode::Euler] {
            let spec = GridSpec { transition: mode, ..GridSpec::auto(&g).unwrap() };
            let sol = grid_dp_solve(&g, &spec).unwrap();
            let (mean, _) = ou_marginal(1.5, 0.3, 0.8, 0.7, g.grid.dt(), 20, mode);
            assert!((sol.y0 - mean).abs() < 1e-6, "{mode:?}: {} vs {mean}", sol.y0);
        }
        let exact = 0.3 + (-1.5f64).exp() * (0.7 - 0.3);
        let spec = GridSpec { transition: TransitionMode::Exact, ..GridSpec::auto(&g).unwrap() };
        assert!((grid_dp_solve(&g, &spec).unwrap().y0 - exact).abs() < 1e-6);
    }

    #[test]
    fn confinement_and_terminal_condition() {
        let g = game(10.0, 0.5, 0.2, 25);
        let sol = grid_dp_solve(&g, &GridSpec::auto(&g).unwrap()).unwrap();
        assert!(sol.y[25].iter().all(|v| *v == 0.0));
        for row in &sol.y[..25] {
            assert!(row.iter().all(|v| (-0.5..=0.5).contains(v)));
        }
        assert!(sol.stop.iter().flatten().any(|s| *s == StopRegion::Upper));
        assert!(sol.stop.iter().flatten().any(|s| *s == StopRegion::Lower));
    }

    #[test]
    fn coverage_and_spec_checks() {
        let g = game(10.0, 0.5, 0.0, 10);
        let auto = GridSpec::auto(&g).unwrap();
        assert!(matches!(grid_dp_solve(&g, &GridSpec { nodes: 50, ..auto }), Err(Error::Config(_))));
        assert!(matches!(grid_dp_solve(&g, &GridSpec { quadrature: 8, ..auto }), Err(Error::Config(_))));
        assert!(matches!(grid_dp_solve(&g, &GridSpec { lo: -1.0, ..auto }), Err(Error::Config(_))));
        // bounds cover x0 but the law drifts far away from it
        let mut far = g.clone();
        far.ou = OUParams::scalar(0.05, 400.0, 1.0).unwrap();
        let s = 1.0 / 0.1f64.sqrt();
        let spec = GridSpec { lo: -6.0 * s, hi: 6.0 * s, ..auto };
        assert!(matches!(grid_dp_solve(&far, &spec), Err(Error::Coverage(_))));
        let mut two = g.clone();
        two.ou = OUParams::diagonal(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        two.x0 = vec![0.0, 0.0];
        assert!(matches!(GridSpec::auto(&two), Err(Error::Unsupported(_))));
    }

    #[test]
    fn nested_mc_agrees_with_grid() {
        let g = game(10.0, 0.5, 0.3, 3);
        let sol = grid_dp_solve(&g, &GridSpec::auto(&g).unwrap()).unwrap();
        let mc = nested_mc_solve(&g, 150, 7, TransitionMode::Euler).unwrap();
        assert!((mc.y0 - sol.y0).abs() < 3.0 * mc.std_error.max(1e-4), "{mc:?} vs {}", sol.y0);
    }

    #[test]
    fn nested_mc_error_shrinks() {
        let g = game(2.0, 5.0, 0.3, 2);
        let a = nested_mc_solve(&g, 100, 3, TransitionMode::Euler).unwrap();
        let b = nested_mc_solve(&g, 400, 3, TransitionMode::Euler).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((1.5..2.7).contains(&ratio), "ratio {ratio}");
        assert!(matches!(nested_mc_solve(&g.with_steps(6).unwrap(), 10, 0, TransitionMode::Euler), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_versus_itself() {
        let g = game(10.0, 0.5, 0.2, 10);
        let sol = grid_dp_solve(&g, &GridSpec::auto(&g).unwrap()).unwrap();
        let r = compare_models(&sol, &sol, 2000, 5).unwrap();
        assert_eq!(r.y0_abs_error, 0.0);
        assert_eq!(r.rmse_y, 0.0);
        assert_eq!(r.exit_ks.statistic, 0.0);
        assert_eq!(r.payoff_model, r.payoff_oracle);
    }

    #[test]
    fn mismatched_configs_rejected() {
        let g = game(10.0, 0.5, 0.2, 10);
        let sol = grid_dp_solve(&g, &GridSpec::auto(&g).unwrap()).unwrap();
        let other = grid_dp_solve(&g.with_steps(12).unwrap(), &GridSpec::auto(&g).unwrap()).unwrap();
        assert!(matches!(compare_models(&sol, &other, 10, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn surfaces_export() {
        let g = game(10.0, 0.5, 0.2, 4);
        let sol = grid_dp_solve(&g, &GridSpec { nodes: 201, ..GridSpec::auto(&g).unwrap() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_surfaces_csv(&sol, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 * 201);
    }
}
