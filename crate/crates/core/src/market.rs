//! Time grids, forward SDE simulation and Ornstein–Uhlenbeck transitions.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Uniform time grid `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr<S>", into = "GridRepr<S>", bound = "S: Scalar")]
pub struct TimeGrid<S: Scalar = f64> {
    horizon: S,
    steps: usize,
    dt: S,
    nodes: Vec<S>,
}

#[derive(Clone, Serialize, Deserialize)]
struct GridRepr<S> {
    horizon: S,
    steps: usize,
}

impl<S: Scalar> TryFrom<GridRepr<S>> for TimeGrid<S> {
    type Error = Error;
    fn try_from(r: GridRepr<S>) -> Result<Self> {
        TimeGrid::new(r.horizon, r.steps)
    }
}

impl<S: Scalar> From<TimeGrid<S>> for GridRepr<S> {
    fn from(g: TimeGrid<S>) -> Self {
        GridRepr { horizon: g.horizon, steps: g.steps }
    }
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(horizon: S, steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(Error::Config(format!("time horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Config("number of time steps must be at least 1".into()));
        }
        let dt = horizon / S::of_usize(steps);
        let mut nodes: Vec<S> = (0..steps).map(|i| S::of_usize(i) * dt).collect();
        nodes.push(horizon);
        Ok(TimeGrid { horizon, steps, dt, nodes })
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    pub fn nodes(&self) -> &[S] {
        &self.nodes
    }

    #[inline]
    pub fn time(&self, n: usize) -> S {
        self.nodes[n]
    }

    /// The first `steps` steps of this grid, sharing node values bitwise.
    pub(crate) fn prefix(&self, steps: usize) -> TimeGrid<S> {
        debug_assert!(steps >= 1 && steps <= self.steps);
        TimeGrid {
            horizon: self.nodes[steps],
            steps,
            dt: self.dt,
            nodes: self.nodes[..=steps].to_vec(),
        }
    }

    /// Converts the grid to another scalar width.
    pub fn cast<T: Scalar>(&self) -> TimeGrid<T> {
        TimeGrid {
            horizon: T::of(self.horizon.as_f64()),
            steps: self.steps,
            dt: T::of(self.dt.as_f64()),
            nodes: self.nodes.iter().map(|t| T::of(t.as_f64())).collect(),
        }
    }
}

/// Drift `b(t, x)` and diffusion `sigma(t, x)` of a d-dimensional SDE.
///
/// Implementations must be deterministic and free of side effects.
pub trait SdeCoefficients<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, t: S, x: ArrayView1<S>, out: ArrayViewMut1<S>);

    fn diffusion(&self, t: S, x: ArrayView1<S>, out: ArrayViewMut2<S>);

    /// One Euler–Maruyama step for a batch (rows are paths):
    /// `out = x + b(t, x) dt + sigma(t, x) db`.
    fn euler_step(&self, t: S, dt: S, x: ArrayView2<S>, db: ArrayView2<S>, mut out: ArrayViewMut2<S>) {
        let d = self.dim();
        let mut b = Array1::zeros(d);
        let mut sig = Array2::zeros((d, d));
        for ((xr, dbr), mut o) in x.outer_iter().zip(db.outer_iter()).zip(out.outer_iter_mut()) {
            self.drift(t, xr, b.view_mut());
            self.diffusion(t, xr, sig.view_mut());
            let noise = sig.dot(&dbr);
            Zip::from(&mut o)
                .and(&xr)
                .and(&b)
                .and(&noise)
                .for_each(|o, &x, &b, &w| *o = x + b * dt + w);
        }
    }
}

/// Parameters of `dX = kappa (mu - X) dt + sigma dB`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OuRepr<S>", into = "OuRepr<S>", bound = "S: Scalar")]
pub struct OUParams<S: Scalar = f64> {
    kappa: Array2<S>,
    mu: Array1<S>,
    sigma: Array2<S>,
    diagonal: bool,
}

#[derive(Clone, Serialize, Deserialize)]
struct OuRepr<S> {
    kappa: Vec<Vec<S>>,
    mu: Vec<S>,
    sigma: Vec<Vec<S>>,
}

fn rows_to_matrix<S: Scalar>(rows: &[Vec<S>], name: &str) -> Result<Array2<S>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{name}: ragged matrix rows")));
    }
    Array2::from_shape_vec((n, m), rows.concat()).map_err(|e| Error::Config(format!("{name}: {e}")))
}

impl<S: Scalar> TryFrom<OuRepr<S>> for OUParams<S> {
    type Error = Error;
    fn try_from(r: OuRepr<S>) -> Result<Self> {
        OUParams::new(
            rows_to_matrix(&r.kappa, "kappa")?,
            Array1::from(r.mu),
            rows_to_matrix(&r.sigma, "sigma")?,
        )
    }
}

impl<S: Scalar> From<OUParams<S>> for OuRepr<S> {
    fn from(p: OUParams<S>) -> Self {
        let rows = |m: &Array2<S>| m.outer_iter().map(|r| r.to_vec()).collect();
        OuRepr { kappa: rows(&p.kappa), mu: p.mu.to_vec(), sigma: rows(&p.sigma) }
    }
}

fn is_diag<S: Scalar>(m: &Array2<S>) -> bool {
    m.indexed_iter().all(|((i, j), &v)| i == j || v == S::zero())
}

/// Cholesky test on the symmetric part.
fn symmetric_part_positive_definite<S: Scalar>(m: &Array2<S>) -> bool {
    let n = m.nrows();
    let a = Array2::from_shape_fn((n, n), |(i, j)| (m[[i, j]] + m[[j, i]]) * S::of(0.5));
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > S::zero()) {
            return false;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    true
}

impl<S: Scalar> OUParams<S> {
    pub fn new(kappa: Array2<S>, mu: Array1<S>, sigma: Array2<S>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Config("OU dimension must be at least 1".into()));
        }
        if kappa.dim() != (d, d) || sigma.dim() != (d, d) {
            return Err(Error::Config(format!(
                "OU shapes disagree: kappa {:?}, mu {}, sigma {:?}",
                kappa.dim(),
                d,
                sigma.dim()
            )));
        }
        if kappa.iter().chain(mu.iter()).chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("OU parameters must be finite".into()));
        }
        if !symmetric_part_positive_definite(&kappa) {
            return Err(Error::Config("kappa must be positive definite".into()));
        }
        let diagonal = is_diag(&kappa) && is_diag(&sigma);
        Ok(OUParams { kappa, mu, sigma, diagonal })
    }

    pub fn diagonal(kappa: &[S], mu: &[S], sigma: &[S]) -> Result<Self> {
        if kappa.len() != mu.len() || sigma.len() != mu.len() {
            return Err(Error::Config("diagonal OU: kappa, mu, sigma lengths differ".into()));
        }
        OUParams::new(
            Array2::from_diag(&Array1::from(kappa.to_vec())),
            Array1::from(mu.to_vec()),
            Array2::from_diag(&Array1::from(sigma.to_vec())),
        )
    }

    pub fn scalar(kappa: S, mu: S, sigma: S) -> Result<Self> {
        Self::diagonal(&[kappa], &[mu], &[sigma])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn kappa(&self) -> &Array2<S> {
        &self.kappa
    }

    pub fn mu(&self) -> &Array1<S> {
        &self.mu
    }

    pub fn sigma(&self) -> &Array2<S> {
        &self.sigma
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    fn require_diagonal(&self) -> Result<()> {
        if self.diagonal {
            Ok(())
        } else {
            Err(Error::Unsupported("operation requires diagonal kappa and sigma".into()))
        }
    }

    /// Diagonal entries `(kappa_j, mu_j, sigma_j)`; errors for full matrices.
    pub fn diagonal_entries(&self) -> Result<Vec<(S, S, S)>> {
        self.require_diagonal()?;
        Ok((0..self.dim())
            .map(|j| (self.kappa[[j, j]], self.mu[j], self.sigma[[j, j]]))
            .collect())
    }

    pub fn cast<T: Scalar>(&self) -> OUParams<T> {
        OUParams {
            kappa: self.kappa.mapv(|v| T::of(v.as_f64())),
            mu: self.mu.mapv(|v| T::of(v.as_f64())),
            sigma: self.sigma.mapv(|v| T::of(v.as_f64())),
            diagonal: self.diagonal,
        }
    }
}

impl<S: Scalar> SdeCoefficients<S> for OUParams<S> {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn drift(&self, _t: S, x: ArrayView1<S>, mut out: ArrayViewMut1<S>) {
        let gap = &self.mu - &x;
        out.assign(&self.kappa.dot(&gap));
    }

    fn diffusion(&self, _t: S, _x: ArrayView1<S>, mut out: ArrayViewMut2<S>) {
        out.assign(&self.sigma);
    }

    fn euler_step(&self, _t: S, dt: S, x: ArrayView2<S>, db: ArrayView2<S>, mut out: ArrayViewMut2<S>) {
        if self.diagonal {
            let k = self.kappa.diag();
            let s = self.sigma.diag();
            for ((xr, dbr), mut o) in x.outer_iter().zip(db.outer_iter()).zip(out.outer_iter_mut()) {
                Zip::from(&mut o)
                    .and(&xr)
                    .and(&dbr)
                    .and(&k)
                    .and(&self.mu)
                    .and(&s)
                    .for_each(|o, &x, &w, &k, &m, &s| *o = x + k * (m - x) * dt + s * w);
            }
        } else {
            // rows: x + (mu - x) kappa^T dt + db sigma^T
            let gap = &self.mu.view().insert_axis(Axis(0)) - &x;
            let drift = gap.dot(&self.kappa.t());
            let noise = db.dot(&self.sigma.t());
            Zip::from(&mut out)
                .and(&x)
                .and(&drift)
                .and(&noise)
                .for_each(|o, &x, &b, &w| *o = x + b * dt + w);
        }
    }
}

/// Conditional transition used for one OU step of length `dt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMode {
    /// Linearised Gaussian: mean `x + kappa (mu - x) dt`, sd `sigma sqrt(dt)`.
    #[default]
    Euler,
    /// Closed-form OU transition.
    Exact,
}

/// Per-component conditional mean and standard deviation of `X_{t+dt}`
/// given `X_t = x`, for diagonal parameters.
pub fn ou_exact_conditional<S: Scalar>(
    params: &OUParams<S>,
    x: ArrayView1<S>,
    dt: S,
    mode: TransitionMode,
) -> Result<(Array1<S>, Array1<S>)> {
    let entries = params.diagonal_entries()?;
    if x.len() != entries.len() {
        return Err(Error::Contract(format!("state has {} components, OU has {}", x.len(), entries.len())));
    }
    let mut mean = Array1::zeros(x.len());
    let mut sd = Array1::zeros(x.len());
    for (j, &(k, m, s)) in entries.iter().enumerate() {
        let (mj, sj) = scalar_transition(k, m, s, x[j], dt, mode);
        mean[j] = mj;
        sd[j] = sj;
    }
    Ok((mean, sd))
}

/// Scalar version of [`ou_exact_conditional`].
pub fn scalar_transition<S: Scalar>(kappa: S, mu: S, sigma: S, x: S, dt: S, mode: TransitionMode) -> (S, S) {
    match mode {
        TransitionMode::Euler => (x + kappa * (mu - x) * dt, sigma * dt.sqrt()),
        TransitionMode::Exact if dt == S::zero() => (x, S::zero()),
        TransitionMode::Exact => {
            let decay = (-kappa * dt).exp();
            let var = if (kappa * dt).abs() < S::of(1e-12) {
                sigma * sigma * dt
            } else {
                sigma * sigma * (S::one() - (-(kappa + kappa) * dt).exp()) / (kappa + kappa)
            };
            (mu + decay * (x - mu), var.sqrt())
        }
    }
}

/// Mean and standard deviation of `X_n` (scalar OU) started at `x0`, under
/// `n` Euler steps of length `dt` or the exact transition.
pub fn ou_marginal(kappa: f64, mu: f64, sigma: f64, x0: f64, dt: f64, n: usize, mode: TransitionMode) -> (f64, f64) {
    let mut mean = x0;
    let mut var = 0.0;
    for _ in 0..n {
        match mode {
            TransitionMode::Euler => {
                let a = 1.0 - kappa * dt;
                mean = mean + kappa * (mu - mean) * dt;
                var = a * a * var + sigma * sigma * dt;
            }
            TransitionMode::Exact => {
                let a = (-kappa * dt).exp();
                let (_, s) = scalar_transition(kappa, mu, sigma, 0.0, dt, mode);
                mean = mu + a * (mean - mu);
                var = a * a * var + s * s;
            }
        }
    }
    (mean, var.sqrt())
}

/// `M` simulated paths on a grid, stored time-major: `states[[n, j, k]]` is
/// component `k` of path `j` at `t_n`, `increments[[n, j, k]]` is the
/// Brownian increment over `[t_n, t_{n+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch<S: Scalar = f64> {
    pub grid: TimeGrid<S>,
    pub states: Array3<S>,
    pub increments: Array3<S>,
    pub seed: u64,
}

impl<S: Scalar> PathBatch<S> {
    pub fn paths(&self) -> usize {
        self.states.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.states.len_of(Axis(2))
    }

    /// States of all paths at `t_n` (`M x d`).
    pub fn at(&self, n: usize) -> ArrayView2<'_, S> {
        self.states.index_axis(Axis(0), n)
    }

    /// Increments `Delta B_{n+1}` of all paths (`M x d`).
    pub fn increment(&self, n: usize) -> ArrayView2<'_, S> {
        self.increments.index_axis(Axis(0), n)
    }

    /// Path `j` as an `(N+1) x d` view.
    pub fn path(&self, j: usize) -> ArrayView2<'_, S> {
        self.states.index_axis(Axis(1), j)
    }

    /// Little-endian dump of states then increments, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.states.len() + self.increments.len()));
        for v in self.states.iter().chain(self.increments.iter()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }
}

/// Euler–Maruyama simulation of `m` paths from `x0`.
///
/// Path `j` draws its increments from stream `j` of `seed`, so the result
/// does not depend on thread count or batch composition.
pub fn simulate_paths<S: Scalar>(
    coeffs: &dyn SdeCoefficients<S>,
    x0: ArrayView1<S>,
    grid: &TimeGrid<S>,
    m: usize,
    seed: u64,
) -> Result<PathBatch<S>> {
    let d = coeffs.dim();
    if m == 0 {
        return Err(Error::Config("number of paths must be at least 1".into()));
    }
    if x0.len() != d {
        return Err(Error::Contract(format!("x0 has {} components, SDE has {d}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("initial state must be finite".into()));
    }
    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt().as_f64();
    let mut increments = Array3::<S>::zeros((steps, m, d));
    increments
        .axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(j, mut per_path)| {
            let mut r = rng::path_rng(seed, j);
            for mut step in per_path.outer_iter_mut() {
                for v in step.iter_mut() {
                    *v = S::of(sqrt_dt * rng::normal(&mut r));
                }
            }
        });

    let mut states = Array3::<S>::zeros((steps + 1, m, d));
    states.index_axis_mut(Axis(0), 0).assign(&x0.insert_axis(Axis(0)));
    for n in 0..steps {
        let (done, mut rest) = states.view_mut().split_at(Axis(0), n + 1);
        let current = done.index_axis(Axis(0), n);
        let next = rest.index_axis_mut(Axis(0), 0);
        coeffs.euler_step(grid.time(n), grid.dt(), current, increments.index_axis(Axis(0), n), next);
        if let Some(bad) = states.index_axis(Axis(0), n + 1).iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step: n + 1, detail: format!("state became {bad}") });
        }
    }
    Ok(PathBatch { grid: grid.clone(), states, increments, seed })
}

/// Simulates only the first `steps` steps; identical bitwise to the prefix of
/// [`simulate_paths`] with the same seed.
pub(crate) fn simulate_prefix<S: Scalar>(
    coeffs: &dyn SdeCoefficients<S>,
    x0: ArrayView1<S>,
    grid: &TimeGrid<S>,
    steps: usize,
    m: usize,
    seed: u64,
) -> Result<PathBatch<S>> {
    simulate_paths(coeffs, x0, &grid.prefix(steps), m, seed)
}

/// One training sample per path: `X_n`, `X_{n+1}` and the increment between
/// them, each `M x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSample<S: Scalar = f64> {
    pub x_n: Array2<S>,
    pub x_next: Array2<S>,
    pub increment: Array2<S>,
}

/// Draws `(X_n, X_{n+1}, Delta B_n)` with the law of the Euler chain.
///
/// With diagonal coefficients `X_n` is sampled from its Gaussian marginal,
/// so the cost does not grow with `n`; otherwise the prefix is simulated.
pub fn sample_stage<S: Scalar>(
    ou: &OUParams<S>,
    x0: ArrayView1<S>,
    grid: &TimeGrid<S>,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<StageSample<S>> {
    let d = ou.dim();
    if n >= grid.steps() {
        return Err(Error::Contract(format!("stage {n} is past the last step {}", grid.steps() - 1)));
    }
    if !ou.is_diagonal() {
        let b = simulate_prefix(ou, x0, grid, n + 1, m, seed)?;
        return Ok(StageSample { x_n: b.at(n).to_owned(), x_next: b.at(n + 1).to_owned(), increment: b.increment(n).to_owned() });
    }
    if m == 0 {
        return Err(Error::Config("number of paths must be at least 1".into()));
    }
    if x0.len() != d {
        return Err(Error::Contract(format!("x0 has {} components, SDE has {d}", x0.len())));
    }
    let dt = grid.dt().as_f64();
    let sqrt_dt = dt.sqrt();
    let coeffs: Vec<(f64, f64, f64, f64, f64)> = ou
        .diagonal_entries()?
        .iter()
        .zip(x0.iter())
        .map(|(&(k, mu, s), &x)| {
            let (k, mu, s) = (k.as_f64(), mu.as_f64(), s.as_f64());
            let (mean, sd) = ou_marginal(k, mu, s, x.as_f64(), dt, n, TransitionMode::Euler);
            (k, mu, s, mean, sd)
        })
        .collect();
    let mut x_n = Array2::<S>::zeros((m, d));
    let mut x_next = Array2::<S>::zeros((m, d));
    let mut increment = Array2::<S>::zeros((m, d));
    Zip::indexed(x_n.rows_mut())
        .and(x_next.rows_mut())
        .and(increment.rows_mut())
        .par_for_each(|j, mut a, mut b, mut w| {
            let mut r = rng::path_rng(seed, j);
            for (i, &(k, mu, s, mean, sd)) in coeffs.iter().enumerate() {
                let x = mean + sd * rng::normal(&mut r);
                let db = sqrt_dt * rng::normal(&mut r);
                a[i] = S::of(x);
                w[i] = S::of(db);
                b[i] = S::of(x + k * (mu - x) * dt + s * db);
            }
        });
    if let Some(bad) = x_next.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup { step: n + 1, detail: format!("state became {bad}") });
    }
    Ok(StageSample { x_n, x_next, increment })
}
