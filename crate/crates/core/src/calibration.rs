//! Per-series OU calibration from discretely observed prices.
//!
//! Each transition is modelled as
//! `X_{i+1} | X_i ~ N(X_i + kappa (mu - X_i) dt, sigma^2 dt)`, so the
//! maximiser is an ordinary least-squares fit of `X_{i+1}` on `X_i`.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{scalar_transition, TransitionMode};
use crate::rng;
use crate::stats;

pub const MIN_OBSERVATIONS: usize = 30;
pub const MIN_RESIDUALS: usize = 8;
pub const ACF_LAGS: usize = 20;

/// One observed price series on a uniform grid of step `dt`, possibly
/// with gaps. `times` are in years from the first observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub label: String,
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(label: impl Into<String>, dt: f64, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = PriceSeries { label: label.into(), dt, times, values };
        s.validate()?;
        Ok(s)
    }

    /// Contiguous series `t_i = i dt`.
    pub fn regular(label: impl Into<String>, dt: f64, values: Vec<f64>) -> Result<Self> {
        let times = (0..values.len()).map(|i| i as f64 * dt).collect();
        Self::new(label, dt, times, values)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("series {}: dt must be positive, got {}", self.label, self.dt)));
        }
        if self.times.len() != self.values.len() {
            return Err(Error::Data(format!(
                "series {}: {} times but {} values",
                self.label,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.values.len() < MIN_OBSERVATIONS {
            return Err(Error::Data(format!(
                "series {}: {} observations, need at least {MIN_OBSERVATIONS}",
                self.label,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("series {}: non-finite value at observation {i}", self.label)));
        }
        for (i, w) in self.times.windows(2).enumerate() {
            let k = (w[1] - w[0]) / self.dt;
            if !(k >= 0.5) || (k - k.round()).abs() > 1e-9 * k.round().max(1.0) {
                return Err(Error::Data(format!(
                    "series {}: spacing between observations {i} and {} is {} steps, not a whole number",
                    self.label,
                    i + 1,
                    k
                )));
            }
        }
        Ok(())
    }

    /// Maximal runs of consecutive observations, as index ranges.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.times.len() {
            if ((self.times[i] - self.times[i - 1]) / self.dt).round() > 1.0 {
                out.push(start..i);
                start = i;
            }
        }
        out.push(start..self.times.len());
        out
    }

    /// `(X_i, X_{i+1})` for every one-step transition.
    pub fn transitions(&self) -> Vec<(f64, f64)> {
        self.segments()
            .into_iter()
            .flat_map(|r| self.values[r].windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>())
            .collect()
    }
}

/// Which log-likelihood to maximise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodForm {
    /// The Gaussian log-density
    /// `-1/2 log(2 pi s^2) - r^2 / (2 s^2)`, `s^2 = sigma^2 dt`.
    #[default]
    Exact,
    /// `-1/2 [log(2 pi s^2) + r^2 / (2 s^2)]`, i.e. the quadratic term
    /// carries an extra factor 1/2. Its maximiser has `sigma` smaller by
    /// `sqrt(2)`.
    Printed,
}

impl LikelihoodForm {
    fn quad_weight(self) -> f64 {
        match self {
            LikelihoodForm::Exact => 0.5,
            LikelihoodForm::Printed => 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuScalarParams {
    pub kappa: f64,
    pub mu: f64,
    pub sigma: f64,
}

fn loglik_of(p: &OuScalarParams, dt: f64, tr: &[(f64, f64)], form: LikelihoodForm) -> f64 {
    let v = p.sigma * p.sigma * dt;
    let log_term = (2.0 * std::f64::consts::PI * v).ln();
    let w = form.quad_weight();
    tr.iter()
        .map(|&(x, y)| {
            let r = y - (x + p.kappa * (p.mu - x) * dt);
            -0.5 * log_term - w * r * r / v
        })
        .sum()
}

pub fn ou_loglik(params: &OuScalarParams, series: &PriceSeries, form: LikelihoodForm) -> Result<f64> {
    if !(params.sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {}", params.sigma)));
    }
    if !(series.dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {}", series.dt)));
    }
    Ok(loglik_of(params, series.dt, &series.transitions(), form))
}

/// Result of the quasi-Newton cross-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiNewtonCheck {
    pub params: OuScalarParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `|loglik(closed form) - loglik(quasi-Newton)| / |loglik(closed form)|`.
    pub relative_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OUFitResult {
    pub label: String,
    pub form: LikelihoodForm,
    pub dt: f64,
    pub transitions: usize,
    pub segments: usize,
    pub kappa: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Asymptotic standard errors.
    pub se_kappa: f64,
    pub se_mu: f64,
    pub se_sigma: f64,
    pub loglik: f64,
    pub residuals: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    pub acf: Vec<f64>,
    pub qq: Vec<(f64, f64)>,
    pub quasi_newton: Option<QuasiNewtonCheck>,
    pub warnings: Vec<String>,
}

/// Closed-form maximiser via regression of `X_{i+1}` on `X_i`.
pub fn fit_mle(series: &PriceSeries, form: LikelihoodForm) -> Result<OUFitResult> {
    series.validate()?;
    let dt = series.dt;
    let tr = series.transitions();
    let n = tr.len();
    if n < 3 {
        return Err(Error::Data(format!("series {}: only {n} transitions", series.label)));
    }
    let nf = n as f64;
    let xbar = tr.iter().map(|p| p.0).sum::<f64>() / nf;
    let ybar = tr.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = tr.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    let sxy: f64 = tr.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    if !(sxx > 1e-12 * nf * xbar.abs().max(1.0).powi(2)) {
        return Err(Error::Data(format!("series {}: regressor is constant, slope is not identified", series.label)));
    }
    let a = sxy / sxx;
    let b = ybar - a * xbar;
    let rss: f64 = tr.iter().map(|p| (p.1 - a * p.0 - b).powi(2)).sum();
    let s2 = rss / nf;

    let mut warnings = Vec::new();
    let kappa = (1.0 - a) / dt;
    let mu = if (1.0 - a).abs() > f64::EPSILON { b / (1.0 - a) } else { f64::NAN };
    if !(kappa > 0.0) {
        warnings.push(format!("kappa = {kappa:.4} is not positive: the fitted process is not mean reverting"));
    }
    let scale = match form {
        LikelihoodForm::Exact => 1.0,
        LikelihoodForm::Printed => 0.5,
    };
    let sigma = (scale * s2 / dt).sqrt();
    let price_scale = tr.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1.0);
    if !(s2.sqrt() > 1e-10 * price_scale) {
        warnings.push("residual variance is numerically zero: the series is (nearly) deterministic".into());
    }

    // delta method on (a, b, s2)
    let var_a = s2 / sxx;
    let var_b = s2 * (1.0 / nf + xbar * xbar / sxx);
    let cov_ab = -xbar * s2 / sxx;
    let se_kappa = var_a.sqrt() / dt;
    let one_a = 1.0 - a;
    let (ga, gb) = (b / (one_a * one_a), 1.0 / one_a);
    let se_mu = (ga * ga * var_a + gb * gb * var_b + 2.0 * ga * gb * cov_ab).max(0.0).sqrt();
    let se_sigma = sigma / (2.0 * nf).sqrt();

    let params = OuScalarParams { kappa, mu, sigma };
    let loglik = if sigma > 0.0 { loglik_of(&params, dt, &tr, form) } else { f64::INFINITY };
    let mut fit = OUFitResult {
        label: series.label.clone(),
        form,
        dt,
        transitions: n,
        segments: series.segments().len(),
        kappa,
        mu,
        sigma,
        se_kappa,
        se_mu,
        se_sigma,
        loglik,
        residuals: Vec::new(),
        ks_statistic: f64::NAN,
        ks_pvalue: f64::NAN,
        acf: Vec::new(),
        qq: Vec::new(),
        quasi_newton: None,
        warnings,
    };
    if sigma > 0.0 && mu.is_finite() {
        residual_diagnostics(&mut fit, series)?;
    }
    Ok(fit)
}

/// Standardised residuals `(X_{i+1} - X_i - kappa (mu - X_i) dt) / (sigma sqrt(dt))`
/// with K-S test against N(0, 1), ACF and normal Q-Q pairs.
pub fn residual_diagnostics(fit: &mut OUFitResult, series: &PriceSeries) -> Result<()> {
    if !(fit.sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {}", fit.sigma)));
    }
    let dt = series.dt;
    let sd = fit.sigma * dt.sqrt();
    let res: Vec<f64> =
        series.transitions().iter().map(|&(x, y)| (y - x - fit.kappa * (fit.mu - x) * dt) / sd).collect();
    if res.len() < MIN_RESIDUALS {
        return Err(Error::Data(format!("{} residuals, need at least {MIN_RESIDUALS}", res.len())));
    }
    let ks = stats::ks_standard_normal(&res);
    fit.ks_statistic = ks.statistic;
    fit.ks_pvalue = ks.p_value;
    fit.acf = stats::acf(&res, ACF_LAGS);
    fit.qq = stats::normal_qq(&res);
    fit.residuals = res;
    Ok(())
}

/// Maximises [`ou_loglik`] numerically with BFGS, starting from crude
/// moment guesses, and compares the attained value with the closed form.
pub fn refine_quasi_newton(series: &PriceSeries, fit: &OUFitResult) -> Result<QuasiNewtonCheck> {
    let dt = series.dt;
    let tr = series.transitions();
    let n = tr.len() as f64;
    let xbar = tr.iter().map(|p| p.0).sum::<f64>() / n;
    let sx = (tr.iter().map(|p| (p.0 - xbar).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let dsd = (tr.iter().map(|p| (p.1 - p.0).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);

    // conditional mean x_bar + sx (u0 + u1 z), z = (x - x_bar) / sx
    let to_params = |u: &[f64]| {
        let a = u[1];
        let b = xbar + sx * u[0] - a * xbar;
        let kappa = (1.0 - a) / dt;
        OuScalarParams { kappa, mu: b / (1.0 - a), sigma: (u[2].exp() / dt.sqrt()) * dsd }
    };
    let objective = |u: &[f64]| {
        let p = to_params(u);
        if !p.mu.is_finite() {
            return f64::INFINITY;
        }
        -loglik_of(&p, dt, &tr, fit.form) / n
    };
    let start = [0.0, 0.5, 0.0];
    let res = bfgs(objective, &start, 500, 1e-10);
    let params = to_params(&res.x);
    let loglik = loglik_of(&params, dt, &tr, fit.form);
    Ok(QuasiNewtonCheck {
        params,
        loglik,
        iterations: res.iterations,
        converged: res.converged,
        relative_gap: (fit.loglik - loglik).abs() / fit.loglik.abs().max(f64::MIN_POSITIVE),
    })
}

pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn num_grad(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Unconstrained BFGS with central-difference gradients and a
/// backtracking Armijo line search.
pub fn bfgs(f: impl Fn(&[f64]) -> f64, x0: &[f64], max_iter: usize, gtol: f64) -> BfgsResult {
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = num_grad(&f, &x);
    let mut h = vec![vec![0.0; k]; k];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for it in 0..max_iter {
        if dot(&g, &g).sqrt() < gtol {
            return BfgsResult { x, value: fx, iterations: it, converged: true };
        }
        let mut p: Vec<f64> = h.iter().map(|row| -dot(row, &g)).collect();
        let mut slope = dot(&p, &g);
        if slope >= 0.0 {
            // lost descent: restart from steepest descent
            for (i, row) in h.iter_mut().enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = 1.0;
            }
            p = g.iter().map(|v| -v).collect();
            slope = dot(&p, &g);
        }
        let mut step = 1.0;
        let mut xn: Vec<f64>;
        let mut fn_;
        loop {
            xn = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            fn_ = f(&xn);
            if fn_ <= fx + 1e-4 * step * slope || step < 1e-16 {
                break;
            }
            step *= 0.5;
        }
        if !(fn_ <= fx) {
            return BfgsResult { x, value: fx, iterations: it, converged: false };
        }
        let gn = num_grad(&f, &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            let hy: Vec<f64> = h.iter().map(|row| dot(row, &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..k {
                for j in 0..k {
                    h[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        let small = (fx - fn_).abs() <= 1e-15 * fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        if small && step < 1e-8 {
            return BfgsResult { x, value: fx, iterations: it + 1, converged: true };
        }
    }
    BfgsResult { x, value: fx, iterations: max_iter, converged: false }
}

/// Closed-form fit followed by the quasi-Newton cross-check.
pub fn calibrate_series(series: &PriceSeries, form: LikelihoodForm) -> Result<OUFitResult> {
    let mut fit = fit_mle(series, form)?;
    if fit.sigma > 0.0 && fit.mu.is_finite() {
        let qn = refine_quasi_newton(series, &fit)?;
        if qn.relative_gap > 1e-6 {
            fit.warnings.push(format!("quasi-Newton log-likelihood differs by {:.3e} (relative)", qn.relative_gap));
        }
        fit.quasi_newton = Some(qn);
    }
    Ok(fit)
}

/// Fits every series independently, preserving order.
pub fn calibrate_all(series: &[PriceSeries], form: LikelihoodForm) -> Result<Vec<OUFitResult>> {
    series.par_iter().map(|s| calibrate_series(s, form)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    /// Model time step per observation period, in years.
    pub dt: f64,
    /// Calendar days per observation period.
    pub period_days: i64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { dt: 1.0 / 52.0, period_days: 7 }
    }
}

/// Reads `date,<label1>,<label2>,...` with ISO-8601 dates. Empty cells are
/// missing observations; each column becomes one series.
pub fn read_price_csv(path: &Path, opts: &CsvOptions) -> Result<Vec<PriceSeries>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_price_csv(&text, opts)
}

pub fn parse_price_csv(text: &str, opts: &CsvOptions) -> Result<Vec<PriceSeries>> {
    if opts.period_days <= 0 || !(opts.dt > 0.0) {
        return Err(Error::Config(format!("invalid sampling options {opts:?}")));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Data(format!("cannot read header: {e}")))?.clone();
    match header.get(0) {
        Some(h) if h.eq_ignore_ascii_case("date") => {}
        Some(h) => {
            return Err(Error::Data(format!("header must start with a `date` column, found `{h}` (missing header row?)")))
        }
        None => return Err(Error::Data("empty header".into())),
    }
    if header.len() < 2 {
        return Err(Error::Data("header has no price columns".into()));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if let Some(i) = labels.iter().position(|l| l.is_empty()) {
        return Err(Error::Data(format!("column {} has an empty label", i + 2)));
    }
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); labels.len()];
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {line}: {} fields, header has {}", rec.len(), header.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("row {line}, column date: `{}` is not an ISO date ({e})", &rec[0])))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Data(format!("row {line}: date {date} does not follow {prev}")));
            }
        }
        dates.push(date);
        for (c, col) in cols.iter_mut().enumerate() {
            let cell = &rec[c + 1];
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                col.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("row {line}, column {}: `{cell}` is not a number", labels[c]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("row {line}, column {}: non-finite value", labels[c])));
                }
                col.push(Some(v));
            }
        }
    }
    if dates.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let mut periods = Vec::with_capacity(dates.len());
    for (i, d) in dates.iter().enumerate() {
        let days = (*d - dates[0]).num_days();
        if days % opts.period_days != 0 {
            return Err(Error::Data(format!(
                "row {}: date {d} is not a whole number of {}-day periods after {}",
                i + 2,
                opts.period_days,
                dates[0]
            )));
        }
        periods.push(days / opts.period_days);
    }
    labels
        .into_iter()
        .zip(cols)
        .map(|(label, col)| {
            let (times, values): (Vec<f64>, Vec<f64>) =
                periods.iter().zip(col).filter_map(|(&p, v)| v.map(|v| (p as f64 * opts.dt, v))).unzip();
            PriceSeries::new(label, opts.dt, times, values)
        })
        .collect()
}

/// Simulated scalar OU series of `n + 1` observations.
pub fn synthetic_series(
    label: &str,
    params: OuScalarParams,
    x0: f64,
    dt: f64,
    n: usize,
    seed: u64,
    mode: TransitionMode,
) -> Result<PriceSeries> {
    let mut r = rng::seeded(seed);
    let mut x = x0;
    let mut values = Vec::with_capacity(n + 1);
    values.push(x);
    for _ in 0..n {
        let (m, sd) = scalar_transition(params.kappa, params.mu, params.sigma, x, dt, mode);
        x = m + sd * rng::normal(&mut r);
        values.push(x);
    }
    PriceSeries::regular(label, dt, values)
}

/// Writes `<label>.json`, `<label>_residuals.csv`, `<label>_acf.csv` and
/// `<label>_qq.csv` into `dir`; returns the file names.
pub fn write_fit_exports(fit: &OUFitResult, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem: String =
        fit.label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    let mut files = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(&name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        files.push(name);
        Ok(())
    };
    put(format!("{stem}.json"), serde_json::to_vec_pretty(fit)?)?;
    let mut s = String::from("index,residual\n");
    for (i, r) in fit.residuals.iter().enumerate() {
        s += &format!("{i},{r:e}\n");
    }
    put(format!("{stem}_residuals.csv"), s.into_bytes())?;
    let mut s = String::from("lag,acf\n");
    for (k, a) in fit.acf.iter().enumerate() {
        s += &format!("{k},{a:e}\n");
    }
    put(format!("{stem}_acf.csv"), s.into_bytes())?;
    let mut s = String::from("theoretical,empirical\n");
    for (t, e) in &fit.qq {
        s += &format!("{t:e},{e:e}\n");
    }
    put(format!("{stem}_qq.csv"), s.into_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f64>) -> PriceSeries {
        PriceSeries::regular("s", 1.0 / 52.0, values).unwrap()
    }

    fn ou(seed: u64, n: usize) -> PriceSeries {
        let p = OuScalarParams { kappa: 2.0, mu: 100.0, sigma: 50.0 };
        synthetic_series("syn", p, 100.0, 1.0 / 52.0, n, seed, TransitionMode::Euler).unwrap()
    }

    #[test]
    fn perfect_fit_leaves_only_log_terms() {
        let dt = 1.0 / 52.0;
        let p = OuScalarParams { kappa: 3.0, mu: 10.0, sigma: 2.0 };
        let mut v = vec![0.0];
        for _ in 0..40 {
            let x = *v.last().unwrap();
            v.push(x + p.kappa * (p.mu - x) * dt);
        }
        let s = series(v);
        let expect = -0.5 * 40.0 * (2.0 * std::f64::consts::PI * 4.0 * dt).ln();
        for form in [LikelihoodForm::Exact, LikelihoodForm::Printed] {
            assert!((ou_loglik(&p, &s, form).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn single_transition_by_hand() {
        let s = PriceSeries { label: "h".into(), dt: 0.5, times: vec![0.0, 0.5], values: vec![1.0, 2.0] };
        let p = OuScalarParams { kappa: 1.0, mu: 3.0, sigma: 2.0 };
        // mean 1 + 1 * 2 * 0.5 = 2, residual 0, variance 2
        let v = 4.0 * 0.5;
        let base = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
        assert!((loglik_of(&p, 0.5, &s.transitions(), LikelihoodForm::Exact) - base).abs() < 1e-12);
        let p = OuScalarParams { kappa: 0.0, ..p };
        // residual 1
        assert!((loglik_of(&p, 0.5, &s.transitions(), LikelihoodForm::Exact) - (base - 0.5 / v)).abs() < 1e-12);
        assert!((loglik_of(&p, 0.5, &s.transitions(), LikelihoodForm::Printed) - (base - 0.25 / v)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let s = ou(1, 50);
        let p = OuScalarParams { kappa: 1.0, mu: 1.0, sigma: 0.0 };
        assert!(matches!(ou_loglik(&p, &s, LikelihoodForm::Exact), Err(Error::Config(_))));
    }

    #[test]
    fn loglik_peaks_at_fitted_sigma() {
        let s = ou(2, 500);
        for form in [LikelihoodForm::Exact, LikelihoodForm::Printed] {
            let fit = fit_mle(&s, form).unwrap();
            let p = OuScalarParams { kappa: fit.kappa, mu: fit.mu, sigma: fit.sigma };
            let at = ou_loglik(&p, &s, form).unwrap();
            for f in [0.9, 1.1] {
                let q = OuScalarParams { sigma: fit.sigma * f, ..p };
                assert!(ou_loglik(&q, &s, form).unwrap() < at);
            }
        }
    }

    #[test]
    fn printed_sigma_is_smaller_by_sqrt2() {
        let s = ou(3, 300);
        let e = fit_mle(&s, LikelihoodForm::Exact).unwrap();
        let p = fit_mle(&s, LikelihoodForm::Printed).unwrap();
        assert_eq!(e.kappa, p.kappa);
        assert_eq!(e.mu, p.mu);
        assert!((e.sigma / p.sigma - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recovers_parameters_on_long_series() {
        let s = ou(4, 10_000);
        let fit = calibrate_series(&s, LikelihoodForm::Exact).unwrap();
        assert!((fit.kappa - 2.0).abs() < 3.0 * fit.se_kappa, "{} +- {}", fit.kappa, fit.se_kappa);
        assert!((fit.mu - 100.0).abs() < 3.0 * fit.se_mu, "{} +- {}", fit.mu, fit.se_mu);
        assert!((fit.sigma - 50.0).abs() < 3.0 * fit.se_sigma, "{} +- {}", fit.sigma, fit.se_sigma);
        assert!(fit.quasi_newton.unwrap().relative_gap < 1e-6);
        assert_eq!(fit.acf[0], 1.0);
        assert_eq!(fit.acf.len(), ACF_LAGS + 1);
    }

    #[test]
    fn quasi_newton_agrees_for_both_forms() {
        for seed in 0..5 {
            let s = ou(10 + seed, 104);
            for form in [LikelihoodForm::Exact, LikelihoodForm::Printed] {
                let fit = calibrate_series(&s, form).unwrap();
                let qn = fit.quasi_newton.unwrap();
                assert!(qn.relative_gap <= 1e-6, "seed {seed} {form:?}: {qn:?}");
            }
        }
    }

    #[test]
    fn noiseless_series_recovers_slope_and_warns() {
        let dt = 1.0 / 52.0;
        let mut v = vec![0.0];
        for _ in 0..60 {
            let x = *v.last().unwrap();
            v.push(x + 2.0 * (100.0 - x) * dt);
        }
        let fit = fit_mle(&series(v), LikelihoodForm::Exact).unwrap();
        assert!((fit.kappa - 2.0).abs() < 1e-8);
        assert!((fit.mu - 100.0).abs() < 1e-6);
        assert!(fit.sigma < 1e-6);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn constant_series_is_rank_deficient() {
        assert!(matches!(fit_mle(&series(vec![5.0; 40]), LikelihoodForm::Exact), Err(Error::Data(_))));
    }

    #[test]
    fn mean_averting_fit_is_flagged_not_rejected() {
        let mut v = vec![1.0];
        let mut r = rng::seeded(8);
        for _ in 0..60 {
            let x: f64 = *v.last().unwrap();
            v.push(x * 1.05 + 0.01 * rng::normal(&mut r));
        }
        let fit = fit_mle(&series(v), LikelihoodForm::Exact).unwrap();
        assert!(fit.kappa < 0.0);
        assert!(fit.warnings.iter().any(|w| w.contains("mean reverting")));
    }

    #[test]
    fn too_few_observations() {
        assert!(matches!(PriceSeries::regular("x", 1.0, vec![1.0; 10]), Err(Error::Data(_))));
    }

    #[test]
    fn gaps_split_segments() {
        let dt = 0.5;
        let mut times: Vec<f64> = (0..20).map(|i| i as f64 * dt).collect();
        times.extend((22..42).map(|i| i as f64 * dt));
        let values: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let s = PriceSeries::new("g", dt, times, values).unwrap();
        assert_eq!(s.segments(), vec![0..20, 20..40]);
        assert_eq!(s.transitions().len(), 38);
        let bad = PriceSeries::new("b", dt, (0..40).map(|i| i as f64 * 0.7).collect(), vec![0.0; 40]);
        assert!(bad.is_err());
    }

    #[test]
    fn csv_parsing_and_errors() {
        let mut text = String::from("date,A,B\n");
        let d0 = NaiveDate::from_ymd_opt(2023, 7, 3).unwrap();
        for i in 0..40 {
            let d = d0 + chrono::Duration::days(7 * i);
            let b = if i == 5 { String::new() } else { format!("{}", 50.0 + i as f64) };
            text += &format!("{d},{},{b}\n", 100.0 + (i as f64).cos());
        }
        let s = parse_price_csv(&text, &CsvOptions::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "A");
        assert_eq!(s[0].values.len(), 40);
        assert_eq!(s[1].values.len(), 39);
        assert_eq!(s[1].segments().len(), 2);
        assert!((s[0].times[1] - 1.0 / 52.0).abs() < 1e-15);

        let no_header = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        let err = parse_price_csv(&no_header, &CsvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("date"), "{err}");

        let bad = text.replacen(",101,", ",abc,", 1);
        let err = parse_price_csv(&bad, &CsvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("row"), "{err}");
    }

    #[test]
    fn exports_written() {
        let dir = tempfile::tempdir().unwrap();
        let fit = calibrate_series(&ou(5, 200), LikelihoodForm::Exact).unwrap();
        let files = write_fit_exports(&fit, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let back: OUFitResult = serde_json::from_slice(&fs::read(dir.path().join("syn.json")).unwrap()).unwrap();
        assert_eq!(back.kappa, fit.kappa);
    }
}
