//! Ready-made games: the symmetric benchmark, the calibrated CfD and a
//! one-dimensional game small enough for the grid oracle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::market::{OUParams, TimeGrid};
use crate::rng;
use crate::solver::{BarrierSpec, GameSpec, PayoffSpec};

pub const DEFAULT_STEPS: usize = 50;

/// Calibrated per-country OU parameters: `(label, kappa, mu, sigma, K-S p-value)`.
pub const EU_MARKETS: [(&str, f64, f64, f64, f64); 26] = [
    ("Austria", 27.43, 90.69, 187.93, 0.44),
    ("Belgium", 41.72, 80.56, 210.00, 0.56),
    ("Bulgaria", 27.25, 104.95, 222.49, 0.62),
    ("Croatia", 31.81, 100.26, 209.58, 0.93),
    ("Czechia", 30.60, 91.69, 188.54, 0.75),
    ("Denmark", 73.96, 75.68, 240.96, 0.88),
    ("Estonia", 75.98, 88.16, 325.86, 0.17),
    ("France", 30.44, 69.10, 225.84, 0.82),
    ("Germany", 53.40, 84.53, 220.38, 0.29),
    ("Greece", 24.90, 104.93, 177.39, 0.55),
    ("Hungary", 30.72, 104.50, 243.72, 0.43),
    ("Italy", 18.47, 114.84, 110.14, 0.82),
    ("Latvia", 71.99, 89.50, 302.16, 0.32),
    ("Lithuania", 72.55, 89.27, 306.12, 0.33),
    ("Luxembourg", 53.40, 84.53, 220.38, 0.29),
    ("Montenegro", 22.40, 105.45, 157.00, 0.83),
    ("Netherlands", 51.74, 84.75, 204.55, 0.19),
    ("North Macedonia", 24.95, 106.78, 192.44, 0.26),
    ("Poland", 52.28, 99.17, 181.74, 0.98),
    ("Portugal", 20.46, 70.49, 204.60, 0.87),
    ("Romania", 27.38, 105.87, 229.18, 0.76),
    ("Serbia", 24.56, 104.25, 198.08, 0.63),
    ("Slovakia", 27.29, 98.80, 204.53, 0.78),
    ("Slovenia", 32.92, 98.28, 205.76, 0.72),
    ("Spain", 20.95, 71.03, 209.19, 0.95),
    ("Switzerland", 17.22, 91.26, 164.64, 0.31),
];

/// Markets left out of the 24-dimensional CfD: Luxembourg repeats
/// Germany's parameters and Switzerland is outside the EU market area.
pub const CFD_EXCLUDED: [&str; 2] = ["Luxembourg", "Switzerland"];

/// `kappa_i ~ U[1.5, 2.5]` drawn from `kappa_seed`.
pub fn benchmark_kappas(d: usize, kappa_seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(rng::derive(kappa_seed, &[rng::tag("benchmark-kappa")]));
    (0..d).map(|_| r.random_range(1.5..2.5)).collect()
}

/// Symmetric fair game: `dX = -kappa X dt + dB`, `X_0 = 0`,
/// `phi = -(10 / d) 1'x`, constant barriers `+-0.5`, `T = 1`.
pub fn benchmark_game(d: usize, kappa_seed: u64, steps: usize) -> Result<GameSpec<f64>> {
    if d == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let kappa = benchmark_kappas(d, kappa_seed);
    Ok(GameSpec {
        ou: OUParams::diagonal(&kappa, &vec![0.0; d], &vec![1.0; d])?,
        x0: vec![0.0; d],
        grid: TimeGrid::new(1.0, steps)?,
        barriers: BarrierSpec::Constant { upper: 0.5, lower: 0.5 },
        payoff: PayoffSpec::SymmetricAverage { alpha: 10.0 },
    })
}

/// One-dimensional game with the benchmark's coefficients: `kappa = 2`,
/// `sigma = 1`, `alpha = 10`, barriers `+-0.5`.
pub fn scalar_game(x0: f64, steps: usize) -> Result<GameSpec<f64>> {
    Ok(GameSpec {
        ou: OUParams::scalar(2.0, 0.0, 1.0)?,
        x0: vec![x0],
        grid: TimeGrid::new(1.0, steps)?,
        barriers: BarrierSpec::Constant { upper: 0.5, lower: 0.5 },
        payoff: PayoffSpec::SymmetricAverage { alpha: 10.0 },
    })
}

/// Starting point of the one-dimensional acceptance game; off the symmetry
/// point so that the value is not zero.
pub const SCALAR_GAME_X0: f64 = 0.1;

/// Rows of [`EU_MARKETS`] used by the CfD, in table order.
pub fn cfd_markets() -> Vec<(&'static str, f64, f64, f64)> {
    EU_MARKETS
        .iter()
        .filter(|m| !CFD_EXCLUDED.contains(&m.0))
        .map(|&(l, k, m, s, _)| (l, k, m, s))
        .collect()
}

/// Strikes `K_i = mu_i + U_i`, `U_i ~ U(0.9, 1.1)` from `strike_seed`.
pub fn cfd_strikes(mu: &[f64], strike_seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(rng::derive(strike_seed, &[rng::tag("cfd-strike")]));
    mu.iter().map(|m| m + r.random_range(0.9..1.1)).collect()
}

/// The calibrated CfD: uniform weights, `rho = 0.04`, penalties
/// `1.34 e^{-rho t}` (player 1) and `0.29 e^{-rho t}` (player 2), `X_0 = mu`.
pub fn cfd_game(strike_seed: u64, steps: usize) -> Result<GameSpec<f64>> {
    let rows = cfd_markets();
    let d = rows.len();
    let kappa: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mu: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let sigma: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let rho = 0.04;
    Ok(GameSpec {
        ou: OUParams::diagonal(&kappa, &mu, &sigma)?,
        x0: mu.clone(),
        grid: TimeGrid::new(1.0, steps)?,
        barriers: BarrierSpec::ExpDecay { gamma1: 1.34, gamma2: 0.29, rho },
        payoff: PayoffSpec::Cfd { weights: vec![1.0 / d as f64; d], strike: cfd_strikes(&mu, strike_seed), rho },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_shape() {
        let g = benchmark_game(20, 1, DEFAULT_STEPS).unwrap();
        g.validate().unwrap();
        assert_eq!(g.dim(), 20);
        assert_eq!(g.grid.steps(), 50);
        let k = benchmark_kappas(20, 1);
        assert!(k.iter().all(|v| (1.5..2.5).contains(v)));
        assert_eq!(k, benchmark_kappas(20, 1));
        assert_ne!(k, benchmark_kappas(20, 2));
    }

    #[test]
    fn cfd_shape() {
        let g = cfd_game(7, DEFAULT_STEPS).unwrap();
        g.validate().unwrap();
        assert_eq!(g.dim(), 24);
        let PayoffSpec::Cfd { strike, weights, .. } = &g.payoff else { panic!() };
        for (k, m) in strike.iter().zip(&g.x0) {
            assert!((0.9..1.1).contains(&(k - m)));
        }
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(cfd_markets().iter().all(|m| m.0 != "Luxembourg" && m.0 != "Switzerland"));
    }
}
