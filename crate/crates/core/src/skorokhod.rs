//! Two-sided reflection of discrete paths on a time-varying interval
//! `[alpha, beta]`, and recovery of the pushing processes `A` (up, at the
//! lower barrier) and `C` (down, at the upper barrier).
//!
//! For a driver `x` the reflected path is `y = x - xi`, with
//!
//! ```text
//! H(t) = max_{s<=t} min(x_s - beta_s, min_{s<=r<=t} (x_r - alpha_r))
//! L(t) = min_{s<=t} max(x_s - alpha_s, max_{s<=r<=t} (x_r - beta_r))
//! xi(t) = 1{T_beta < T_alpha} 1{t >= T_beta} H(t) + 1{T_alpha < T_beta} 1{t >= T_alpha} L(t)
//! ```
//!
//! where `T_alpha`, `T_beta` are the first grid indices at which `x` reaches
//! the lower and upper barrier. Positive increments of `xi` are pushes down
//! (`C`), negative ones pushes up (`A`), so in driver time `xi = C - A`.
//!
//! A backward value process `Y_n = clamp(Y_{n+1} + delta_n)` is handled by
//! reversing time: its driver is `g + sum delta` read from the terminal
//! node, see [`reconstruct_backward`].

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const GAP_TOL: f64 = 1e-12;

/// Barrier samples along one path: `alpha_n = -f2(t_n, X_n)`,
/// `beta_n = f1(t_n, X_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierPaths<S: Scalar = f64> {
    alpha: Vec<S>,
    beta: Vec<S>,
}

impl<S: Scalar> BarrierPaths<S> {
    pub fn new(alpha: Vec<S>, beta: Vec<S>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.is_empty() {
            return Err(Error::Contract(format!(
                "barrier paths must be non-empty and of equal length, got {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        let (gap, at) = alpha
            .iter()
            .zip(&beta)
            .enumerate()
            .map(|(i, (&a, &b))| ((b - a).as_f64(), i))
            .fold((f64::INFINITY, 0), |acc, v| if !(v.0 >= acc.0) { v } else { acc });
        if !(gap > GAP_TOL) {
            return Err(Error::Model(format!("barrier gap {gap:e} at node {at} is not strictly positive")));
        }
        Ok(BarrierPaths { alpha, beta })
    }

    /// Constant barriers `[lower, upper]` over `len` nodes.
    pub fn constant(lower: S, upper: S, len: usize) -> Result<Self> {
        Self::new(vec![lower; len], vec![upper; len])
    }

    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }

    pub fn beta(&self) -> &[S] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn reversed(&self) -> Self {
        BarrierPaths { alpha: reverse(&self.alpha), beta: reverse(&self.beta) }
    }
}

pub fn reverse<S: Copy>(x: &[S]) -> Vec<S> {
    x.iter().rev().copied().collect()
}

fn check_len<S: Scalar>(x: &[S], b: &BarrierPaths<S>) -> Result<()> {
    if x.len() != b.len() {
        return Err(Error::Contract(format!("path has {} nodes, barriers have {}", x.len(), b.len())));
    }
    Ok(())
}

/// `H(t)` by direct evaluation over all pairs `s <= r <= t`.
pub fn compute_h<S: Scalar>(x: &[S], alpha: &[S], beta: &[S], t: usize) -> S {
    let mut best = S::neg_infinity();
    for s in 0..=t {
        let mut inner = S::infinity();
        for r in s..=t {
            inner = inner.min(x[r] - alpha[r]);
        }
        best = best.max((x[s] - beta[s]).min(inner));
    }
    best
}

/// `L(t)` by direct evaluation over all pairs `s <= r <= t`.
pub fn compute_l<S: Scalar>(x: &[S], alpha: &[S], beta: &[S], t: usize) -> S {
    let mut best = S::infinity();
    for s in 0..=t {
        let mut inner = S::neg_infinity();
        for r in s..=t {
            inner = inner.max(x[r] - beta[r]);
        }
        best = best.min((x[s] - alpha[s]).max(inner));
    }
    best
}

/// `H(t)` for every `t` via the running recursion
/// `H(t) = max(min(H(t-1), x_t - alpha_t), min(x_t - beta_t, x_t - alpha_t))`.
pub fn h_path<S: Scalar>(x: &[S], alpha: &[S], beta: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    let mut h = S::neg_infinity();
    for t in 0..x.len() {
        let lo = x[t] - alpha[t];
        let up = x[t] - beta[t];
        h = h.min(lo).max(up.min(lo));
        out.push(h);
    }
    out
}

/// `L(t)` for every `t` via
/// `L(t) = min(max(L(t-1), x_t - beta_t), max(x_t - alpha_t, x_t - beta_t))`.
pub fn l_path<S: Scalar>(x: &[S], alpha: &[S], beta: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    let mut l = S::infinity();
    for t in 0..x.len() {
        let lo = x[t] - alpha[t];
        let up = x[t] - beta[t];
        l = l.max(up).min(lo.max(up));
        out.push(l);
    }
    out
}

/// First grid indices where `x` reaches the lower (`alpha - x >= 0`) and
/// upper (`x - beta >= 0`) barrier; `None` if never.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FirstHits {
    pub lower: Option<usize>,
    pub upper: Option<usize>,
}

impl FirstHits {
    /// Which barrier is reached first. Both at one node cannot happen with
    /// a strictly positive gap; the lower barrier would win.
    pub fn first(&self) -> Option<Side> {
        match (self.lower, self.upper) {
            (None, None) => None,
            (Some(_), None) => Some(Side::Lower),
            (None, Some(_)) => Some(Side::Upper),
            (Some(l), Some(u)) => Some(if l <= u { Side::Lower } else { Side::Upper }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

pub fn first_hit_times<S: Scalar>(x: &[S], alpha: &[S], beta: &[S]) -> FirstHits {
    FirstHits {
        lower: (0..x.len()).find(|&i| alpha[i] - x[i] >= S::zero()),
        upper: (0..x.len()).find(|&i| x[i] - beta[i] >= S::zero()),
    }
}

/// Net push `xi` of the two-sided map.
pub fn net_push<S: Scalar>(x: &[S], barriers: &BarrierPaths<S>) -> Result<(Vec<S>, FirstHits)> {
    check_len(x, barriers)?;
    let (alpha, beta) = (barriers.alpha(), barriers.beta());
    let hits = first_hit_times(x, alpha, beta);
    let mut xi = vec![S::zero(); x.len()];
    match hits.first() {
        None => {}
        Some(Side::Upper) => {
            let start = hits.upper.unwrap();
            let h = h_path(x, alpha, beta);
            xi[start..].copy_from_slice(&h[start..]);
        }
        Some(Side::Lower) => {
            let start = hits.lower.unwrap();
            let l = l_path(x, alpha, beta);
            xi[start..].copy_from_slice(&l[start..]);
        }
    }
    Ok((xi, hits))
}

/// Reference solution of the discrete problem:
/// `y_0 = clamp(x_0)`, `y_k = clamp(y_{k-1} + x_k - x_{k-1})`.
pub fn clamp_recursion<S: Scalar>(x: &[S], barriers: &BarrierPaths<S>) -> Result<Vec<S>> {
    check_len(x, barriers)?;
    let (alpha, beta) = (barriers.alpha(), barriers.beta());
    let mut y = Vec::with_capacity(x.len());
    let mut prev = S::zero();
    for k in 0..x.len() {
        let free = if k == 0 { x[0] } else { prev + (x[k] - x[k - 1]) };
        prev = free.max(alpha[k]).min(beta[k]);
        y.push(prev);
    }
    Ok(y)
}

/// Orientation of the push increments relative to the nodes where they act.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Driver time: the increment `a_k - a_{k-1}` acts at node `k`.
    Forward,
    /// Calendar time of a backward equation: `a_{n+1} - a_n` acts at node `n`.
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReflectedDecomposition<S: Scalar = f64> {
    pub direction: Direction,
    pub x: Vec<S>,
    pub y: Vec<S>,
    /// Cumulative push up at the lower barrier, `a[0] = 0`.
    pub a: Vec<S>,
    /// Cumulative push down at the upper barrier, `c[0] = 0`.
    pub c: Vec<S>,
    /// Net push with `y + xi = x` node-wise.
    pub xi: Vec<S>,
    pub alpha: Vec<S>,
    pub beta: Vec<S>,
    pub hits: FirstHits,
}

/// Reflects `x` on `[alpha, beta]` in driver time.
pub fn reconstruct_reflection<S: Scalar>(x: &[S], barriers: &BarrierPaths<S>) -> Result<ReflectedDecomposition<S>> {
    let (xi, hits) = net_push(x, barriers)?;
    let (alpha, beta) = (barriers.alpha(), barriers.beta());
    let y: Vec<S> = (0..x.len()).map(|k| (x[k] - xi[k]).max(alpha[k]).min(beta[k])).collect();
    let mut a = Vec::with_capacity(x.len());
    let mut c = Vec::with_capacity(x.len());
    let (mut acc_a, mut acc_c) = (S::zero(), S::zero());
    for k in 0..x.len() {
        let step = if k == 0 { xi[0] } else { xi[k] - xi[k - 1] };
        if step > S::zero() {
            acc_c = acc_c + step;
        } else {
            acc_a = acc_a - step;
        }
        a.push(acc_a);
        c.push(acc_c);
    }
    // a push at node 0 moves the starting point; keep a[0] = c[0] = 0 by
    // folding it into the driver's reference level.
    let (a0, c0) = (a[0], c[0]);
    a.iter_mut().for_each(|v| *v = *v - a0);
    c.iter_mut().for_each(|v| *v = *v - c0);
    Ok(ReflectedDecomposition {
        direction: Direction::Forward,
        x: x.to_vec(),
        y,
        a,
        c,
        xi,
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
        hits,
    })
}

/// Driver in reversed time for `Y_n = clamp(Y_{n+1} + delta_n)`,
/// `Y_N = terminal`: `x_rev[0] = terminal`,
/// `x_rev[k] = terminal + delta_{N-1} + ... + delta_{N-k}`.
pub fn reversed_driver<S: Scalar>(terminal: S, deltas: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut acc = terminal;
    out.push(acc);
    for &d in deltas.iter().rev() {
        acc = acc + d;
        out.push(acc);
    }
    out
}

/// Reflection of a backward recursion `Y_n = clamp(Y_{n+1} + delta_n)` on
/// `[alpha_n, beta_n]`, returned in calendar time (`y[n] = Y_n`).
///
/// `a` and `c` are the cumulative pushes of the backward equation: the
/// increment `a[n+1] - a[n]` is the lift applied at node `n`.
pub fn reconstruct_backward<S: Scalar>(
    terminal: S,
    deltas: &[S],
    barriers: &BarrierPaths<S>,
) -> Result<ReflectedDecomposition<S>> {
    if deltas.len() + 1 != barriers.len() {
        return Err(Error::Contract(format!(
            "{} increments need {} barrier nodes, got {}",
            deltas.len(),
            deltas.len() + 1,
            barriers.len()
        )));
    }
    let x_rev = reversed_driver(terminal, deltas);
    let rev = reconstruct_reflection(&x_rev, &barriers.reversed())?;
    let n = deltas.len();
    let a_tot = rev.a[n];
    let c_tot = rev.c[n];
    let hits = FirstHits {
        lower: rev.hits.lower.map(|k| n - k),
        upper: rev.hits.upper.map(|k| n - k),
    };
    Ok(ReflectedDecomposition {
        direction: Direction::Backward,
        x: reverse(&rev.x),
        y: reverse(&rev.y),
        a: (0..=n).map(|i| a_tot - rev.a[n - i]).collect(),
        c: (0..=n).map(|i| c_tot - rev.c[n - i]).collect(),
        xi: reverse(&rev.xi),
        alpha: barriers.alpha().to_vec(),
        beta: barriers.beta().to_vec(),
        hits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub amount: f64,
    pub series: &'static str,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkorokhodReport {
    pub pass: bool,
    pub tolerance: f64,
    pub scale: f64,
    pub monotonicity: Option<Violation>,
    pub confinement: Option<Violation>,
    pub identity: Option<Violation>,
    pub flatness: Option<Violation>,
    /// `sum (y - alpha) da`
    pub slackness_lower: f64,
    /// `sum (beta - y) dc`
    pub slackness_upper: f64,
    pub max_identity_error: f64,
}

fn worse(slot: &mut Option<Violation>, amount: f64, series: &'static str, index: usize) {
    if amount > 0.0 && slot.as_ref().is_none_or(|v| amount > v.amount) {
        *slot = Some(Violation { amount, series, index });
    }
}

/// Checks monotonicity of `a`/`c`, confinement of `y`, the identity
/// `y + xi = x`, and complementary slackness. Violations larger than
/// `tol * scale` fail, where `scale = max(1, max |x|, max |alpha|, max |beta|)`.
pub fn verify_skorokhod<S: Scalar>(dec: &ReflectedDecomposition<S>, tol: f64) -> SkorokhodReport {
    let f = |v: S| v.as_f64();
    let len = dec.y.len();
    let scale = dec
        .x
        .iter()
        .chain(&dec.alpha)
        .chain(&dec.beta)
        .fold(1.0f64, |m, &v| m.max(f(v).abs()));
    let bound = tol * scale;
    let mut monotonicity = None;
    let mut confinement = None;
    let mut identity = None;
    let mut flatness = None;
    let mut max_identity_error = 0.0f64;
    for k in 0..len {
        worse(&mut confinement, f(dec.alpha[k]) - f(dec.y[k]), "y<alpha", k);
        worse(&mut confinement, f(dec.y[k]) - f(dec.beta[k]), "y>beta", k);
        let id = (f(dec.y[k]) + f(dec.xi[k]) - f(dec.x[k])).abs();
        max_identity_error = max_identity_error.max(id);
        worse(&mut identity, id - bound, "y+xi-x", k);
    }
    worse(&mut monotonicity, f(dec.a[0]).abs(), "a[0]", 0);
    worse(&mut monotonicity, f(dec.c[0]).abs(), "c[0]", 0);
    let (mut slack_lo, mut slack_up) = (0.0f64, 0.0f64);
    for k in 1..len {
        let da = f(dec.a[k]) - f(dec.a[k - 1]);
        let dc = f(dec.c[k]) - f(dec.c[k - 1]);
        worse(&mut monotonicity, -da, "a", k);
        worse(&mut monotonicity, -dc, "c", k);
        let node = match dec.direction {
            Direction::Forward => k,
            Direction::Backward => k - 1,
        };
        let gap_lo = f(dec.y[node]) - f(dec.alpha[node]);
        let gap_up = f(dec.beta[node]) - f(dec.y[node]);
        slack_lo += gap_lo * da.max(0.0);
        slack_up += gap_up * dc.max(0.0);
        if da > 0.0 {
            worse(&mut flatness, gap_lo.abs() - bound, "a grows off alpha", node);
        }
        if dc > 0.0 {
            worse(&mut flatness, gap_up.abs() - bound, "c grows off beta", node);
        }
    }
    let monotonicity = monotonicity.filter(|v| v.amount > bound);
    let pass = monotonicity.is_none()
        && confinement.is_none()
        && identity.is_none()
        && flatness.is_none()
        && slack_lo.abs() <= bound
        && slack_up.abs() <= bound;
    SkorokhodReport {
        pass,
        tolerance: tol,
        scale,
        monotonicity,
        confinement,
        identity,
        flatness,
        slackness_lower: slack_lo,
        slackness_upper: slack_up,
        max_identity_error,
    }
}

/// Writes `t,x,y,A,C` rows.
pub fn write_csv<S: Scalar>(dec: &ReflectedDecomposition<S>, times: &[S], path: &Path) -> Result<()> {
    if times.len() != dec.y.len() {
        return Err(Error::Contract(format!("{} times for {} nodes", times.len(), dec.y.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["t", "x", "y", "A", "C"]).map_err(io)?;
    for k in 0..times.len() {
        w.write_record(
            [times[k], dec.x[k], dec.y[k], dec.a[k], dec.c[k]].map(|v| format!("{:?}", v.as_f64())),
        )
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts(lo: f64, hi: f64, n: usize) -> BarrierPaths<f64> {
        BarrierPaths::constant(lo, hi, n).unwrap()
    }

    #[test]
    fn h_and_l_on_constant_path() {
        let x = [0.0; 6];
        let b = consts(-1.0, 1.0, 6);
        for t in 0..6 {
            assert_eq!(compute_h(&x, b.alpha(), b.beta(), t), -1.0);
            assert_eq!(compute_l(&x, b.alpha(), b.beta(), t), 1.0);
        }
        assert_eq!(compute_h(&[0.3], &[-1.0], &[1.0], 0), 0.3 - 1.0);
    }

    #[test]
    fn h_after_touching_upper_barrier() {
        // touches beta = 1 at s* = 2 and stays above alpha
        let x = [0.0, 0.5, 1.0, 0.7, 0.2];
        let b = consts(-1.0, 1.0, 5);
        assert_eq!(compute_h(&x, b.alpha(), b.beta(), 1), -0.5);
        for t in 2..5 {
            assert_eq!(compute_h(&x, b.alpha(), b.beta(), t), 0.0);
        }
    }

    #[test]
    fn l_on_path_touching_lower_barrier() {
        let x = [0.0, -0.6, -1.2, -0.4, 0.9];
        let b = consts(-1.0, 1.0, 5);
        // x - alpha = [1, 0.4, -0.2, 0.6, 1.9], x - beta = [-1, -1.6, -2.2, -1.4, -0.1]
        assert!((compute_l(&x, b.alpha(), b.beta(), 2) + 0.2).abs() < 1e-15);
        assert!((compute_l(&x, b.alpha(), b.beta(), 3) + 0.2).abs() < 1e-15);
        assert!((compute_l(&x, b.alpha(), b.beta(), 4) + 0.1).abs() < 1e-15);
        assert_eq!(compute_l(&x, b.alpha(), b.beta(), 1), 0.4);
    }

    #[test]
    fn first_hits() {
        let b = consts(-1.0, 1.0, 4);
        let inside = [0.0, 0.5, -0.5, 0.9];
        assert_eq!(first_hit_times(&inside, b.alpha(), b.beta()), FirstHits { lower: None, upper: None });
        let at_top = [1.0, 0.0, -1.0, 0.0];
        assert_eq!(first_hit_times(&at_top, b.alpha(), b.beta()), FirstHits { lower: Some(2), upper: Some(0) });
    }

    #[test]
    fn no_push_when_inside() {
        let x = [0.1, -0.3, 0.4, 0.2];
        let dec = reconstruct_reflection(&x, &consts(-1.0, 1.0, 4)).unwrap();
        assert_eq!(dec.y, x.to_vec());
        assert!(dec.xi.iter().chain(&dec.a).chain(&dec.c).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_above_upper_barrier() {
        let x = [0.0, 2.0, 2.0, 2.5];
        let dec = reconstruct_reflection(&x, &consts(-1.0, 1.0, 4)).unwrap();
        assert_eq!(dec.y, vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(dec.c, vec![0.0, 1.0, 1.0, 1.5]);
        assert!(dec.a.iter().all(|&v| v == 0.0));
        assert!(verify_skorokhod(&dec, 1e-8).pass);
    }

    #[test]
    fn gap_violation_is_model_error() {
        assert!(matches!(BarrierPaths::new(vec![0.0, 0.5], vec![1.0, 0.5]), Err(Error::Model(_))));
        assert!(matches!(BarrierPaths::new(vec![0.0], vec![1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn corrupted_a_fails_with_location() {
        let x = [0.0, -2.0, -1.5, -3.0, 0.0];
        let mut dec = reconstruct_reflection(&x, &consts(-1.0, 1.0, 5)).unwrap();
        assert!(verify_skorokhod(&dec, 1e-8).pass);
        dec.a[3] = dec.a[2] - 0.1;
        let r = verify_skorokhod(&dec, 1e-8);
        assert!(!r.pass);
        let v = r.monotonicity.unwrap();
        assert_eq!((v.series, v.index), ("a", 3));
    }

    #[test]
    fn backward_round_trip_matches_recursion() {
        // Y_3 = 0; Y_n = clamp(Y_{n+1} + delta_n) on [-0.5, 0.5]
        let deltas = [0.2, -1.2, 0.7];
        let b = consts(-0.5, 0.5, 4);
        let dec = reconstruct_backward(0.0, &deltas, &b).unwrap();
        let mut y = [0.0; 4];
        for n in (0..3).rev() {
            y[n] = (y[n + 1] + deltas[n]).clamp(-0.5, 0.5);
        }
        for n in 0..4 {
            assert!((dec.y[n] - y[n]).abs() < 1e-15);
        }
        // lift of 0.2 at node 1, push down of 0.2 at node 2
        assert!((dec.a[2] - dec.a[1] - 0.2).abs() < 1e-15);
        assert!((dec.c[3] - dec.c[2] - 0.2).abs() < 1e-15);
        assert_eq!(dec.a[0], 0.0);
        assert!(verify_skorokhod(&dec, 1e-8).pass);
    }

    #[test]
    fn reversal_twice_is_identity() {
        let x = vec![1.0, 2.0, 3.5];
        assert_eq!(reverse(&reverse(&x)), x);
        let b = BarrierPaths::new(vec![-1.0, -2.0, -3.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.reversed().reversed(), b);
    }

    #[test]
    fn f32_paths_work() {
        let b = BarrierPaths::<f32>::constant(-1.0, 1.0, 4).unwrap();
        let dec = reconstruct_reflection(&[0.0f32, 1.5, -2.0, 0.0], &b).unwrap();
        assert_eq!(dec.y, clamp_recursion(&[0.0f32, 1.5, -2.0, 0.0], &b).unwrap());
    }

    fn walk() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.5f64..1.5, n),
                prop::collection::vec(-0.3f64..0.3, n),
                prop::collection::vec(0.05f64..1.0, n),
            )
                .prop_map(|(steps, mid, half)| {
                    let mut x = Vec::with_capacity(steps.len());
                    let mut acc = 0.0;
                    for s in steps {
                        acc += s;
                        x.push(acc);
                    }
                    let alpha = mid.iter().zip(&half).map(|(m, h)| m - h).collect();
                    let beta = mid.iter().zip(&half).map(|(m, h)| m + h).collect();
                    (x, alpha, beta)
                })
        })
    }

    proptest! {
        #[test]
        fn running_recursions_match_direct((x, alpha, beta) in walk()) {
            let h = h_path(&x, &alpha, &beta);
            let l = l_path(&x, &alpha, &beta);
            for t in 0..x.len() {
                prop_assert_eq!(h[t], compute_h(&x, &alpha, &beta, t));
                prop_assert_eq!(l[t], compute_l(&x, &alpha, &beta, t));
            }
        }

        #[test]
        fn l_is_mirror_of_h((x, alpha, beta) in walk(), t in 0usize..60) {
            let t = t % x.len();
            let nx: Vec<f64> = x.iter().map(|v| -v).collect();
            let na: Vec<f64> = beta.iter().map(|v| -v).collect();
            let nb: Vec<f64> = alpha.iter().map(|v| -v).collect();
            prop_assert_eq!(compute_l(&x, &alpha, &beta, t), -compute_h(&nx, &na, &nb, t));
        }

        #[test]
        fn map_matches_clamp_recursion((x, alpha, beta) in walk()) {
            let b = BarrierPaths::new(alpha, beta).unwrap();
            let dec = reconstruct_reflection(&x, &b).unwrap();
            let reference = clamp_recursion(&x, &b).unwrap();
            for k in 0..x.len() {
                prop_assert!((dec.y[k] - reference[k]).abs() <= 1e-12 * (1.0 + x[k].abs()));
            }
            let r = verify_skorokhod(&dec, 1e-8);
            prop_assert!(r.pass, "{:?}", r);
            prop_assert!(r.max_identity_error <= 1e-12 * r.scale);
        }

        #[test]
        fn reflected_path_is_fixed_point((x, alpha, beta) in walk()) {
            let b = BarrierPaths::new(alpha, beta).unwrap();
            let y = clamp_recursion(&x, &b).unwrap();
            // a path inside the band with y_0 strictly inside needs no push
            let inside: Vec<f64> = y
                .iter()
                .zip(b.alpha().iter().zip(b.beta()))
                .map(|(&v, (&a, &bb))| v.clamp(a + 1e-9 * (bb - a), bb - 1e-9 * (bb - a)))
                .collect();
            let dec = reconstruct_reflection(&inside, &b).unwrap();
            prop_assert!(dec.xi.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn backward_matches_recursion(
            deltas in prop::collection::vec(-0.8f64..0.8, 1..50),
            g in -0.3f64..0.3,
        ) {
            let n = deltas.len();
            let b = consts(-0.5, 0.5, n + 1);
            let dec = reconstruct_backward(g, &deltas, &b).unwrap();
            let mut y = vec![0.0; n + 1];
            y[n] = g;
            for i in (0..n).rev() {
                y[i] = (y[i + 1] + deltas[i]).clamp(-0.5, 0.5);
            }
            for i in 0..=n {
                prop_assert!((dec.y[i] - y[i]).abs() <= 1e-12);
            }
            let r = verify_skorokhod(&dec, 1e-8);
            prop_assert!(r.pass, "{:?}", r);
        }
    }
}
