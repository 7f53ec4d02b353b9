//! Path functionals and the fluctuation statistics evaluated on ensembles,
//! together with the bounded-Lipschitz distance and small summary helpers.
//!
//! Centering is always against a reference sample (the mean-field ensemble),
//! not analytic means: the limit laws are only accessible by sampling. The
//! centering reference and seed are recorded by the caller in every report.

use crate::model::Scalar1;
use crate::simulate::{PathEnsemble, PathView, ReferenceEnsemble};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("type {0} has no particles")]
    EmptyType(usize),
    #[error("tuple count {needed} exceeds the configured cap {cap}")]
    TupleCapExceeded { needed: u128, cap: u128 },
    #[error("factor seeds differ: ensemble {ensemble}, reference {reference}")]
    FactorSeedMismatch { ensemble: u64, reference: u64 },
    #[error("ensemble has no common factor record")]
    NoFactor,
    #[error("time grids do not match")]
    GridMismatch,
    #[error("sample dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("functional expects {expected} coordinates, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

/// Default cap on enumerated tuples for non-separable multi-type statistics.
pub const DEFAULT_TUPLE_CAP: u128 = 100_000_000;

// ---------------------------------------------------------------------------
// Path functionals
// ---------------------------------------------------------------------------

/// Building blocks for functionals of a single discrete path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathExpr {
    Const(f64),
    /// scale · x_T[coord]
    Terminal { coord: usize, scale: f64 },
    /// scale · x_T[coord]²
    TerminalSquare { coord: usize, scale: f64 },
    /// scale · g(x_T[coord])
    TerminalMap {
        g: Scalar1,
        coord: usize,
        scale: f64,
    },
    /// scale · ∫_0^T g(x_t[coord]) dt, left-endpoint sum.
    PathIntegral {
        g: Scalar1,
        coord: usize,
        scale: f64,
    },
    Sum(Vec<PathExpr>),
}

impl PathExpr {
    fn eval(&self, path: PathView<'_>, dt: f64) -> f64 {
        match self {
            PathExpr::Const(c) => *c,
            PathExpr::Terminal { coord, scale } => scale * path.terminal()[*coord],
            PathExpr::TerminalSquare { coord, scale } => {
                let v = path.terminal()[*coord];
                scale * v * v
            }
            PathExpr::TerminalMap { g, coord, scale } => scale * g.eval(path.terminal()[*coord]),
            PathExpr::PathIntegral { g, coord, scale } => {
                let n = path.points() - 1;
                let mut acc = 0.0;
                for k in 0..n {
                    acc += g.eval(path.point(k)[*coord]);
                }
                scale * acc * dt
            }
            PathExpr::Sum(parts) => parts.iter().map(|p| p.eval(path, dt)).sum(),
        }
    }
}

/// Declared centering of a functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenteringMode {
    None,
    PerType,
    Multitype,
}

/// A named functional of one path with an optional centering offset
/// (subtracted reference-sample mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFunctional {
    pub name: String,
    pub expr: PathExpr,
    pub offset: f64,
    pub centered: bool,
}

impl PathFunctional {
    pub fn raw(name: impl Into<String>, expr: PathExpr) -> Self {
        PathFunctional {
            name: name.into(),
            expr,
            offset: 0.0,
            centered: false,
        }
    }

    /// φ(ω) = ω_T[0].
    pub fn terminal() -> Self {
        Self::raw(
            "x_T",
            PathExpr::Terminal {
                coord: 0,
                scale: 1.0,
            },
        )
    }

    /// κ·(ω_T − ∫_0^T β(ω_t) dt), the functional of the two-population view
    /// of the single-type system.
    pub fn terminal_minus_integral(kappa: f64, beta: Scalar1) -> Self {
        Self::raw(
            format!("kappa={kappa}(x_T-int_beta)"),
            PathExpr::Sum(vec![
                PathExpr::Terminal {
                    coord: 0,
                    scale: kappa,
                },
                PathExpr::PathIntegral {
                    g: beta,
                    coord: 0,
                    scale: -kappa,
                },
            ]),
        )
    }

    #[inline]
    pub fn eval(&self, path: PathView<'_>, dt: f64) -> f64 {
        self.expr.eval(path, dt) - self.offset
    }
}

/// Center a raw functional against the type-`alpha` reference sample: the
/// returned functional has exactly zero sample mean on that reference.
pub fn center_functional(
    phi: &PathFunctional,
    reference: &ReferenceEnsemble,
    alpha: usize,
) -> PathFunctional {
    let ens = &reference.ensemble;
    let dt = ens.grid.dt();
    let range = ens.layout.range(alpha);
    let mut mean = 0.0;
    let count = range.len() as f64;
    for i in range {
        mean += phi.expr.eval(ens.x_path(i), dt);
    }
    mean /= count;
    PathFunctional {
        name: phi.name.clone(),
        expr: phi.expr.clone(),
        offset: mean,
        centered: true,
    }
}

// ---------------------------------------------------------------------------
// Multi-path functionals (sums of separable terms)
// ---------------------------------------------------------------------------

/// One separable term c·Π_α φ_α(ω^α); `None` factors are absent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableTerm {
    pub coeff: f64,
    pub factors: Vec<Option<PathFunctional>>,
}

/// K-path functional represented as a sum of separable terms. The separable
/// form admits O(N) evaluation of tuple averages; arbitrary functionals go
/// through the capped tuple-enumeration entry points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPathFunctional {
    pub k: usize,
    pub terms: Vec<SeparableTerm>,
}

impl MultiPathFunctional {
    pub fn product(factors: Vec<PathFunctional>) -> Self {
        let k = factors.len();
        MultiPathFunctional {
            k,
            terms: vec![SeparableTerm {
                coeff: 1.0,
                factors: factors.into_iter().map(Some).collect(),
            }],
        }
    }

    pub fn constant(k: usize, c: f64) -> Self {
        MultiPathFunctional {
            k,
            terms: vec![SeparableTerm {
                coeff: c,
                factors: vec![None; k],
            }],
        }
    }

    pub fn eval(&self, paths: &[PathView<'_>], dt: f64) -> Result<f64, StatsError> {
        if paths.len() != self.k {
            return Err(StatsError::ArityMismatch {
                expected: self.k,
                got: paths.len(),
            });
        }
        let mut total = 0.0;
        for term in &self.terms {
            let mut v = term.coeff;
            for (alpha, f) in term.factors.iter().enumerate() {
                if let Some(f) = f {
                    v *= f.eval(paths[alpha], dt);
                }
            }
            total += v;
        }
        Ok(total)
    }
}

/// Multitype centering of a separable functional: the full product of
/// per-coordinate centering operators. Each present factor is centered
/// against its type's reference sample; terms that do not involve every
/// coordinate project to zero and are dropped. Every one-coordinate sample
/// mean of the result vanishes on the reference.
pub fn center_multitype(
    f: &MultiPathFunctional,
    reference: &ReferenceEnsemble,
) -> MultiPathFunctional {
    let mut terms = Vec::new();
    for term in &f.terms {
        if term.factors.iter().any(|x| x.is_none()) {
            continue;
        }
        let factors = term
            .factors
            .iter()
            .enumerate()
            .map(|(alpha, fac)| Some(center_functional(fac.as_ref().unwrap(), reference, alpha)))
            .collect();
        terms.push(SeparableTerm {
            coeff: term.coeff,
            factors,
        });
    }
    MultiPathFunctional { k: f.k, terms }
}

// ---------------------------------------------------------------------------
// Fluctuation statistics
// ---------------------------------------------------------------------------

/// Per-type normalized fluctuation sum ξ^N_α(φ) = N_α^{-1/2} Σ_{i∈N_α} φ(Z^i).
pub fn xi_alpha(ens: &PathEnsemble, phi: &PathFunctional, alpha: usize) -> Result<f64, StatsError> {
    let range = ens.layout.range(alpha);
    if range.is_empty() {
        return Err(StatsError::EmptyType(alpha));
    }
    let dt = ens.grid.dt();
    let mut acc = 0.0;
    let count = range.len() as f64;
    for i in range {
        acc += phi.eval(ens.x_path(i), dt);
    }
    Ok(acc / count.sqrt())
}

/// Full K-fold tuple average (1/(N_1⋯N_K)) Σ f over separable terms:
/// products of per-type means.
pub fn lln_statistic(ens: &PathEnsemble, f: &MultiPathFunctional) -> Result<f64, StatsError> {
    per_type_reduce(ens, f, |_n| 1.0)
}

/// Multi-type fluctuation statistic ξ^N(φ) = (N_1⋯N_K)^{-1/2} Σ over tuples.
/// For separable terms this is the exact product of per-type normalized
/// sums.
pub fn xi_multitype(ens: &PathEnsemble, f: &MultiPathFunctional) -> Result<f64, StatsError> {
    per_type_reduce(ens, f, |n| n.sqrt())
}

fn per_type_reduce(
    ens: &PathEnsemble,
    f: &MultiPathFunctional,
    norm: impl Fn(f64) -> f64,
) -> Result<f64, StatsError> {
    if f.k != ens.layout.k() {
        return Err(StatsError::ArityMismatch {
            expected: ens.layout.k(),
            got: f.k,
        });
    }
    let dt = ens.grid.dt();
    let mut total = 0.0;
    for term in &f.terms {
        let mut v = term.coeff;
        for (alpha, fac) in term.factors.iter().enumerate() {
            let range = ens.layout.range(alpha);
            if range.is_empty() {
                return Err(StatsError::EmptyType(alpha));
            }
            let n = range.len() as f64;
            match fac {
                Some(fac) => {
                    let mut s = 0.0;
                    for i in range {
                        s += fac.eval(ens.x_path(i), dt);
                    }
                    // Tuple sums contribute Σφ per coordinate; normalization
                    // is Σφ/N per coordinate for the LLN and Σφ/√N for ξ.
                    v *= s * norm(n) / n;
                }
                None => {
                    // Absent coordinates sum to N_α before normalization.
                    v *= norm(n);
                }
            }
        }
        total += v;
    }
    Ok(total)
}

/// Capped tuple enumeration for non-separable K-path functionals: the full
/// average over N_1⋯N_K tuples, refused above `cap`.
pub fn lln_statistic_general(
    ens: &PathEnsemble,
    eval: impl Fn(&[PathView<'_>]) -> f64,
    cap: u128,
) -> Result<f64, StatsError> {
    let k = ens.layout.k();
    let mut needed: u128 = 1;
    for alpha in 0..k {
        let c = ens.layout.count(alpha);
        if c == 0 {
            return Err(StatsError::EmptyType(alpha));
        }
        needed = needed.saturating_mul(c as u128);
    }
    if needed > cap {
        return Err(StatsError::TupleCapExceeded { needed, cap });
    }
    let mut idx: Vec<usize> = (0..k).map(|a| ens.layout.range(a).start).collect();
    let mut total = 0.0;
    let mut count = 0u64;
    loop {
        let views: Vec<PathView<'_>> = idx.iter().map(|&i| ens.x_path(i)).collect();
        total += eval(&views);
        count += 1;
        let mut a = k;
        loop {
            if a == 0 {
                return Ok(total / count as f64);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < ens.layout.range(a).end {
                break;
            }
            idx[a] = ens.layout.range(a).start;
        }
    }
}

/// Conditional sample mean m^α_φ: the Monte Carlo surrogate of
/// ∫ φ(X_*) ρ_α(ω̄, dω) over the conditional reference for one factor draw.
pub fn m_phi_alpha(
    phi: &PathFunctional,
    cond: &ReferenceEnsemble,
    alpha: usize,
) -> Result<f64, StatsError> {
    let ens = &cond.ensemble;
    let range = ens.layout.range(alpha);
    if range.is_empty() {
        return Err(StatsError::EmptyType(alpha));
    }
    let dt = ens.grid.dt();
    let mut acc = 0.0;
    let count = range.len() as f64;
    for i in range {
        acc += phi.eval(ens.x_path(i), dt);
    }
    Ok(acc / count)
}

/// Common-factor fluctuation 𝒱^N_α(φ) = √N_α (mean_α φ(Z^i) − m^α_φ(V⁰)).
/// The conditional reference must be built from the same factor driving
/// noise as the interacting ensemble (the V⁰ coupling).
pub fn v_alpha(
    ens: &PathEnsemble,
    phi: &PathFunctional,
    alpha: usize,
    cond: &ReferenceEnsemble,
) -> Result<f64, StatsError> {
    let ef = ens.factor.as_ref().ok_or(StatsError::NoFactor)?;
    let cf = cond.ensemble.factor.as_ref().ok_or(StatsError::NoFactor)?;
    if ef.seed != cf.seed {
        return Err(StatsError::FactorSeedMismatch {
            ensemble: ef.seed,
            reference: cf.seed,
        });
    }
    if ens.grid != cond.ensemble.grid {
        return Err(StatsError::GridMismatch);
    }
    let range = ens.layout.range(alpha);
    if range.is_empty() {
        return Err(StatsError::EmptyType(alpha));
    }
    let dt = ens.grid.dt();
    let n = range.len() as f64;
    let mut mean = 0.0;
    for i in range {
        mean += phi.eval(ens.x_path(i), dt);
    }
    mean /= n;
    let m = m_phi_alpha(phi, cond, alpha)?;
    Ok(n.sqrt() * (mean - m))
}

// ---------------------------------------------------------------------------
// Replication samples
// ---------------------------------------------------------------------------

/// Matrix of statistic values over replications, with labels and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub labels: Vec<String>,
    /// Row-major R × labels.len().
    pub values: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
}

impl FluctuationSample {
    pub fn new(labels: Vec<String>, replications: usize, seed: u64) -> Self {
        let cols = labels.len();
        FluctuationSample {
            labels,
            values: vec![0.0; replications * cols],
            replications,
            seed,
        }
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.labels.len();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.labels.len();
        (0..self.replications)
            .map(|r| self.values[r * c + j])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Bounded-Lipschitz distance
// ---------------------------------------------------------------------------

/// d_BL between two empirical samples in R^d: exact in d = 1 via the dual
/// program over sorted atoms; a dictionary lower bound otherwise. The value
/// never exceeds 2 and the dictionary estimate is monotone in dictionary
/// size.
pub fn dbl_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64, StatsError> {
    if dim == 0 || a.is_empty() || b.is_empty() {
        return Err(StatsError::DimensionMismatch(a.len(), b.len()));
    }
    if a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(StatsError::DimensionMismatch(a.len() % dim, b.len() % dim));
    }
    if dim == 1 {
        Ok(dbl_exact_1d(a, b))
    } else {
        Ok(dbl_dictionary(a, b, dim))
    }
}

/// Exact d_BL in one dimension: maximize Σ c_i f(x_i) over |f| ≤ 1,
/// Lip(f) ≤ 1 by dynamic programming on concave piecewise-linear value
/// functions over the sorted merged support. Any feasible assignment on the
/// atoms extends to a 1-Lipschitz 1-bounded function on all of R, so the
/// program value equals the distance between the empirical measures.
fn dbl_exact_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    let wa = 1.0 / a.len() as f64;
    let wb = 1.0 / b.len() as f64;
    for &x in a {
        atoms.push((x, wa));
    }
    for &x in b {
        atoms.push((x, -wb));
    }
    atoms.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (x, c) in atoms {
        match merged.last_mut() {
            Some((px, pc)) if *px == x => *pc += c,
            _ => merged.push((x, c)),
        }
    }
    // Value function V_i(f) = best value of Σ_{j≤i} c_j f_j with f_i = f,
    // kept as concave piecewise-linear breakpoints on [-1, 1].
    let c0 = merged[0].1;
    let mut bps: Vec<(f64, f64)> = vec![(-1.0, -c0), (1.0, c0)];
    for w in merged.windows(2) {
        let gap = w[1].0 - w[0].0;
        bps = window_max(&bps, gap);
        for p in bps.iter_mut() {
            p.1 += w[1].1 * p.0;
        }
        bps = dedup_breakpoints(bps);
    }
    bps.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.1))
}

/// Sliding-window maximum W(f) = max_{|g−f|≤d} V(g) of a concave
/// piecewise-linear function, clipped back to [-1, 1].
fn window_max(bps: &[(f64, f64)], d: f64) -> Vec<(f64, f64)> {
    let (mut argmax, mut best) = (bps[0].0, bps[0].1);
    for &(x, y) in bps {
        if y > best {
            best = y;
            argmax = x;
        }
    }
    let mut out = Vec::with_capacity(bps.len() + 2);
    for &(x, y) in bps.iter().filter(|p| p.0 <= argmax) {
        out.push((x - d, y));
    }
    if d > 0.0 {
        out.push((argmax + d, best));
    }
    for &(x, y) in bps.iter().filter(|p| p.0 > argmax) {
        out.push((x + d, y));
    }
    clip_domain(&out, -1.0, 1.0)
}

fn clip_domain(bps: &[(f64, f64)], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let eval = |x: f64| -> f64 {
        if x <= bps[0].0 {
            return bps[0].1;
        }
        if x >= bps[bps.len() - 1].0 {
            return bps[bps.len() - 1].1;
        }
        for w in bps.windows(2) {
            if x >= w[0].0 && x <= w[1].0 {
                let t = if w[1].0 > w[0].0 {
                    (x - w[0].0) / (w[1].0 - w[0].0)
                } else {
                    0.0
                };
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        bps[bps.len() - 1].1
    };
    let mut out = vec![(lo, eval(lo))];
    for &(x, y) in bps {
        if x > lo && x < hi {
            out.push((x, y));
        }
    }
    out.push((hi, eval(hi)));
    out
}

fn dedup_breakpoints(bps: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(bps.len());
    for p in bps {
        if let Some(last) = out.last() {
            if (p.0 - last.0).abs() < 1e-15 {
                continue;
            }
        }
        out.push(p);
    }
    out
}

/// Dictionary lower bound for d > 1: clipped coordinate maps and products of
/// tanh features with unit-Lipschitz normalization.
fn dbl_dictionary(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let na = a.len() / dim;
    let nb = b.len() / dim;
    let mut best = 0.0f64;
    let mut consider = |f: &dyn Fn(&[f64]) -> f64| {
        let ma: f64 = a.chunks_exact(dim).map(f).sum::<f64>() / na as f64;
        let mb: f64 = b.chunks_exact(dim).map(f).sum::<f64>() / nb as f64;
        best = best.max((ma - mb).abs());
    };
    for c in 0..dim {
        consider(&|x: &[f64]| x[c].clamp(-1.0, 1.0));
        for &shift in &[-1.0, 0.0, 1.0] {
            consider(&|x: &[f64]| (x[c] + shift).tanh());
        }
    }
    for c1 in 0..dim {
        for c2 in (c1 + 1)..dim {
            // Lip(tanh·tanh) ≤ 2, so scale by 1/2 to stay 1-Lipschitz.
            consider(&|x: &[f64]| 0.5 * x[c1].tanh() * x[c2].tanh());
        }
    }
    best.min(2.0)
}

// ---------------------------------------------------------------------------
// Summary helpers
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample variance (fourth-moment form).
pub fn variance_se(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2).max(0.0) / n).sqrt()
}

/// Standard normal CDF via a rational erfc approximation (absolute error
/// below 1.2e-7, ample for the KS comparisons here).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// One-sample Kolmogorov–Smirnov statistic against a callable CDF.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.total_cmp(b));
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((i as f64 / n - f).abs());
    }
    d
}

/// Asymptotic 1% critical value for the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialLaw, LinearModelSpec, PopulationLayout, TimeGrid};
    use crate::simulate::{
        simulate_conditional_reference, simulate_interacting, simulate_reference,
    };

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 25).unwrap()
    }

    #[test]
    fn lln_of_one_is_one() {
        let spec = LinearModelSpec::zero(2, 1);
        let layout = PopulationLayout::from_counts(vec![4, 3]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 1).unwrap();
        let f = MultiPathFunctional::constant(2, 1.0);
        assert_eq!(lln_statistic(&ens, &f).unwrap(), 1.0);
    }

    #[test]
    fn lln_product_of_terminal_means() {
        let spec = LinearModelSpec::zero(2, 1);
        let layout = PopulationLayout::from_counts(vec![50, 60]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 2).unwrap();
        let f = MultiPathFunctional::product(vec![
            PathFunctional::terminal(),
            PathFunctional::terminal(),
        ]);
        let v = lln_statistic(&ens, &f).unwrap();
        let dt = ens.grid.dt();
        let mut prod = 1.0;
        for alpha in 0..2 {
            let r = ens.layout.range(alpha);
            let n = r.len() as f64;
            let s: f64 = r
                .map(|i| PathFunctional::terminal().eval(ens.x_path(i), dt))
                .sum();
            prod *= s / n;
        }
        assert!((v - prod).abs() < 1e-14);
        assert!(v.abs() < 0.2, "near zero for mean-zero Brownian: {v}");
    }

    #[test]
    fn lln_general_matches_separable() {
        let spec = LinearModelSpec::zero(2, 1);
        let layout = PopulationLayout::from_counts(vec![7, 5]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 5).unwrap();
        let f = MultiPathFunctional::product(vec![
            PathFunctional::terminal(),
            PathFunctional::terminal(),
        ]);
        let sep = lln_statistic(&ens, &f).unwrap();
        let gen = lln_statistic_general(
            &ens,
            |paths| paths[0].terminal()[0] * paths[1].terminal()[0],
            DEFAULT_TUPLE_CAP,
        )
        .unwrap();
        assert!((sep - gen).abs() < 1e-12);
    }

    #[test]
    fn tuple_cap_refusal() {
        let spec = LinearModelSpec::zero(2, 1);
        let layout = PopulationLayout::from_counts(vec![7, 5]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 5).unwrap();
        let err = lln_statistic_general(&ens, |_| 1.0, 10).unwrap_err();
        assert!(matches!(
            err,
            StatsError::TupleCapExceeded {
                needed: 35,
                cap: 10
            }
        ));
    }

    #[test]
    fn xi_zero_functional() {
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![4]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 1).unwrap();
        let phi = PathFunctional::raw("zero", PathExpr::Const(0.0));
        assert_eq!(xi_alpha(&ens, &phi, 0).unwrap(), 0.0);
    }

    #[test]
    fn xi_single_particle() {
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![1]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 1).unwrap();
        let phi = PathFunctional::terminal();
        let dt = ens.grid.dt();
        assert_eq!(
            xi_alpha(&ens, &phi, 0).unwrap(),
            phi.eval(ens.x_path(0), dt)
        );
    }

    #[test]
    fn xi_is_linear() {
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![30]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 3).unwrap();
        let phi = PathFunctional::terminal();
        let psi = PathFunctional::raw(
            "sin(x_T)",
            PathExpr::TerminalMap {
                g: Scalar1::sin(),
                coord: 0,
                scale: 1.0,
            },
        );
        let combo = PathFunctional::raw(
            "combo",
            PathExpr::Sum(vec![
                PathExpr::Terminal {
                    coord: 0,
                    scale: 2.0,
                },
                PathExpr::TerminalMap {
                    g: Scalar1::sin(),
                    coord: 0,
                    scale: 3.0,
                },
            ]),
        );
        let a = xi_alpha(&ens, &phi, 0).unwrap();
        let b = xi_alpha(&ens, &psi, 0).unwrap();
        let c = xi_alpha(&ens, &combo, 0).unwrap();
        assert!((c - (2.0 * a + 3.0 * b)).abs() < 1e-10);
    }

    #[test]
    fn xi_variance_iid_case() {
        // b ≡ 0, φ = ω_T, X_0 = 0: Var ξ = T at every N (i.i.d. CLT exact).
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![50]).unwrap();
        let reps = 2000;
        let mut vals = Vec::with_capacity(reps);
        let phi = PathFunctional::terminal();
        for r in 0..reps {
            let ens = simulate_interacting(&spec, &layout, grid(), 1000 + r as u64).unwrap();
            vals.push(xi_alpha(&ens, &phi, 0).unwrap());
        }
        let v = variance(&vals);
        assert!(
            (v - 1.0).abs() < 0.05 + 3.0 * variance_se(&vals),
            "var {v}"
        );
    }

    #[test]
    fn centered_constant_vanishes() {
        let spec = LinearModelSpec::zero(1, 1);
        let r = simulate_reference(&spec, 100, grid(), 7, 0).unwrap();
        let phi = PathFunctional::raw("c", PathExpr::Const(2.5));
        let c = center_functional(&phi, &r, 0);
        assert_eq!(c.eval(r.ensemble.x_path(0), r.ensemble.grid.dt()), 0.0);
    }

    #[test]
    fn centering_yields_exact_zero_sample_mean() {
        let spec = LinearModelSpec::zero(1, 1);
        let r = simulate_reference(&spec, 200, grid(), 8, 0).unwrap();
        let phi = PathFunctional::raw(
            "sin(x_T)",
            PathExpr::TerminalMap {
                g: Scalar1::sin(),
                coord: 0,
                scale: 1.0,
            },
        );
        let c = center_functional(&phi, &r, 0);
        let dt = r.ensemble.grid.dt();
        let s: f64 = r
            .ensemble
            .layout
            .range(0)
            .map(|i| c.eval(r.ensemble.x_path(i), dt))
            .sum();
        assert!(s.abs() < 1e-10 * 200.0);
        // Idempotence on the sample: re-centering changes nothing further.
        let c2 = center_functional(&c, &r, 0);
        let v1 = c.eval(r.ensemble.x_path(3), dt);
        let v2 = c2.eval(r.ensemble.x_path(3), dt);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn multitype_centering_kills_additive_parts() {
        let spec = LinearModelSpec::zero(2, 1);
        let r = simulate_reference(&spec, 100, grid(), 9, 0).unwrap();
        // φ(ω¹,ω²) = g(ω¹) + h(ω²): the full projection is zero.
        let f = MultiPathFunctional {
            k: 2,
            terms: vec![
                SeparableTerm {
                    coeff: 1.0,
                    factors: vec![Some(PathFunctional::terminal()), None],
                },
                SeparableTerm {
                    coeff: 1.0,
                    factors: vec![None, Some(PathFunctional::terminal())],
                },
            ],
        };
        let c = center_multitype(&f, &r);
        assert!(c.terms.is_empty());
    }

    #[test]
    fn multitype_centering_zero_coordinate_means() {
        let spec = LinearModelSpec::zero(2, 1);
        let r = simulate_reference(&spec, 150, grid(), 10, 0).unwrap();
        let f = MultiPathFunctional::product(vec![
            PathFunctional::terminal(),
            PathFunctional::raw(
                "sin",
                PathExpr::TerminalMap {
                    g: Scalar1::sin(),
                    coord: 0,
                    scale: 1.0,
                },
            ),
        ]);
        let c = center_multitype(&f, &r);
        let dt = r.ensemble.grid.dt();
        // Coordinate-0 sample mean with coordinate 1 fixed at a probe path.
        let probe = r.ensemble.x_path(160);
        let mut s = 0.0;
        for i in r.ensemble.layout.range(0) {
            s += c.eval(&[r.ensemble.x_path(i), probe], dt).unwrap();
        }
        assert!(s.abs() < 1e-10 * 150.0, "coordinate mean {s}");
    }

    #[test]
    fn separable_xi_equals_product_identity() {
        let spec = LinearModelSpec::zero(2, 1);
        let layout = PopulationLayout::from_counts(vec![40, 30]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 11).unwrap();
        let phi1 = PathFunctional::terminal();
        let phi2 = PathFunctional::terminal();
        let f = MultiPathFunctional::product(vec![phi1.clone(), phi2.clone()]);
        let lhs = xi_multitype(&ens, &f).unwrap();
        let rhs = xi_alpha(&ens, &phi1, 0).unwrap() * xi_alpha(&ens, &phi2, 1).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn m_phi_constant_is_exact() {
        let spec = crate::simulate::tests_support::toy_common_spec();
        let cond = simulate_conditional_reference(&spec, 4, 50, grid(), 2, 0).unwrap();
        let phi = PathFunctional::raw("c", PathExpr::Const(3.25));
        assert_eq!(m_phi_alpha(&phi, &cond, 0).unwrap(), 3.25);
    }

    #[test]
    fn v_alpha_constant_is_zero_and_seed_mismatch_rejected() {
        let spec = crate::simulate::tests_support::toy_common_spec();
        let layout = PopulationLayout::from_counts(vec![20]).unwrap();
        let seeds = crate::simulate::SeedPair {
            particles: 5,
            factor: 10,
        };
        let ens =
            crate::simulate::simulate_common_factor_interacting(&spec, &layout, grid(), seeds)
                .unwrap();
        let cond = simulate_conditional_reference(&spec, 10, 50, grid(), 6, 0).unwrap();
        let phi = PathFunctional::raw("c", PathExpr::Const(1.5));
        assert_eq!(v_alpha(&ens, &phi, 0, &cond).unwrap(), 0.0);
        let other = simulate_conditional_reference(&spec, 11, 50, grid(), 6, 0).unwrap();
        assert!(matches!(
            v_alpha(&ens, &phi, 0, &other),
            Err(StatsError::FactorSeedMismatch { .. })
        ));
    }

    #[test]
    fn dbl_identical_samples_zero() {
        let a = vec![0.3, -1.2, 0.8, 2.0];
        assert_eq!(dbl_distance(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn dbl_point_masses_exact() {
        for x in [0.25, 0.5, 1.0, 1.7, 2.5, 5.0] {
            let a = vec![0.0];
            let b = vec![x];
            let d = dbl_distance(&a, &b, 1).unwrap();
            assert!(
                (d - x.min(2.0)).abs() < 1e-12,
                "x={x}: got {d}, want {}",
                x.min(2.0)
            );
        }
    }

    #[test]
    fn dbl_shuffled_sample_is_small() {
        let mut rng =
            crate::rng::CounterRng::from_seed(1).substream(crate::rng::StreamTag::Probe, 3);
        let n = 400;
        let xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let d = dbl_distance(&xs, &ys, 1).unwrap();
        assert!(d < 3.0 / (n as f64).sqrt() * 2.5, "d = {d}");
        assert!(d > 0.0);
    }

    #[test]
    fn dbl_dictionary_monotone_and_bounded() {
        let a = vec![0.0, 0.0, 5.0, 5.0];
        let b = vec![-5.0, -5.0, -5.0, -5.0];
        let d = dbl_distance(&a, &b, 2).unwrap();
        assert!(d <= 2.0);
        assert!(d > 1.0, "well separated clouds: {d}");
    }

    #[test]
    fn ks_of_normal_sample() {
        let mut rng =
            crate::rng::CounterRng::from_seed(2).substream(crate::rng::StreamTag::Probe, 4);
        let mut xs: Vec<f64> = (0..1000).map(|_| rng.standard_normal()).collect();
        let d = ks_statistic(&mut xs, normal_cdf);
        assert!(d < ks_critical_1pct(1000), "d = {d}");
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-6);
        assert!((normal_cdf(1.96) - 0.975).abs() < 3e-4);
        assert!((normal_cdf(-1.0) - 0.158655).abs() < 1e-5);
    }

    #[test]
    fn initial_law_variance_helper() {
        let u = InitialLaw::UniformBox {
            lo: vec![0.0],
            hi: vec![1.0],
        };
        assert!((u.var_coord(0) - 1.0 / 12.0).abs() < 1e-15);
    }
}
