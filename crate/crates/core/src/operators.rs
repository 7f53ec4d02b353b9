//! Monte Carlo (Nyström) realizations of the path-space integral operators:
//! centered kernels, the sample operator with its trace diagnostics and
//! Fredholm solves, limit covariances, Girsanov exponent diagnostics, and
//! the conditional (common-factor) random operators with their Gaussian
//! mixture limit.
//!
//! Discretization convention: the operator acts on sample values with equal
//! weights 1/M and first argument integrated,
//! (A f)(ω_j) ≈ (1/M) Σ_i H[i][j] f(ω_i),
//! matching A f(ω) = ∫ ĥ(ω′, ω) f(ω′) ν̂(dω′). Itô sums are left-endpoint
//! everywhere.

use crate::model::{CommonFactorModelSpec, LinearModelSpec, TimeGrid};
use crate::rng::{CounterRng, StreamTag};
use crate::simulate::{
    fundamental_solution, s_gamma_context, s_gamma_path_with, simulate_conditional_type_against_flow,
    simulate_type_against_flow, FlowKernelMeans, FlowTable, PathEnsemble, ReferenceEnsemble,
    SimError,
};
use crate::statistics::{m_phi_alpha, PathFunctional, StatsError};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("matrix singular to tolerance (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("time grids do not match")]
    GridMismatch,
    #[error("covariance not positive semidefinite: min eigenvalue {min_eig:.3e}")]
    NotPsd { min_eig: f64 },
    #[error("operator needs at least 2 samples")]
    TooFewSamples,
    #[error("weights must have one entry per type")]
    BadWeights,
}

// ---------------------------------------------------------------------------
// Centered kernels
// ---------------------------------------------------------------------------

/// Sample-centered interaction kernel
/// b_{αγ,t}(x, y) = b_{αγ}(x, y) − ⟨b_{αγ}(x, ·), μ^γ_t⟩
/// with μ^γ_t the stored reference flow at grid index `t_index`.
pub fn kernel_b_centered(
    spec: &LinearModelSpec,
    flow: &FlowTable,
    alpha: usize,
    gamma: usize,
    t_index: usize,
    x: &[f64],
    y: &[f64],
) -> Vec<f64> {
    let d = spec.dim;
    let b = spec.kernel(alpha, gamma);
    let mut out = vec![0.0; d];
    if matches!(
        b,
        crate::model::PairKernel::Zero | crate::model::PairKernel::Const(_)
    ) {
        // Centering annihilates constants analytically; skip the arithmetic
        // so no rounding residue survives.
        return out;
    }
    b.eval_into(x, y, &mut out);
    let sv = flow.states(gamma, t_index);
    let inv = 1.0 / sv.count() as f64;
    let mut buf = vec![0.0; d];
    for j in 0..sv.count() {
        b.eval_into(x, sv.state(j), &mut buf);
        for (o, &v) in out.iter_mut().zip(&buf) {
            *o -= inv * v;
        }
    }
    out
}

/// Path-space kernel h_{αγ}(ω, ω′) = √(λ_α/λ_γ) Σ_k b_{αγ,t_k}(X_k(ω),
/// X_k(ω′)) · ΔW_k(ω), a left-endpoint Itô sum along ω's driving path.
#[allow(clippy::too_many_arguments)]
pub fn kernel_h(
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
    weights: &[f64],
    alpha: usize,
    gamma: usize,
    omega_w: crate::simulate::PathView<'_>,
    omega_x: crate::simulate::PathView<'_>,
    omega2_x: crate::simulate::PathView<'_>,
) -> f64 {
    let d = spec.dim;
    let steps = omega_w.points() - 1;
    let table = FlowKernelMeans::new(spec, &reference.flow);
    let scale = (weights[alpha] / weights[gamma]).sqrt();
    let mut acc = 0.0;
    let mut bc = vec![0.0; d];
    for k in 0..steps {
        table.eval_centered(
            spec,
            &reference.flow,
            alpha,
            gamma,
            k,
            omega_x.point(k),
            omega2_x.point(k),
            &mut bc,
        );
        let w0 = omega_w.point(k);
        let w1 = omega_w.point(k + 1);
        for c in 0..d {
            acc += bc[c] * (w1[c] - w0[c]);
        }
    }
    scale * acc
}

// ---------------------------------------------------------------------------
// Sample operator
// ---------------------------------------------------------------------------

/// M independent K-tuples of (W, X) draws, one single-type ensemble per
/// coordinate (the ν̂ = ν_1 ⊗ … ⊗ ν_K product structure).
#[derive(Debug, Clone)]
pub struct OperatorSamples {
    pub m: usize,
    pub per_type: Vec<PathEnsemble>,
}

/// Monte Carlo representation of the lifted kernel ĥ as an M×M matrix,
/// together with its per-(α,γ) blocks.
#[derive(Debug, Clone)]
pub struct SampleOperator {
    pub m: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub grid: TimeGrid,
    pub samples: OperatorSamples,
    /// H[i][j] = ĥ(ω_i, ω_j).
    pub h: DMatrix<f64>,
    /// Blocks H_{αγ}[i][j] = ĥ_{αγ}(ω_i, ω_j), row-major in (α, γ).
    pub blocks: Vec<DMatrix<f64>>,
    pub seed: u64,
    /// Factor seed when the operator is conditional on a factor draw.
    pub factor_seed: Option<u64>,
}

impl SampleOperator {
    /// Action (A f)(ω_j) = (1/M) Σ_i H[i][j] f(ω_i).
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m];
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.h[(i, j)] * f[i];
            }
            out[j] = acc / m as f64;
        }
        out
    }

    /// Values of the lifted functional φ̂_α at the sample tuples.
    pub fn lifted_values(&self, phi: &PathFunctional, alpha: usize) -> Vec<f64> {
        let dt = self.grid.dt();
        let ens = &self.samples.per_type[alpha];
        (0..self.m).map(|j| phi.eval(ens.x_path(j), dt)).collect()
    }
}

/// Draw M independent K-tuples against the reference flow and fill the
/// kernel matrix ĥ(ω_i, ω_j) = Σ_{α,γ} h_{αγ}((ω_i)_α, (ω_j)_γ).
pub fn build_sample_operator(
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
    weights: &[f64],
    m: usize,
    seed: u64,
) -> Result<SampleOperator, OperatorError> {
    if m < 2 {
        return Err(OperatorError::TooFewSamples);
    }
    let k = spec.k();
    if weights.len() != k {
        return Err(OperatorError::BadWeights);
    }
    let grid = reference.ensemble.grid;
    let root = CounterRng::from_seed(seed);
    let mut per_type = Vec::with_capacity(k);
    for alpha in 0..k {
        let draw_seed = root
            .substream(StreamTag::OperatorDraw, alpha as u64)
            .next_u64();
        let ens = simulate_type_against_flow(spec, alpha, m, grid, draw_seed, &reference.flow)?;
        per_type.push(ens);
    }
    let samples = OperatorSamples { m, per_type };

    let table = FlowKernelMeans::new(spec, &reference.flow);
    let d = spec.dim;
    let steps = grid.steps;
    let mut blocks = Vec::with_capacity(k * k);
    for alpha in 0..k {
        // Increment matrix of type-α samples: U[i, k·d+c] = ΔW_k(ω_i^α)[c].
        let ua = DMatrix::from_fn(m, steps * d, |i, col| {
            let (kk, c) = (col / d, col % d);
            let wp = samples.per_type[alpha].w_path(i);
            wp.point(kk + 1)[c] - wp.point(kk)[c]
        });
        for gamma in 0..k {
            let scale = (weights[alpha] / weights[gamma]).sqrt();
            let b = spec.kernel(alpha, gamma);
            let block = if table.is_annihilated(alpha, gamma) {
                DMatrix::zeros(m, m)
            } else if !b.depends_on_first(d) {
                // Centered kernel values of type-γ samples:
                // B[j, k·d+c] = b_{αγ,t_k}(·, X_k(ω_j^γ))[c].
                let dummy = vec![0.0; d];
                let mut bmat = DMatrix::zeros(m, steps * d);
                let mut buf = vec![0.0; d];
                for j in 0..m {
                    let xp = samples.per_type[gamma].x_path(j);
                    for kk in 0..steps {
                        let means = table.mean_at(alpha, gamma, kk);
                        b.eval_into(&dummy, xp.point(kk), &mut buf);
                        for c in 0..d {
                            bmat[(j, kk * d + c)] = buf[c] - means[c];
                        }
                    }
                }
                let mut prod = &ua * bmat.transpose();
                prod *= scale;
                prod
            } else {
                // Generic fill, parallel over rows.
                let rows: Vec<Vec<f64>> = (0..m)
                    .into_par_iter()
                    .map(|i| {
                        let wa = samples.per_type[alpha].w_path(i);
                        let xa = samples.per_type[alpha].x_path(i);
                        let mut row = vec![0.0; m];
                        let mut bc = vec![0.0; d];
                        for (j, r) in row.iter_mut().enumerate() {
                            let xg = samples.per_type[gamma].x_path(j);
                            let mut acc = 0.0;
                            for kk in 0..steps {
                                table.eval_centered(
                                    spec,
                                    &reference.flow,
                                    alpha,
                                    gamma,
                                    kk,
                                    xa.point(kk),
                                    xg.point(kk),
                                    &mut bc,
                                );
                                let w0 = wa.point(kk);
                                let w1 = wa.point(kk + 1);
                                for c in 0..d {
                                    acc += bc[c] * (w1[c] - w0[c]);
                                }
                            }
                            *r = scale * acc;
                        }
                        row
                    })
                    .collect();
                DMatrix::from_fn(m, m, |i, j| rows[i][j])
            };
            blocks.push(block);
        }
    }
    let mut h = DMatrix::zeros(m, m);
    for b in &blocks {
        h += b;
    }
    Ok(SampleOperator {
        m,
        k,
        weights: weights.to_vec(),
        grid,
        samples,
        h,
        blocks,
        seed,
        factor_seed: None,
    })
}

// ---------------------------------------------------------------------------
// Trace diagnostics
// ---------------------------------------------------------------------------

/// Mean over off-diagonal pairs (1/(M(M−1))) Σ_{i≠j} a_ij·b_ij with a
/// delete-one jackknife standard error. Diagonal entries are excluded: the
/// continuum traces are double integrals over independent samples, and the
/// i = j terms would contribute an O(1/M) bias.
pub fn cross_trace_offdiag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, f64) {
    let m = a.nrows();
    let mf = m as f64;
    let mut s = 0.0;
    let mut contrib = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let p = a[(i, j)] * b[(i, j)];
            s += p;
            contrib[i] += p;
            contrib[j] += p;
        }
    }
    let est = s / (mf * (mf - 1.0));
    let dd = (mf - 1.0) * (mf - 2.0);
    let ests: Vec<f64> = (0..m).map(|k| (s - contrib[k]) / dd).collect();
    let mean = ests.iter().sum::<f64>() / mf;
    let var = ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() * (mf - 1.0) / mf;
    (est, var.sqrt())
}

/// Monte Carlo traces of the sample operator with delete-one jackknife
/// standard errors, plus an independent estimate of Trace(AA*) from the
/// closed-form double integral.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceDiagnostics {
    pub trace_a: f64,
    /// Off-diagonal estimator of Trace(A²) and its jackknife SE.
    pub trace_a2: f64,
    pub trace_a2_se: f64,
    /// Raw matrix trace of A_M² (diagonal included), for reference.
    pub matrix_trace_a2: f64,
    pub trace_aa_star: f64,
    pub trace_aa_star_se: f64,
    pub analytic_trace_aa_star: f64,
    pub analytic_trace_aa_star_se: f64,
}

/// Traces from the kernel matrix; the analytic Trace(AA*) is re-estimated by
/// fresh independent Monte Carlo over the flow.
pub fn trace_diagnostics(
    op: &SampleOperator,
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
    fresh_pairs: usize,
    seed: u64,
) -> Result<TraceDiagnostics, OperatorError> {
    let m = op.m;
    let mf = m as f64;
    let h = &op.h;
    let trace_a = (0..m).map(|i| h[(i, i)]).sum::<f64>() / mf;
    let ht = h.transpose();
    let (trace_a2, trace_a2_se) = cross_trace_offdiag(h, &ht);
    let (trace_aa_star, trace_aa_star_se) = cross_trace_offdiag(h, h);
    let mut matrix_trace_a2 = 0.0;
    for i in 0..m {
        for j in 0..m {
            matrix_trace_a2 += h[(i, j)] * h[(j, i)];
        }
    }
    matrix_trace_a2 /= mf * mf;

    let (analytic, analytic_se) =
        analytic_trace_aa_star(spec, reference, &op.weights, fresh_pairs, seed)?;
    Ok(TraceDiagnostics {
        trace_a,
        trace_a2,
        trace_a2_se,
        matrix_trace_a2,
        trace_aa_star,
        trace_aa_star_se,
        analytic_trace_aa_star: analytic,
        analytic_trace_aa_star_se: analytic_se,
    })
}

/// Independent Monte Carlo of
/// Σ_{α,γ} (λ_α/λ_γ) ∫_0^T E ‖b_{αγ,t}(X_t(ω), X_t(ω′))‖² dt
/// with ω ~ ν_α and ω′ ~ ν_γ drawn fresh against the flow.
pub fn analytic_trace_aa_star(
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
    weights: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64), OperatorError> {
    let k = spec.k();
    let d = spec.dim;
    let grid = reference.ensemble.grid;
    let dt = grid.dt();
    let root = CounterRng::from_seed(seed);
    let mut draws_a = Vec::with_capacity(k);
    let mut draws_b = Vec::with_capacity(k);
    for alpha in 0..k {
        let s1 = root
            .substream(StreamTag::OperatorDraw, 1000 + alpha as u64)
            .next_u64();
        let s2 = root
            .substream(StreamTag::OperatorDraw, 2000 + alpha as u64)
            .next_u64();
        draws_a.push(simulate_type_against_flow(
            spec,
            alpha,
            pairs,
            grid,
            s1,
            &reference.flow,
        )?);
        draws_b.push(simulate_type_against_flow(
            spec,
            alpha,
            pairs,
            grid,
            s2,
            &reference.flow,
        )?);
    }
    let table = FlowKernelMeans::new(spec, &reference.flow);
    let mut per_pair = vec![0.0; pairs];
    let mut bc = vec![0.0; d];
    for (p, acc_p) in per_pair.iter_mut().enumerate() {
        let mut acc = 0.0;
        for alpha in 0..k {
            for gamma in 0..k {
                if table.is_annihilated(alpha, gamma) {
                    continue;
                }
                let scale = weights[alpha] / weights[gamma];
                let xa = draws_a[alpha].x_path(p);
                let xg = draws_b[gamma].x_path(p);
                for kk in 0..grid.steps {
                    table.eval_centered(
                        spec,
                        &reference.flow,
                        alpha,
                        gamma,
                        kk,
                        xa.point(kk),
                        xg.point(kk),
                        &mut bc,
                    );
                    let n2: f64 = bc.iter().map(|v| v * v).sum();
                    acc += scale * n2 * dt;
                }
            }
        }
        *acc_p = acc;
    }
    let mean = crate::statistics::mean(&per_pair);
    let se = crate::statistics::standard_error(&per_pair);
    Ok((mean, se))
}

// ---------------------------------------------------------------------------
// Fredholm solves
// ---------------------------------------------------------------------------

/// Dense LU factorization of (I − A_M) with a reusable solve.
pub struct FredholmSolver {
    b: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub condition_estimate: f64,
    m: usize,
}

#[derive(Debug, Clone)]
pub struct FredholmSolution {
    pub u: Vec<f64>,
    /// Relative residual ‖(I − A_M)u − g‖ / ‖g‖.
    pub residual: f64,
}

impl SampleOperator {
    /// Factor (I − A_M); the condition estimate is a probe-based lower
    /// bound on κ₁.
    pub fn fredholm_solver(&self) -> Result<FredholmSolver, OperatorError> {
        let m = self.m;
        let mf = m as f64;
        // u_j − (1/M) Σ_i H[i][j] u_i = g_j  ⇔  (I − Hᵀ/M) u = g.
        let mut b = DMatrix::zeros(m, m);
        for j in 0..m {
            for i in 0..m {
                b[(j, i)] = -self.h[(i, j)] / mf;
            }
            b[(j, j)] += 1.0;
        }
        let lu = b.clone().lu();
        // Norm-1 of B and probe-based estimate of ‖B⁻¹‖₁.
        let norm_b = (0..m)
            .map(|j| (0..m).map(|i| b[(i, j)].abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let mut rng = CounterRng::from_seed(self.seed ^ 0xc01d);
        let mut inv_norm: f64 = 0.0;
        let mut probe = vec![1.0 / mf; m];
        for trial in 0..4 {
            let v = nalgebra::DVector::from_vec(probe.clone());
            match lu.solve(&v) {
                Some(y) => {
                    let n1: f64 = y.iter().map(|x| x.abs()).sum();
                    let pv: f64 = probe.iter().map(|x| x.abs()).sum();
                    if pv > 0.0 {
                        inv_norm = inv_norm.max(n1 / pv);
                    }
                    if trial == 0 {
                        // Follow the largest response coordinate.
                        let mut best = 0;
                        for (i, x) in y.iter().enumerate() {
                            if x.abs() > y[best].abs() {
                                best = i;
                            }
                        }
                        probe = vec![0.0; m];
                        probe[best] = 1.0;
                    } else {
                        for p in probe.iter_mut() {
                            *p = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                        }
                    }
                }
                None => {
                    return Err(OperatorError::Singular {
                        condition: f64::INFINITY,
                    })
                }
            }
        }
        let condition_estimate = norm_b * inv_norm;
        Ok(FredholmSolver {
            b,
            lu,
            condition_estimate,
            m,
        })
    }
}

impl FredholmSolver {
    pub fn solve(&self, g: &[f64]) -> Result<FredholmSolution, OperatorError> {
        assert_eq!(g.len(), self.m);
        let rhs = nalgebra::DVector::from_column_slice(g);
        let u = self.lu.solve(&rhs).ok_or(OperatorError::Singular {
            condition: self.condition_estimate,
        })?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(OperatorError::Singular {
                condition: self.condition_estimate,
            });
        }
        let res = (&self.b * &u) - &rhs;
        let gn = rhs.norm();
        let residual = if gn > 0.0 { res.norm() / gn } else { res.norm() };
        Ok(FredholmSolution {
            u: u.as_slice().to_vec(),
            residual,
        })
    }
}

/// One-shot dense solve of (I − A_M) u = g.
pub fn fredholm_solve(op: &SampleOperator, g: &[f64]) -> Result<FredholmSolution, OperatorError> {
    op.fredholm_solver()?.solve(g)
}

/// Truncated Neumann series u = Σ_{p≤terms} A_M^p g, a cross-check for the
/// dense solve (the sample traces of powers vanish on the acceptance specs).
pub fn neumann_solve(op: &SampleOperator, g: &[f64], terms: usize) -> Vec<f64> {
    let mut u = g.to_vec();
    let mut v = g.to_vec();
    for _ in 0..terms {
        v = op.apply(&v);
        for (ui, vi) in u.iter_mut().zip(&v) {
            *ui += *vi;
        }
    }
    u
}

// ---------------------------------------------------------------------------
// Limit covariance
// ---------------------------------------------------------------------------

/// Limit covariance matrix of fluctuation statistics with solver
/// diagnostics. The inner products are mean-adjusted: the constant function
/// is a fixed point of (I − A)⁻¹ and exactly orthogonal to centered lifts in
/// the continuum, so subtracting sample means removes the O(M_ref^{-1/2})
/// centering bias without touching the limit value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub labels: Vec<String>,
    /// Row-major n_phi × n_phi.
    pub matrix: Vec<f64>,
    /// Standard errors of the quadrature products (solver noise excluded).
    pub matrix_se: Vec<f64>,
    pub residuals: Vec<f64>,
    pub condition: f64,
    pub m: usize,
    pub seed: u64,
}

impl CovarianceReport {
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.labels.len() + b]
    }

    pub fn entry_se(&self, a: usize, b: usize) -> f64 {
        self.matrix_se[a * self.labels.len() + b]
    }
}

/// E[ξ_α(φ) ξ_γ(ψ)] = ⟨(I−A)⁻¹ φ̂_α, (I−A)⁻¹ ψ̂_γ⟩ via Fredholm solves of
/// the lifted sample vectors. Functionals must be centered for their types.
pub fn limit_covariance(
    op: &SampleOperator,
    phis: &[(PathFunctional, usize)],
) -> Result<CovarianceReport, OperatorError> {
    let solver = op.fredholm_solver()?;
    let mf = op.m as f64;
    let mut us = Vec::with_capacity(phis.len());
    let mut residuals = Vec::with_capacity(phis.len());
    let mut labels = Vec::with_capacity(phis.len());
    for (phi, alpha) in phis {
        let g = op.lifted_values(phi, *alpha);
        let sol = solver.solve(&g)?;
        residuals.push(sol.residual);
        us.push(sol.u);
        labels.push(format!("{}[type {}]", phi.name, alpha));
    }
    let n = phis.len();
    let mut matrix = vec![0.0; n * n];
    let mut matrix_se = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let ua = &us[a];
            let ub = &us[b];
            let mean_a: f64 = ua.iter().sum::<f64>() / mf;
            let mean_b: f64 = ub.iter().sum::<f64>() / mf;
            let prods: Vec<f64> = ua.iter().zip(ub).map(|(x, y)| x * y).collect();
            let cov = prods.iter().sum::<f64>() / mf - mean_a * mean_b;
            matrix[a * n + b] = cov;
            matrix_se[a * n + b] = crate::statistics::standard_error(&prods);
        }
    }
    Ok(CovarianceReport {
        labels,
        matrix,
        matrix_se,
        residuals,
        condition: solver.condition_estimate,
        m: op.m,
        seed: op.seed,
    })
}

// ---------------------------------------------------------------------------
// Girsanov exponent diagnostics
// ---------------------------------------------------------------------------

/// The discretized change-of-measure exponents for one draw of N independent
/// limit-law particles: J¹ (Itô sum), J² (time quadrature), J = J¹ − J²/2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GirsanovExponents {
    pub j1: f64,
    pub j2: f64,
    pub j: f64,
}

/// Compute the exponents on an ensemble of independent particles, with the
/// kernels centered against the reference flow. The inner empirical average
/// runs over the ensemble itself (all j, including i).
pub fn girsanov_exponent(
    paths: &PathEnsemble,
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
) -> Result<GirsanovExponents, OperatorError> {
    let table = FlowKernelMeans::new(spec, &reference.flow);
    girsanov_exponent_cached(paths, spec, reference, &table)
}

/// [`girsanov_exponent`] with a precomputed flow-means table for use across
/// many replications.
pub fn girsanov_exponent_cached(
    paths: &PathEnsemble,
    spec: &LinearModelSpec,
    reference: &ReferenceEnsemble,
    table: &FlowKernelMeans,
) -> Result<GirsanovExponents, OperatorError> {
    if paths.grid != reference.ensemble.grid {
        return Err(OperatorError::GridMismatch);
    }
    let d = spec.dim;
    let k = paths.layout.k();
    let grid = paths.grid;
    let dt = grid.dt();
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    let mut bracket = vec![0.0; d];
    let mut bc = vec![0.0; d];
    // Fast path pieces: per (α,γ) x-independent kernels give a bracket that
    // only depends on (γ-ensemble mean − flow mean) at each step.
    for kk in 0..grid.steps {
        // ensemble means of x-independent kernels per (α,γ)
        let mut common = vec![0.0; k * k * d];
        for alpha in 0..k {
            for gamma in 0..k {
                let b = spec.kernel(alpha, gamma);
                if table.is_annihilated(alpha, gamma) || b.depends_on_first(d) {
                    continue;
                }
                let r = paths.layout.range(gamma);
                let inv = 1.0 / r.len() as f64;
                let dummy = vec![0.0; d];
                let acc = &mut common[(alpha * k + gamma) * d..(alpha * k + gamma + 1) * d];
                for j in r {
                    b.eval_into(&dummy, paths.x_path(j).point(kk), &mut bc);
                    for (a, &v) in acc.iter_mut().zip(&bc) {
                        *a += inv * v;
                    }
                }
                let means = table.mean_at(alpha, gamma, kk);
                for c in 0..d {
                    acc[c] -= means[c];
                }
            }
        }
        for alpha in 0..k {
            for i in paths.layout.range(alpha) {
                bracket.fill(0.0);
                let xi = paths.x_path(i);
                for gamma in 0..k {
                    let b = spec.kernel(alpha, gamma);
                    if table.is_annihilated(alpha, gamma) {
                        continue;
                    }
                    if !b.depends_on_first(d) {
                        let idx = alpha * k + gamma;
                        for c in 0..d {
                            bracket[c] += common[idx * d + c];
                        }
                    } else {
                        let r = paths.layout.range(gamma);
                        let inv = 1.0 / r.len() as f64;
                        for j in r {
                            table.eval_centered(
                                spec,
                                &reference.flow,
                                alpha,
                                gamma,
                                kk,
                                xi.point(kk),
                                paths.x_path(j).point(kk),
                                &mut bc,
                            );
                            for c in 0..d {
                                bracket[c] += inv * bc[c];
                            }
                        }
                    }
                }
                let wi = paths.w_path(i);
                let w0 = wi.point(kk);
                let w1 = wi.point(kk + 1);
                let mut n2 = 0.0;
                for c in 0..d {
                    j1 += bracket[c] * (w1[c] - w0[c]);
                    n2 += bracket[c] * bracket[c];
                }
                j2 += n2 * dt;
            }
        }
    }
    Ok(GirsanovExponents {
        j1,
        j2,
        j: j1 - 0.5 * j2,
    })
}

// ---------------------------------------------------------------------------
// Common-factor (conditional) operators
// ---------------------------------------------------------------------------

/// f_{αγ,t} = b^c_{αγ,(2)}(x, R_t, X_t(ω′)) + b_{α,(1)}(x, R_t) s_{γ,t}(ω′)
/// evaluated at grid index `t_index`; `s_at_t` is the m-vector s_{γ,t} of
/// the sample ω′ and `x_probe` its state X_t(ω′).
#[allow(clippy::too_many_arguments)]
pub fn kernel_f_common(
    spec: &CommonFactorModelSpec,
    cond: &ReferenceEnsemble,
    alpha: usize,
    gamma: usize,
    t_index: usize,
    x: &[f64],
    x_probe: &[f64],
    s_at_t: &[f64],
) -> Vec<f64> {
    let d = spec.dim;
    let m = spec.factor_dim;
    let pd = &spec.particle_drifts[alpha];
    let mut out = vec![0.0; d];
    pd.measure_kernel_into(gamma, x_probe, &mut out);
    // Center against the conditional flow.
    let sv = cond.flow.states(gamma, t_index);
    let inv = 1.0 / sv.count() as f64;
    let mut buf = vec![0.0; d];
    for j in 0..sv.count() {
        pd.measure_kernel_into(gamma, sv.state(j), &mut buf);
        for (o, &v) in out.iter_mut().zip(&buf) {
            *o -= inv * v;
        }
    }
    // + b_{α,(1)}(x, R_t) · s_{γ,t}
    let factor = cond.ensemble.factor.as_ref().expect("conditional reference");
    let mut jac = vec![0.0; d * m];
    pd.jacobian_y_into(x, factor.y_at(t_index), &mut jac);
    for (c, o) in out.iter_mut().enumerate() {
        for jm in 0..m {
            *o += jac[c * m + jm] * s_at_t[jm];
        }
    }
    out
}

/// Conditional sample operator A_ω̄ for one factor draw: M conditionally
/// i.i.d. K-tuples from ρ̂(ω̄,·) with kernel
/// h^{αγ}_ω̄(ω,ω′) = √(λ_α/λ_γ) Σ_k f_{αγ,t_k}(X_k(ω), ω′, D) · ΔW_k(ω).
pub fn build_random_operator(
    spec: &CommonFactorModelSpec,
    cond: &ReferenceEnsemble,
    weights: &[f64],
    m_samples: usize,
    seed: u64,
) -> Result<SampleOperator, OperatorError> {
    if m_samples < 2 {
        return Err(OperatorError::TooFewSamples);
    }
    let k = spec.k();
    if weights.len() != k {
        return Err(OperatorError::BadWeights);
    }
    let d = spec.dim;
    let m_dim = spec.factor_dim;
    let grid = cond.ensemble.grid;
    let steps = grid.steps;
    let factor = cond
        .ensemble
        .factor
        .as_ref()
        .ok_or(OperatorError::GridMismatch)?;
    let root = CounterRng::from_seed(seed);
    let mut per_type = Vec::with_capacity(k);
    for alpha in 0..k {
        let draw_seed = root
            .substream(StreamTag::OperatorDraw, alpha as u64)
            .next_u64();
        per_type.push(simulate_conditional_type_against_flow(
            spec, alpha, m_samples, grid, draw_seed, cond,
        )?);
    }
    let samples = OperatorSamples {
        m: m_samples,
        per_type,
    };

    // s_{γ,·} paths for every type-γ sample.
    let fund = fundamental_solution(spec, cond)?;
    let mut s_paths: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for gamma in 0..k {
        let ctx = s_gamma_context(spec, &fund, cond, gamma)?;
        let paths: Vec<Vec<f64>> = (0..m_samples)
            .into_par_iter()
            .map(|j| s_gamma_path_with(&ctx, samples.per_type[gamma].x_path(j)))
            .collect();
        s_paths.push(paths);
    }

    // Flow means of the (2)-kernels per (α, γ, step) for centering.
    let mut b2_means = vec![vec![0.0; steps * d]; k * k];
    let mut buf = vec![0.0; d];
    for alpha in 0..k {
        let pd = &spec.particle_drifts[alpha];
        for gamma in 0..k {
            if !pd.depends_on_measure(gamma) {
                continue;
            }
            let mm = &mut b2_means[alpha * k + gamma];
            for kk in 0..steps {
                let sv = cond.flow.states(gamma, kk);
                let inv = 1.0 / sv.count() as f64;
                for j in 0..sv.count() {
                    pd.measure_kernel_into(gamma, sv.state(j), &mut buf);
                    for c in 0..d {
                        mm[kk * d + c] += inv * buf[c];
                    }
                }
            }
        }
    }

    // Per-(α, step) drift Jacobians (x-independent for the preset family).
    let dummy_x = vec![0.0; d];
    let mut jacs = vec![vec![0.0; steps * d * m_dim]; k];
    for (alpha, jac) in jacs.iter_mut().enumerate() {
        let pd = &spec.particle_drifts[alpha];
        for kk in 0..steps {
            pd.jacobian_y_into(
                &dummy_x,
                factor.y_at(kk),
                &mut jac[kk * d * m_dim..(kk + 1) * d * m_dim],
            );
        }
    }

    let mut blocks = Vec::with_capacity(k * k);
    for alpha in 0..k {
        let ua = DMatrix::from_fn(m_samples, steps * d, |i, col| {
            let (kk, c) = (col / d, col % d);
            let wp = samples.per_type[alpha].w_path(i);
            wp.point(kk + 1)[c] - wp.point(kk)[c]
        });
        let pd = &spec.particle_drifts[alpha];
        for gamma in 0..k {
            let scale = (weights[alpha] / weights[gamma]).sqrt();
            let has_b2 = pd.depends_on_measure(gamma);
            let has_s = pd.has_factor_dependence();
            if !has_b2 && !has_s {
                blocks.push(DMatrix::zeros(m_samples, m_samples));
                continue;
            }
            // B[j, k·d+c] = f_{αγ,t_k}(·, ω_j, D)[c]; x-independent because
            // the preset (2)-kernels and Jacobians ignore x.
            let mut bmat = DMatrix::zeros(m_samples, steps * d);
            let mut kv = vec![0.0; d];
            for j in 0..m_samples {
                let xp = samples.per_type[gamma].x_path(j);
                for kk in 0..steps {
                    let mut f = [0.0f64; 8];
                    let fslice = &mut f[..d];
                    if has_b2 {
                        pd.measure_kernel_into(gamma, xp.point(kk), &mut kv);
                        let mm = &b2_means[alpha * k + gamma];
                        for c in 0..d {
                            fslice[c] = kv[c] - mm[kk * d + c];
                        }
                    }
                    if has_s {
                        let s = &s_paths[gamma][j][kk * m_dim..(kk + 1) * m_dim];
                        let jac = &jacs[alpha][kk * d * m_dim..(kk + 1) * d * m_dim];
                        for c in 0..d {
                            let mut acc = 0.0;
                            for jm in 0..m_dim {
                                acc += jac[c * m_dim + jm] * s[jm];
                            }
                            fslice[c] += acc;
                        }
                    }
                    for c in 0..d {
                        bmat[(j, kk * d + c)] = fslice[c];
                    }
                }
            }
            let mut prod = &ua * bmat.transpose();
            prod *= scale;
            blocks.push(prod);
        }
    }
    let mut h = DMatrix::zeros(m_samples, m_samples);
    for b in &blocks {
        h += b;
    }
    Ok(SampleOperator {
        m: m_samples,
        k,
        weights: weights.to_vec(),
        grid,
        samples,
        h,
        blocks,
        seed,
        factor_seed: Some(factor.seed),
    })
}

/// Conditional covariance Σ^{αγ}_ω̄ = ⟨(I−A_ω̄)⁻¹ Φ̂^α, (I−A_ω̄)⁻¹ Φ̂^γ⟩ with
/// the lifts centered by the conditional means m^α_φ from the same
/// conditional reference.
pub fn sigma_conditional(
    op: &SampleOperator,
    cond: &ReferenceEnsemble,
    phis: &[(PathFunctional, usize)],
) -> Result<CovarianceReport, OperatorError> {
    let mut centered = Vec::with_capacity(phis.len());
    for (phi, alpha) in phis {
        let m = m_phi_alpha(phi, cond, *alpha)?;
        let mut c = phi.clone();
        c.offset += m;
        c.centered = true;
        centered.push((c, *alpha));
    }
    limit_covariance(op, &centered)
}

// ---------------------------------------------------------------------------
// Gaussian mixture over factor draws
// ---------------------------------------------------------------------------

/// Sampler for the mixture π(φ_1,…,φ_K): uniform over B factor draws, then a
/// centered Gaussian with the draw's conditional covariance Σ_ω̄.
#[derive(Debug)]
pub struct MixtureSampler {
    pub k: usize,
    /// Symmetrized, eigenvalue-clipped covariance per factor draw.
    pub sigmas: Vec<DMatrix<f64>>,
    /// Factor seeds of the draws.
    pub factor_seeds: Vec<u64>,
    factors: Vec<DMatrix<f64>>,
    pub seed: u64,
}

/// Eigenvalue clip tolerance for conditional covariances.
pub const PSD_TOLERANCE: f64 = 1e-8;

impl MixtureSampler {
    /// Build from precomputed conditional covariance matrices.
    pub fn from_sigmas(
        sigmas_raw: Vec<DMatrix<f64>>,
        factor_seeds: Vec<u64>,
        seed: u64,
    ) -> Result<Self, OperatorError> {
        let k = sigmas_raw[0].nrows();
        let mut sigmas = Vec::with_capacity(sigmas_raw.len());
        let mut factors = Vec::with_capacity(sigmas_raw.len());
        for s in sigmas_raw {
            let sym = (s.clone() + s.transpose()) * 0.5;
            let eig = sym.clone().symmetric_eigen();
            let mut min_eig = f64::INFINITY;
            for &l in eig.eigenvalues.iter() {
                min_eig = min_eig.min(l);
            }
            if min_eig < -PSD_TOLERANCE {
                return Err(OperatorError::NotPsd { min_eig });
            }
            // factor = V·diag(√λ₊); sample = factor·z.
            let mut f = eig.eigenvectors.clone();
            for (c, &l) in eig.eigenvalues.iter().enumerate() {
                let s = l.max(0.0).sqrt();
                for r in 0..k {
                    f[(r, c)] *= s;
                }
            }
            let mut clipped = DMatrix::zeros(k, k);
            for (c, &l) in eig.eigenvalues.iter().enumerate() {
                let lc = l.max(0.0);
                for r in 0..k {
                    for r2 in 0..k {
                        clipped[(r, r2)] +=
                            lc * eig.eigenvectors[(r, c)] * eig.eigenvectors[(r2, c)];
                    }
                }
            }
            sigmas.push(clipped);
            factors.push(f);
        }
        Ok(MixtureSampler {
            k,
            sigmas,
            factor_seeds,
            factors,
            seed,
        })
    }

    pub fn n_components(&self) -> usize {
        self.sigmas.len()
    }

    /// One draw from the mixture.
    pub fn sample(&self, rng: &mut CounterRng) -> Vec<f64> {
        let b = rng.index(self.sigmas.len());
        let z: Vec<f64> = (0..self.k).map(|_| rng.standard_normal()).collect();
        let f = &self.factors[b];
        (0..self.k)
            .map(|r| (0..self.k).map(|c| f[(r, c)] * z[c]).sum())
            .collect()
    }

    /// Marginal CDF of coordinate `alpha`: the average of the component
    /// Gaussian CDFs.
    pub fn marginal_cdf(&self, alpha: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        for s in &self.sigmas {
            let sd = s[(alpha, alpha)].max(0.0).sqrt();
            acc += if sd > 0.0 {
                crate::statistics::normal_cdf(x / sd)
            } else if x >= 0.0 {
                1.0
            } else {
                0.0
            };
        }
        acc / self.sigmas.len() as f64
    }

    /// E_ω̄ Σ_ω̄ over the sampled factor draws.
    pub fn mean_sigma(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.k, self.k);
        for s in &self.sigmas {
            acc += s;
        }
        acc / self.sigmas.len() as f64
    }
}

/// Parameters for [`mixture_sampler`].
#[derive(Debug, Clone, Copy)]
pub struct MixtureConfig {
    pub factor_draws: usize,
    pub operator_m: usize,
    pub m_ref_per_type: usize,
    pub picard_iters: usize,
}

/// Draw B factor paths, build the conditional operator and Σ_ω̄ for each,
/// and assemble the equal-weight Gaussian mixture sampler.
pub fn mixture_sampler(
    spec: &CommonFactorModelSpec,
    phis: &[(PathFunctional, usize)],
    weights: &[f64],
    grid: TimeGrid,
    cfg: MixtureConfig,
    seed: u64,
) -> Result<MixtureSampler, OperatorError> {
    let root = CounterRng::from_seed(seed);
    let draws: Vec<(u64, u64, u64)> = (0..cfg.factor_draws)
        .map(|b| {
            let fs = root.substream(StreamTag::Mixture, b as u64).next_u64();
            let ps = root
                .substream(StreamTag::Mixture, 10_000 + b as u64)
                .next_u64();
            let os = root
                .substream(StreamTag::Mixture, 20_000 + b as u64)
                .next_u64();
            (fs, ps, os)
        })
        .collect();
    let results: Vec<Result<(DMatrix<f64>, u64), OperatorError>> = draws
        .par_iter()
        .map(|&(factor_seed, particle_seed, op_seed)| {
            let cond = simulate_conditional_reference(
                spec,
                factor_seed,
                cfg.m_ref_per_type,
                grid,
                particle_seed,
                cfg.picard_iters,
            )?;
            let op = build_random_operator(spec, &cond, weights, cfg.operator_m, op_seed)?;
            let report = sigma_conditional(&op, &cond, phis)?;
            let n = report.labels.len();
            let sigma = DMatrix::from_fn(n, n, |a, b| report.entry(a, b));
            Ok((sigma, factor_seed))
        })
        .collect();
    let mut sigmas = Vec::with_capacity(cfg.factor_draws);
    let mut seeds = Vec::with_capacity(cfg.factor_draws);
    for r in results {
        let (s, fs) = r?;
        sigmas.push(s);
        seeds.push(fs);
    }
    MixtureSampler::from_sigmas(sigmas, seeds, seed)
}

use crate::simulate::simulate_conditional_reference;

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const OP_MAGIC: &[u8; 4] = b"MFOP";

fn write_matrix(w: &mut impl std::io::Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)
}

fn read_matrix(r: &mut impl std::io::Read) -> Result<DMatrix<f64>, SimError> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

/// Persist a sample operator: header, the per-type sample ensembles, and
/// the dense kernel matrix with its blocks.
pub fn write_sample_operator(
    op: &SampleOperator,
    w: &mut impl std::io::Write,
) -> std::io::Result<()> {
    w.write_all(OP_MAGIC)?;
    w.write_all(&(op.m as u64).to_le_bytes())?;
    w.write_all(&(op.k as u64).to_le_bytes())?;
    w.write_all(&op.seed.to_le_bytes())?;
    w.write_all(&op.factor_seed.map_or(u64::MAX, |s| s).to_le_bytes())?;
    for &lw in &op.weights {
        w.write_all(&lw.to_le_bytes())?;
    }
    for ens in &op.samples.per_type {
        crate::simulate::write_ensemble_binary(ens, w)?;
    }
    write_matrix(w, &op.h)?;
    for b in &op.blocks {
        write_matrix(w, b)?;
    }
    Ok(())
}

pub fn read_sample_operator(r: &mut impl std::io::Read) -> Result<SampleOperator, OperatorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(SimError::Io)?;
    if &magic != OP_MAGIC {
        return Err(OperatorError::Sim(SimError::Corrupt("bad magic".into())));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(SimError::Io)?;
    let m = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8).map_err(SimError::Io)?;
    let k = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8).map_err(SimError::Io)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(SimError::Io)?;
    let fs = u64::from_le_bytes(b8);
    let factor_seed = if fs == u64::MAX { None } else { Some(fs) };
    let mut weights = vec![0.0; k];
    for lw in weights.iter_mut() {
        r.read_exact(&mut b8).map_err(SimError::Io)?;
        *lw = f64::from_le_bytes(b8);
    }
    let mut per_type = Vec::with_capacity(k);
    for _ in 0..k {
        per_type.push(crate::simulate::read_ensemble_binary(r)?);
    }
    let grid = per_type[0].grid;
    let h = read_matrix(r)?;
    let mut blocks = Vec::with_capacity(k * k);
    for _ in 0..k * k {
        blocks.push(read_matrix(r)?);
    }
    Ok(SampleOperator {
        m,
        k,
        weights,
        grid,
        samples: OperatorSamples { m, per_type },
        h,
        blocks,
        seed,
        factor_seed,
    })
}
