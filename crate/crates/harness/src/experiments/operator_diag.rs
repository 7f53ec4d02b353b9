//! Operator diagnostics: the trace identities, Fredholm solve residuals,
//! Neumann-vs-LU agreement and sample-doubling stability, with the
//! conditional (random operator) variant when a factor model is coupled.

use crate::config::ExperimentConfig;
use crate::experiments::rep_seed;
use crate::report::VerificationReport;
use crate::HarnessError;
use fluctlab_core::operators::{
    build_random_operator, build_sample_operator, cross_trace_offdiag, fredholm_solve,
    limit_covariance, neumann_solve, trace_diagnostics,
};
use fluctlab_core::simulate::{simulate_conditional_reference, simulate_reference};
use fluctlab_core::statistics::{center_functional, PathFunctional};

pub fn run_operator_diagnostics(
    cfg: &ExperimentConfig,
) -> Result<VerificationReport, HarnessError> {
    let mut report = VerificationReport::new("operator-diag", cfg.hash(), cfg.seed);
    let spec = cfg.model.build()?;
    let layout = cfg.layout.build()?;
    let grid = cfg.grid.build()?;
    let tol = &cfg.tolerances;
    let reference = simulate_reference(
        &spec,
        cfg.run.m_ref,
        grid,
        rep_seed(cfg.seed, 70, 0),
        cfg.run.picard_iters,
    )?;
    let op = build_sample_operator(
        &spec,
        &reference,
        layout.weights(),
        cfg.run.operator_m,
        rep_seed(cfg.seed, 71, 0),
    )?;

    // Trace suite.
    let diag = trace_diagnostics(
        &op,
        &spec,
        &reference,
        cfg.run.trace_pairs,
        rep_seed(cfg.seed, 72, 0),
    )?;
    report.push_estimate("trace/A", diag.trace_a, 0.0);
    report.push_estimate("trace/A2", diag.trace_a2, diag.trace_a2_se);
    report.push_estimate("trace/A2-matrix", diag.matrix_trace_a2, 0.0);
    report.push_estimate("trace/AAstar", diag.trace_aa_star, diag.trace_aa_star_se);
    report.push_estimate(
        "trace/AAstar-analytic",
        diag.analytic_trace_aa_star,
        diag.analytic_trace_aa_star_se,
    );
    report.push_criterion(
        "trace-a2-null",
        diag.trace_a2.abs() <= tol.trace_se_multiplier * diag.trace_a2_se,
        diag.trace_a2,
        0.0,
        format!("trace_se_multiplier={}", tol.trace_se_multiplier),
        format!("jackknife se {}", diag.trace_a2_se),
    );
    let comb = (diag.trace_aa_star_se.powi(2) + diag.analytic_trace_aa_star_se.powi(2)).sqrt();
    report.push_criterion(
        "trace-aastar-consistency",
        (diag.trace_aa_star - diag.analytic_trace_aa_star).abs()
            <= tol.trace_se_multiplier * comb,
        diag.trace_aa_star,
        diag.analytic_trace_aa_star,
        format!("trace_se_multiplier={} (combined se)", tol.trace_se_multiplier),
        format!("combined se {comb}"),
    );

    // Fredholm residual and Neumann cross-check on a lifted functional.
    let phi = center_functional(&PathFunctional::terminal(), &reference, 0);
    let g = op.lifted_values(&phi, 0);
    let sol = fredholm_solve(&op, &g)?;
    report.push_estimate("fredholm/residual", sol.residual, 0.0);
    report.push_criterion(
        "fredholm-residual",
        sol.residual <= tol.fredholm_residual,
        sol.residual,
        tol.fredholm_residual,
        format!("fredholm_residual={}", tol.fredholm_residual),
        "relative ‖(I−A)u − g‖/‖g‖",
    );
    let ne = neumann_solve(&op, &g, 10);
    let num: f64 = sol
        .u
        .iter()
        .zip(&ne)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = sol.u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let gap = if den > 0.0 { num / den } else { 0.0 };
    report.push_estimate("neumann/lu-gap", gap, 0.0);
    report.push_criterion(
        "neumann-vs-lu",
        gap <= tol.neumann_gap,
        gap,
        tol.neumann_gap,
        format!("neumann_gap={}", tol.neumann_gap),
        "10-term Neumann series vs dense solve",
    );

    // Sample-doubling stability of the limit variance (diagnostic).
    let op_half = build_sample_operator(
        &spec,
        &reference,
        layout.weights(),
        (cfg.run.operator_m / 2).max(4),
        rep_seed(cfg.seed, 73, 0),
    )?;
    let cov_full = limit_covariance(&op, &[(phi.clone(), 0)])?;
    let cov_half = limit_covariance(&op_half, &[(phi.clone(), 0)])?;
    report.push_estimate("mdoubling/var-full", cov_full.entry(0, 0), cov_full.entry_se(0, 0));
    report.push_estimate("mdoubling/var-half", cov_half.entry(0, 0), cov_half.entry_se(0, 0));
    report.push_estimate("fredholm/condition", cov_full.condition, 0.0);

    // Conditional variant when the factor model couples through measures.
    let factor_spec = cfg.factor_model.build()?;
    let coupled = factor_spec
        .particle_drifts
        .iter()
        .any(|p| !p.measure.is_empty() || p.factor.is_some());
    if cfg.run.factor_draws > 0 && coupled {
        let cond = simulate_conditional_reference(
            &factor_spec,
            rep_seed(cfg.seed, 74, 0),
            cfg.run.mixture_m_ref,
            grid,
            rep_seed(cfg.seed, 75, 0),
            cfg.run.picard_iters,
        )?;
        let rop = build_random_operator(
            &factor_spec,
            &cond,
            &[1.0],
            cfg.run.mixture_operator_m,
            rep_seed(cfg.seed, 76, 0),
        )?;
        let ht = rop.h.transpose();
        let (ctr, ctr_se) = cross_trace_offdiag(&rop.h, &ht);
        report.push_estimate("conditional/trace-A2", ctr, ctr_se);
        report.push_criterion(
            "conditional-trace-a2-null",
            ctr.abs() <= tol.trace_se_multiplier * ctr_se.max(1e-12),
            ctr,
            0.0,
            format!("trace_se_multiplier={}", tol.trace_se_multiplier),
            format!("jackknife se {ctr_se}"),
        );
        let gc = rop.lifted_values(&phi, 0);
        let rsol = fredholm_solve(&rop, &gc)?;
        report.push_criterion(
            "conditional-fredholm-residual",
            rsol.residual <= tol.fredholm_residual,
            rsol.residual,
            tol.fredholm_residual,
            format!("fredholm_residual={}", tol.fredholm_residual),
            "conditional operator solve",
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernel_all_traces_zero_and_condition_one() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "operator-diag".into();
        cfg.model.kind = "zero".into();
        cfg.model.types = 1;
        cfg.layout.counts = vec![50];
        cfg.grid.steps = 20;
        cfg.run.m_ref = 200;
        cfg.run.operator_m = 60;
        cfg.run.trace_pairs = 100;
        cfg.run.factor_draws = 0;
        let report = run_operator_diagnostics(&cfg).unwrap();
        assert!(report.all_passed(), "{:#?}", report.criteria);
        let tr = report
            .estimates
            .iter()
            .find(|e| e.label == "trace/A")
            .unwrap();
        assert_eq!(tr.value, 0.0);
        let cond = report
            .estimates
            .iter()
            .find(|e| e.label == "fredholm/condition")
            .unwrap();
        assert!((cond.value - 1.0).abs() < 1e-12, "{}", cond.value);
    }

    #[test]
    fn example_spec_diagnostics_pass_small_scale() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "operator-diag".into();
        cfg.layout.counts = vec![100, 100];
        cfg.grid.steps = 30;
        cfg.run.m_ref = 1000;
        cfg.run.operator_m = 250;
        cfg.run.trace_pairs = 600;
        cfg.run.mixture_operator_m = 120;
        cfg.run.mixture_m_ref = 400;
        cfg.seed = 11;
        let report = run_operator_diagnostics(&cfg).unwrap();
        assert!(report.all_passed(), "{:#?}", report.criteria);
    }
}
