//! Chaos machinery checks: the isometries E I_k² = k!‖·‖^{2k}, the
//! martingale mass E exp(J) = 1, rank-one consistency of the two I_2
//! routes, convergence of the discrete change-of-measure exponent J^N to
//! the J sampler, and the tilted I_K law against the multi-type statistic.

use crate::config::ExperimentConfig;
use crate::experiments::{median_of_means, rep_seed, two_sample_ks};
use crate::report::VerificationReport;
use crate::HarnessError;
use fluctlab_core::model::PopulationLayout;
use fluctlab_core::mwi::{
    ik_truncated, j_basis, j_moments, j_value, tilted_ik_draws, weighted_mean, ChaosBasis,
    DEFAULT_MASS_TARGET,
};
use fluctlab_core::operators::{build_sample_operator, girsanov_exponent_cached};
use fluctlab_core::rng::{CounterRng, StreamTag};
use fluctlab_core::simulate::{
    simulate_against_flow_cached, simulate_reference, FlowKernelMeans,
};
use fluctlab_core::statistics::{
    center_functional, mean, standard_error, variance, variance_se, xi_multitype,
    MultiPathFunctional, PathExpr, PathFunctional,
};
use nalgebra::DMatrix;
use rayon::prelude::*;

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn run_mwi_check(cfg: &ExperimentConfig) -> Result<VerificationReport, HarnessError> {
    let mut report = VerificationReport::new("mwi-check", cfg.hash(), cfg.seed);
    let tol = &cfg.tolerances;
    let draws = cfg.run.mwi_draws;

    // Isometry suite on a synthetic sample space.
    {
        let m = 400;
        let mut prng =
            CounterRng::from_seed(rep_seed(cfg.seed, 80, 0)).substream(StreamTag::Chaos, 0);
        let hv: Vec<f64> = (0..m).map(|_| (prng.standard_normal() * 0.9).sin()).collect();
        let mut basis = ChaosBasis::trivial(m);
        let h = basis.register(&hv)?;
        let mut drng =
            CounterRng::from_seed(rep_seed(cfg.seed, 81, 0)).substream(StreamTag::Chaos, 1);
        let mut sums = [0.0f64; 3];
        for _ in 0..draws {
            let z = basis.draw(&mut drng);
            for (kk, s) in sums.iter_mut().enumerate() {
                let v = basis.ik_product_value(&h, kk + 1, &z);
                *s += v * v;
            }
        }
        for (kk, s) in sums.iter().enumerate() {
            let k = kk + 1;
            let est = s / draws as f64;
            let target = factorial(k) * h.norm2().powi(k as i32);
            let rel = if k == 3 {
                tol.isometry_k3_rel
            } else {
                tol.isometry_k12_rel
            };
            let gap = (est / target - 1.0).abs();
            report.push_estimate(format!("isometry/EI{k}sq"), est, 0.0);
            report.push_criterion(
                format!("isometry-k{k}"),
                gap <= rel,
                est,
                target,
                format!("isometry_k{}_rel={rel}", if k == 3 { 3 } else { 12 }),
                format!("relative gap {gap:.4}"),
            );
        }
    }

    // Rank-one consistency: the spectral I_2 of h⊗h against the product
    // form on independent draw streams (two-sample KS at 1%).
    {
        let m = 300;
        let mut prng =
            CounterRng::from_seed(rep_seed(cfg.seed, 82, 0)).substream(StreamTag::Chaos, 2);
        let hv: Vec<f64> = (0..m).map(|_| prng.standard_normal().tanh()).collect();
        let s = DMatrix::from_fn(m, m, |i, j| hv[i] * hv[j]);
        let spectral = ChaosBasis::from_symmetric_matrix(&s, DEFAULT_MASS_TARGET);
        let mut prod_basis = ChaosBasis::trivial(m);
        let h = prod_basis.register(&hv)?;
        let n = 20_000;
        let mut r1 =
            CounterRng::from_seed(rep_seed(cfg.seed, 83, 0)).substream(StreamTag::Chaos, 3);
        let mut r2 =
            CounterRng::from_seed(rep_seed(cfg.seed, 84, 0)).substream(StreamTag::Chaos, 4);
        let a: Vec<f64> = (0..n)
            .map(|_| {
                let z = spectral.draw(&mut r1);
                spectral.i2_value(&z)
            })
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|_| {
                let z = prod_basis.draw(&mut r2);
                prod_basis.ik_product_value(&h, 2, &z)
            })
            .collect();
        let (d, crit) = two_sample_ks(&a, &b);
        report.push_estimate("rank-one/ks", d, 0.0);
        report.push_criterion(
            "rank-one-consistency",
            d < crit,
            d,
            crit,
            "two-sample KS at 1%",
            format!("n = {n} per side"),
        );
    }

    // Operator-based checks need the model reference and sample operator.
    let spec = cfg.model.build()?;
    let layout = cfg.layout.build()?;
    let grid = cfg.grid.build()?;
    let reference = simulate_reference(
        &spec,
        cfg.run.m_ref,
        grid,
        rep_seed(cfg.seed, 85, 0),
        cfg.run.picard_iters,
    )?;
    let op = build_sample_operator(
        &spec,
        &reference,
        layout.weights(),
        cfg.run.mwi_basis_m,
        rep_seed(cfg.seed, 86, 0),
    )?;

    // E exp(J) = 1 via median-of-means over 20 blocks.
    let (mut basis, jp) = j_basis(&op, DEFAULT_MASS_TARGET);
    report.push_estimate("j/truncation-mass", basis.truncation_mass(), 0.0);
    report.push_estimate("j/trace-aastar", jp.trace_aa_star, 0.0);
    {
        let mut drng =
            CounterRng::from_seed(rep_seed(cfg.seed, 87, 0)).substream(StreamTag::Chaos, 5);
        let vals: Vec<f64> = (0..draws)
            .map(|_| {
                let z = basis.draw(&mut drng);
                j_value(&basis, &jp, &z).exp()
            })
            .collect();
        let mass = median_of_means(&vals, 20);
        report.push_estimate("j/exp-mass", mass, standard_error(&vals));
        report.push_criterion(
            "exp-j-mass",
            (mass - 1.0).abs() <= tol.exp_j_rel,
            mass,
            1.0,
            format!("exp_j_rel={} (median of 20 block means)", tol.exp_j_rel),
            format!("{draws} draws"),
        );
    }

    // Tilted I_K law against the multi-type statistic ξ^N(φ) for K = 2.
    if layout.k() == 2 {
        let raw1 = PathFunctional::raw(
            "sin_t1",
            PathExpr::TerminalMap {
                g: fluctlab_core::model::Scalar1::sin(),
                coord: 0,
                scale: 1.0,
            },
        );
        let raw2 = PathFunctional::raw(
            "tanh_t2",
            PathExpr::TerminalMap {
                g: fluctlab_core::model::Scalar1::Tanh {
                    amp: 1.0,
                    scale: 1.0,
                },
                coord: 0,
                scale: 1.0,
            },
        );
        let f1 = center_functional(&raw1, &reference, 0);
        let f2 = center_functional(&raw2, &reference, 1);
        // Lifted factor values at the operator's sample tuples.
        let lift1 = op.lifted_values(&f1, 0);
        let lift2 = op.lifted_values(&f2, 1);
        let ik = ik_truncated(&mut basis, 2, &[(1.0, vec![lift1, lift2])])?;
        let mut drng =
            CounterRng::from_seed(rep_seed(cfg.seed, 88, 0)).substream(StreamTag::Chaos, 6);
        let out = tilted_ik_draws(&basis, &jp, &ik, draws.min(400_000), &mut drng);
        report.push_estimate("tilted/ess-fraction", out.ess_fraction, 0.0);
        if out.ess_fraction < 0.05 {
            report.push_estimate("warning/tilted-low-ess", out.ess_fraction, 0.0);
        }
        let norm = weighted_mean(&out, |_| 1.0);
        report.push_criterion(
            "tilted-normalization",
            (norm - 1.0).abs() <= tol.exp_j_rel,
            norm,
            1.0,
            format!("exp_j_rel={}", tol.exp_j_rel),
            "self-normalized weight mass",
        );
        let t_mean = weighted_mean(&out, |v| v);
        let t_m2 = weighted_mean(&out, |v| v * v);
        let t_var = t_m2 - t_mean * t_mean;

        // Replication route: ξ^N(φ) for the separable product functional.
        let f = MultiPathFunctional::product(vec![f1, f2]);
        let reps = cfg.run.replications;
        let xs: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let ens = fluctlab_core::simulate::simulate_interacting(
                    &spec,
                    &layout,
                    grid,
                    rep_seed(cfg.seed, 89, r as u64),
                )
                .expect("interacting run");
                xi_multitype(&ens, &f).expect("xi multitype")
            })
            .collect();
        let e_mean = mean(&xs);
        let e_mean_se = standard_error(&xs);
        let e_var = variance(&xs);
        let e_var_se = variance_se(&xs);
        report.push_estimate("tilted/mean", t_mean, 0.0);
        report.push_estimate("xiN/mean", e_mean, e_mean_se);
        report.push_estimate("tilted/var", t_var, 0.0);
        report.push_estimate("xiN/var", e_var, e_var_se);
        let sd = t_var.max(0.0).sqrt();
        let mean_gap = (t_mean - e_mean).abs();
        report.push_criterion(
            "tilted-mean-match",
            mean_gap <= (tol.tilted_rel * sd).max(tol.se_multiplier * e_mean_se),
            e_mean,
            t_mean,
            format!(
                "tilted_rel={} of sd, se_multiplier={}",
                tol.tilted_rel, tol.se_multiplier
            ),
            format!("gap {mean_gap:.5}"),
        );
        let var_gap = (t_var - e_var).abs();
        report.push_criterion(
            "tilted-variance-match",
            var_gap <= tol.tilted_rel * t_var + tol.se_multiplier * e_var_se,
            e_var,
            t_var,
            format!(
                "tilted_rel={} se_multiplier={}",
                tol.tilted_rel, tol.se_multiplier
            ),
            format!("gap {var_gap:.5}"),
        );
    }

    // Girsanov exponent diagnostics: mass at the middle size, and the first
    // two moments of J^N approaching the J sampler's as N doubles.
    if !cfg.run.girsanov_ns.is_empty() {
        let gop = build_sample_operator(
            &spec,
            &reference,
            layout.weights(),
            cfg.run.operator_m,
            rep_seed(cfg.seed, 90, 0),
        )?;
        let (jm, jv) = j_moments(&gop);
        report.push_estimate("jlaw/mean", jm, 0.0);
        report.push_estimate("jlaw/var", jv, 0.0);
        let flow_means = FlowKernelMeans::new(&spec, &reference.flow);
        let mut gaps: Vec<(usize, f64, f64)> = Vec::new();
        for (step, &n) in cfg.run.girsanov_ns.iter().enumerate() {
            let counts: Vec<usize> = if layout.k() == 1 {
                vec![n]
            } else {
                PopulationLayout::from_weights(n, layout.weights())
                    .map(|l| l.counts().to_vec())
                    .unwrap_or_else(|_| vec![n])
            };
            let reps = cfg.run.girsanov_replications;
            let js: Vec<f64> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let paths = simulate_against_flow_cached(
                        &spec,
                        &counts,
                        grid,
                        rep_seed(cfg.seed, 91 + step as u64, r as u64),
                        &reference.flow,
                        &flow_means,
                    )
                    .expect("independent particles");
                    girsanov_exponent_cached(&paths, &spec, &reference, &flow_means)
                        .expect("girsanov")
                        .j
                })
                .collect();
            let m_n = mean(&js);
            let m_se = standard_error(&js);
            let v_n = variance(&js);
            let v_se = variance_se(&js);
            report.push_estimate(format!("jN/mean[N={n}]"), m_n, m_se);
            report.push_estimate(format!("jN/var[N={n}]"), v_n, v_se);
            let gap = (m_n - jm).abs() + (v_n - jv).abs();
            let gap_se = (m_se * m_se + v_se * v_se).sqrt();
            gaps.push((n, gap, gap_se));

            // Martingale mass at the middle size.
            if step == cfg.run.girsanov_ns.len() / 2 {
                let exps: Vec<f64> = js.iter().map(|j| j.exp()).collect();
                let mass = median_of_means(&exps, 20);
                report.push_estimate("girsanov/exp-mass", mass, standard_error(&exps));
                report.push_criterion(
                    "girsanov-mass",
                    (mass - 1.0).abs() <= tol.girsanov_mass_rel,
                    mass,
                    1.0,
                    format!(
                        "girsanov_mass_rel={} (median of 20 block means)",
                        tol.girsanov_mass_rel
                    ),
                    format!("N = {n}, {reps} replications"),
                );
            }
        }
        for w in gaps.windows(2) {
            let (n0, g0, s0) = w[0];
            let (n1, g1, s1) = w[1];
            let slack = tol.se_multiplier * (s0 * s0 + s1 * s1).sqrt();
            report.push_criterion(
                format!("jn-gap-monotone[{n0}->{n1}]"),
                g1 <= g0 + slack,
                g1,
                g0,
                format!("se_multiplier={} slack", tol.se_multiplier),
                format!("slack {slack:.5}"),
            );
        }
    }
    Ok(report)
}
