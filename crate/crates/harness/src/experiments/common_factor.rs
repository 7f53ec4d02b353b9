//! Common-factor mixture verification: replications of the interacting
//! system with matched conditional references produce 𝒱^N_α samples, which
//! are compared against the Gaussian-mixture sampler (marginal KS and the
//! total-variance decomposition), with a factor-decoupled control.

use crate::config::ExperimentConfig;
use crate::experiments::{ks_batch_passes, kurtosis, rep_seed};
use crate::report::{SampleDump, VerificationReport};
use crate::HarnessError;
use fluctlab_core::model::CommonFactorModelSpec;
use fluctlab_core::operators::{mixture_sampler, MixtureConfig, MixtureSampler};
use fluctlab_core::rng::{CounterRng, StreamTag};
use fluctlab_core::simulate::{
    simulate_common_factor_interacting, simulate_conditional_reference, SeedPair,
};
use fluctlab_core::statistics::{normal_cdf, v_alpha, variance, variance_se, PathFunctional};
use rayon::prelude::*;

/// Layout for the factor spec: reuse the configured one when the type
/// counts agree, otherwise split the configured total evenly.
fn factor_layout(
    spec: &CommonFactorModelSpec,
    cfg: &ExperimentConfig,
) -> Result<fluctlab_core::model::PopulationLayout, HarnessError> {
    let configured = cfg.layout.build()?;
    if configured.k() == spec.k() {
        return Ok(configured);
    }
    let per = (configured.n_total() / spec.k()).max(1);
    Ok(fluctlab_core::model::PopulationLayout::from_counts(vec![
        per;
        spec.k()
    ])
    .map_err(fluctlab_core::simulate::SimError::Model)?)
}

fn v_samples(
    spec: &CommonFactorModelSpec,
    cfg: &ExperimentConfig,
    phi: &PathFunctional,
    stage: u64,
) -> Result<Vec<f64>, HarnessError> {
    let layout = factor_layout(spec, cfg)?;
    let grid = cfg.grid.build()?;
    let reps = cfg.run.replications;
    let vals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let factor_seed = rep_seed(cfg.seed, stage, r as u64);
            let particle_seed = rep_seed(cfg.seed, stage + 1, r as u64);
            let ref_seed = rep_seed(cfg.seed, stage + 2, r as u64);
            let ens = simulate_common_factor_interacting(
                spec,
                &layout,
                grid,
                SeedPair {
                    particles: particle_seed,
                    factor: factor_seed,
                },
            )
            .expect("interacting run");
            // The matched conditional reference shares the factor seed
            // (the V⁰ coupling) but uses fresh particle noise.
            let cond = simulate_conditional_reference(
                spec,
                factor_seed,
                cfg.run.m_ref,
                grid,
                ref_seed,
                cfg.run.picard_iters,
            )
            .expect("conditional reference");
            v_alpha(&ens, phi, 0, &cond).expect("v_alpha")
        })
        .collect();
    Ok(vals)
}

pub fn run_common_factor_experiment(
    cfg: &ExperimentConfig,
) -> Result<VerificationReport, HarnessError> {
    let mut report = VerificationReport::new("common-factor", cfg.hash(), cfg.seed);
    let spec = cfg.factor_model.build()?;
    let grid = cfg.grid.build()?;
    let tol = &cfg.tolerances;
    let phi = match cfg.statistics.first() {
        Some(d) => d.build(&cfg.model)?,
        None => PathFunctional::terminal(),
    };
    let weights = vec![1.0];

    // Mixture target from factor draws.
    let mix: MixtureSampler = mixture_sampler(
        &spec,
        &[(phi.clone(), 0)],
        &weights,
        grid,
        MixtureConfig {
            factor_draws: cfg.run.factor_draws,
            operator_m: cfg.run.mixture_operator_m,
            m_ref_per_type: cfg.run.mixture_m_ref,
            picard_iters: cfg.run.picard_iters,
        },
        rep_seed(cfg.seed, 40, 0),
    )?;
    let mean_sigma = mix.mean_sigma()[(0, 0)];
    report.push_estimate("mixture/mean-sigma", mean_sigma, 0.0);
    let sigma_spread = {
        let vals: Vec<f64> = mix.sigmas.iter().map(|s| s[(0, 0)]).collect();
        variance(&vals).sqrt()
    };
    report.push_estimate("mixture/sigma-spread", sigma_spread, 0.0);

    // V^N samples with matched conditional references.
    let vals = v_samples(&spec, cfg, &phi, 41)?;
    let v_var = variance(&vals);
    let v_var_se = variance_se(&vals);
    report.push_estimate("v/variance", v_var, v_var_se);
    report.push_estimate("v/kurtosis", kurtosis(&vals), 0.0);

    // Mixture kurtosis from draws, for the heavy-tail gap report.
    let mut rng = CounterRng::from_seed(rep_seed(cfg.seed, 44, 0)).substream(StreamTag::Mixture, 1);
    let mix_draws: Vec<f64> = (0..50_000).map(|_| mix.sample(&mut rng)[0]).collect();
    report.push_estimate("mixture/kurtosis", kurtosis(&mix_draws), 0.0);

    // Marginal KS against the mixture CDF in seed batches.
    let (passes, ds) = ks_batch_passes(&vals, cfg.run.ks_batches, |x| mix.marginal_cdf(0, x));
    report.push_criterion(
        "mixture-ks",
        passes >= tol.ks_min_pass,
        passes as f64,
        tol.ks_min_pass as f64,
        format!("ks_min_pass={} of {}", tol.ks_min_pass, cfg.run.ks_batches),
        format!("KS stats {ds:?}"),
    );

    // Total-variance decomposition: Var(V^N) ≈ E_ω̄[Σ_ω̄].
    let gap = (v_var - mean_sigma).abs();
    report.push_criterion(
        "variance-decomposition",
        gap <= tol.mixture_var_rel * mean_sigma + tol.se_multiplier * v_var_se,
        v_var,
        mean_sigma,
        format!(
            "mixture_var_rel={} se_multiplier={}",
            tol.mixture_var_rel, tol.se_multiplier
        ),
        format!("gap {gap:.5}"),
    );

    // Factor-decoupled control: V^N reduces to the null ξ^N behaviour.
    let mut decoupled_cfg = cfg.factor_model.clone();
    decoupled_cfg.kind = "factor-decoupled".into();
    let dec_spec = decoupled_cfg.build()?;
    let dec_vals = v_samples(&dec_spec, cfg, &phi, 50)?;
    let dec_var = variance(&dec_vals);
    let dec_var_se = variance_se(&dec_vals);
    // Particles are X_0 + W; centering against the conditional mean leaves
    // variance Var(X_0) + T (up to the finite-reference inflation N/M_ref).
    let layout = factor_layout(&dec_spec, cfg)?;
    let inflation = 1.0 + layout.count(0) as f64 / cfg.run.m_ref as f64;
    let target = (dec_spec.initial[0].var_coord(0) + grid.horizon) * inflation;
    report.push_estimate("control/variance", dec_var, dec_var_se);
    let dgap = (dec_var - target).abs();
    report.push_criterion(
        "decoupled-control-variance",
        dgap <= tol.null_var_rel * target + tol.se_multiplier * dec_var_se,
        dec_var,
        target,
        format!(
            "null_var_rel={} se_multiplier={}",
            tol.null_var_rel, tol.se_multiplier
        ),
        format!("gap {dgap:.5}"),
    );
    let sd = target.sqrt();
    let (dpasses, dks) =
        ks_batch_passes(&dec_vals, cfg.run.ks_batches, |x| normal_cdf(x / sd));
    report.push_criterion(
        "decoupled-control-ks",
        dpasses >= tol.ks_min_pass,
        dpasses as f64,
        tol.ks_min_pass as f64,
        format!("ks_min_pass={} of {}", tol.ks_min_pass, cfg.run.ks_batches),
        format!("KS stats {dks:?}"),
    );

    if cfg.output.samples {
        report.push_sample(SampleDump {
            name: "v_samples".into(),
            columns: vec!["v".into()],
            rows: vals.iter().map(|v| vec![*v]).collect(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_control_matches_null_behaviour_small() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "common-factor".into();
        cfg.factor_model.kind = "factor-decoupled".into();
        cfg.layout.counts = vec![50];
        cfg.grid.steps = 20;
        cfg.run.replications = 400;
        cfg.run.m_ref = 1500;
        cfg.run.factor_draws = 4;
        cfg.run.mixture_operator_m = 40;
        cfg.run.mixture_m_ref = 400;
        cfg.run.ks_batches = 4;
        cfg.tolerances.ks_min_pass = 3;
        cfg.seed = 77;
        let report = run_common_factor_experiment(&cfg).unwrap();
        let ctl = report
            .criteria
            .iter()
            .find(|c| c.name == "decoupled-control-variance")
            .unwrap();
        assert!(ctl.passed, "{ctl:?}");
    }
}
