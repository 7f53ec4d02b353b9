//! Scheduling invariance: every experiment is a pure function of its config
//! (seeds included), so running the same config on thread pools of
//! different sizes must produce identical reports.

use fluctlab_harness::config::ExperimentConfig;
use fluctlab_harness::run_experiment;

fn tiny_config(experiment: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment = experiment.into();
    cfg.seed = 4242;
    cfg.layout.counts = vec![30, 30];
    cfg.grid.steps = 20;
    cfg.run.replications = 40;
    cfg.run.m_ref = 300;
    cfg.run.operator_m = 60;
    cfg.run.trace_pairs = 80;
    cfg.run.factor_draws = 3;
    cfg.run.mixture_operator_m = 24;
    cfg.run.mixture_m_ref = 90;
    cfg.run.girsanov_ns = vec![20, 40];
    cfg.run.girsanov_replications = 30;
    cfg.run.chaos_ns = vec![20, 40];
    cfg.run.chaos_replications = 40;
    cfg.run.mwi_draws = 4000;
    cfg.run.mwi_basis_m = 40;
    cfg.run.ks_batches = 2;
    cfg.run.dynkin_n = 200;
    cfg.run.dynkin_basis_m = 150;
    // Only the numbers matter here, not the verdicts.
    cfg.tolerances.ks_min_pass = 0;
    cfg.tolerances.se_multiplier = 1e9;
    cfg.tolerances.example31_rel = 1e9;
    cfg.tolerances.null_var_rel = 1e9;
    cfg.tolerances.dynkin_rel = 1e9;
    cfg.tolerances.mixture_var_rel = 1e9;
    cfg.tolerances.exp_j_rel = 1e9;
    cfg.tolerances.isometry_k12_rel = 1e9;
    cfg.tolerances.isometry_k3_rel = 1e9;
    cfg.tolerances.girsanov_mass_rel = 1e9;
    cfg.tolerances.tilted_rel = 1e9;
    cfg.tolerances.chaos_slope_tol = 1e9;
    cfg.output.samples = true;
    cfg
}

#[test]
fn reports_identical_across_worker_counts() {
    for experiment in [
        "example31",
        "clt-verify",
        "common-factor",
        "dynkin-check",
        "operator-diag",
        "mwi-check",
    ] {
        let cfg = tiny_config(experiment);
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let r1 = pool1.install(|| run_experiment(&cfg)).expect("run 1");
        let r4 = pool4.install(|| run_experiment(&cfg)).expect("run 4");
        assert_eq!(r1.estimates, r4.estimates, "{experiment}: estimates differ");
        assert_eq!(r1.criteria, r4.criteria, "{experiment}: criteria differ");
        assert_eq!(r1.tables, r4.tables, "{experiment}: tables differ");
        assert_eq!(r1.samples, r4.samples, "{experiment}: samples differ");
    }
}
