//! Experiment configuration: a TOML key tree mirroring the experiment
//! parameters, `key=value` overrides, and a content hash recorded in every
//! artifact.

use fluctlab_core::expr::parse_coefficient_expr;
use fluctlab_core::model::{
    CommonFactorModelSpec, FactorCoeff, FactorTerm, InitialLaw, LinearModelSpec, MeasureTerm,
    ParticleDrift, PopulationLayout, Scalar1, TimeGrid,
};
use fluctlab_core::statistics::{PathExpr, PathFunctional};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override path `{0}` not found")]
    OverridePath(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_one() -> f64 {
    1.0
}
fn default_half() -> f64 {
    0.5
}

/// Linear model selection: a named preset or inline structures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// "zero" | "constant" | "example31" | "single-sine" | "custom"
    pub kind: String,
    /// Kernel value for kind = "constant".
    #[serde(default)]
    pub constant: f64,
    #[serde(default = "default_one")]
    pub beta_amp: f64,
    #[serde(default = "default_one")]
    pub beta_freq: f64,
    #[serde(default = "default_half")]
    pub lambda: f64,
    #[serde(default)]
    pub types: usize,
    #[serde(default)]
    pub dim: usize,
    /// Inline spec for kind = "custom".
    #[serde(default)]
    pub custom: Option<LinearModelSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: "example31".into(),
            constant: 0.0,
            beta_amp: 1.0,
            beta_freq: 1.0,
            lambda: 0.5,
            types: 2,
            dim: 1,
            custom: None,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<LinearModelSpec, ConfigError> {
        let beta = Scalar1::Sin {
            amp: self.beta_amp,
            freq: self.beta_freq,
        };
        match self.kind.as_str() {
            "zero" => Ok(LinearModelSpec::zero(self.types.max(1), self.dim.max(1))),
            "constant" => {
                let k = self.types.max(1);
                let d = self.dim.max(1);
                let mut spec = LinearModelSpec::zero(k, d);
                spec.kernels = vec![
                    fluctlab_core::model::PairKernel::Const(vec![self.constant; d]);
                    k * k
                ];
                spec.bound = self.constant.abs();
                Ok(spec)
            }
            "example31" => Ok(LinearModelSpec::example31(beta, self.lambda)),
            "single-sine" => Ok(LinearModelSpec::single_type_of_second(
                beta,
                self.dim.max(1),
            )),
            "custom" => self
                .custom
                .clone()
                .ok_or_else(|| ConfigError::Invalid("custom model requires [model.custom]".into())),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }
}

/// Common-factor model selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorModelConfig {
    /// "factor-toy" | "factor-coupled" | "factor-decoupled" | "custom"
    pub kind: String,
    /// Factor-to-particle drift strength a in a·tanh(y).
    #[serde(default = "default_half")]
    pub drive: f64,
    /// Measure-coupling strength c in c·⟨sin, ν⟩.
    #[serde(default)]
    pub coupling: f64,
    /// Factor mean-reversion strength.
    #[serde(default = "default_half")]
    pub reversion: f64,
    /// Constant factor diffusion.
    #[serde(default = "default_one")]
    pub sigma: f64,
    #[serde(default)]
    pub custom: Option<CommonFactorModelSpec>,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        FactorModelConfig {
            kind: "factor-coupled".into(),
            drive: 0.5,
            coupling: 0.6,
            reversion: 0.5,
            sigma: 0.8,
            custom: None,
        }
    }
}

impl FactorModelConfig {
    pub fn build(&self) -> Result<CommonFactorModelSpec, ConfigError> {
        let tanh = Scalar1::Tanh {
            amp: 1.0,
            scale: 1.0,
        };
        let base = |with_coupling: bool, with_drive: bool| CommonFactorModelSpec {
            dim: 1,
            factor_dim: 1,
            particle_drifts: vec![ParticleDrift {
                own: None,
                factor: if with_drive {
                    Some(FactorTerm::diagonal(1, self.drive, tanh.clone()))
                } else {
                    None
                },
                measure: if with_coupling && self.coupling != 0.0 {
                    vec![MeasureTerm {
                        gamma: 0,
                        coord: 0,
                        probe: Scalar1::sin(),
                        direction: vec![self.coupling],
                    }]
                } else {
                    vec![]
                },
            }],
            factor_drift: FactorCoeff {
                constant: vec![0.0],
                factor: Some(FactorTerm::diagonal(1, -self.reversion, tanh.clone())),
                measure: vec![],
            },
            factor_diffusion: vec![FactorCoeff::constant(vec![self.sigma])],
            initial: vec![InitialLaw::origin(1)],
            factor_initial: InitialLaw::origin(1),
            bound: 2.0,
        };
        match self.kind.as_str() {
            "factor-toy" => Ok(base(false, true)),
            "factor-coupled" => Ok(base(true, true)),
            "factor-decoupled" => {
                let mut spec = base(false, false);
                spec.factor_drift = FactorCoeff::zero(1);
                spec.factor_diffusion = vec![FactorCoeff::constant(vec![self.sigma])];
                Ok(spec)
            }
            "custom" => self.custom.clone().ok_or_else(|| {
                ConfigError::Invalid("custom factor model requires [factor_model.custom]".into())
            }),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    #[serde(default)]
    pub counts: Vec<usize>,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub weights: Vec<f64>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            counts: vec![1000, 1000],
            n: 0,
            weights: Vec::new(),
        }
    }
}

impl LayoutConfig {
    pub fn build(&self) -> Result<PopulationLayout, ConfigError> {
        let layout = if !self.counts.is_empty() {
            PopulationLayout::from_counts(self.counts.clone())
        } else {
            PopulationLayout::from_weights(self.n, &self.weights)
        };
        layout.map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            horizon: 1.0,
            steps: 100,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid, ConfigError> {
        TimeGrid::new(self.horizon, self.steps).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Run sizes: the desk-scale defaults keep every acceptance experiment
/// tractable on a workstation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub replications: usize,
    /// Reference (mean-field) ensemble size per type.
    pub m_ref: usize,
    pub picard_iters: usize,
    pub operator_m: usize,
    /// Fresh Monte Carlo pairs for the analytic trace cross-check.
    pub trace_pairs: usize,
    pub factor_draws: usize,
    pub mixture_operator_m: usize,
    pub mixture_m_ref: usize,
    pub girsanov_ns: Vec<usize>,
    pub girsanov_replications: usize,
    /// Pair-correlation sweep sizes; empty disables the sweep.
    pub chaos_ns: Vec<usize>,
    pub chaos_replications: usize,
    pub mwi_draws: usize,
    pub mwi_basis_m: usize,
    pub ks_batches: usize,
    pub dynkin_n: usize,
    pub dynkin_basis_m: usize,
    pub tuple_cap: u128,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            replications: 2000,
            m_ref: 5000,
            picard_iters: 0,
            operator_m: 2000,
            trace_pairs: 2000,
            factor_draws: 64,
            mixture_operator_m: 300,
            mixture_m_ref: 5000,
            girsanov_ns: vec![250, 500, 1000],
            girsanov_replications: 1500,
            chaos_ns: Vec::new(),
            chaos_replications: 4000,
            mwi_draws: 200_000,
            mwi_basis_m: 600,
            ks_batches: 10,
            dynkin_n: 4000,
            dynkin_basis_m: 1500,
            tuple_cap: 100_000_000,
        }
    }
}

/// A declared statistic: a preset or terminal-value expression with its
/// centering mode and type.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalDecl {
    pub name: String,
    /// "terminal" | "terminal-sq" | "sin-terminal" | "example31"
    #[serde(default)]
    pub preset: Option<String>,
    /// Terminal-value expression in x1..xd (alternative to `preset`).
    #[serde(default)]
    pub expr: Option<String>,
    #[serde(default = "default_one")]
    pub kappa: f64,
    /// "none" | "per-type" (multi-coordinate statistics center per factor).
    #[serde(default)]
    pub centering: Option<String>,
    #[serde(default)]
    pub type_index: usize,
}

impl FunctionalDecl {
    pub fn build(&self, model: &ModelConfig) -> Result<PathFunctional, ConfigError> {
        if let Some(expr) = &self.expr {
            let dim = model.dim.max(1);
            let vars: Vec<String> = (0..dim).map(|c| format!("x{}", c + 1)).collect();
            // Terminal-value expressions evaluate on x_T; represent via a
            // single-variable map when dim = 1, else reject for now.
            if dim != 1 {
                return Err(ConfigError::Invalid(
                    "expression functionals support dim = 1".into(),
                ));
            }
            let compiled = parse_coefficient_expr(expr, &vars)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(PathFunctional::raw(
                self.name.clone(),
                PathExpr::TerminalMap {
                    g: Scalar1::Expr(compiled),
                    coord: 0,
                    scale: self.kappa,
                },
            ));
        }
        let preset = self.preset.as_deref().unwrap_or("terminal");
        let beta = Scalar1::Sin {
            amp: model.beta_amp,
            freq: model.beta_freq,
        };
        let f = match preset {
            "terminal" => PathFunctional::raw(
                self.name.clone(),
                PathExpr::Terminal {
                    coord: 0,
                    scale: self.kappa,
                },
            ),
            "terminal-sq" => PathFunctional::raw(
                self.name.clone(),
                PathExpr::TerminalSquare {
                    coord: 0,
                    scale: self.kappa,
                },
            ),
            "sin-terminal" => PathFunctional::raw(
                self.name.clone(),
                PathExpr::TerminalMap {
                    g: Scalar1::sin(),
                    coord: 0,
                    scale: self.kappa,
                },
            ),
            "example31" => PathFunctional::terminal_minus_integral(self.kappa, beta),
            other => return Err(ConfigError::UnknownPreset(other.into())),
        };
        Ok(f)
    }
}

/// Named tolerances; every pass/fail in a report traces to one of these.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub se_multiplier: f64,
    pub example31_rel: f64,
    pub null_var_rel: f64,
    pub ks_min_pass: usize,
    pub trace_se_multiplier: f64,
    pub girsanov_mass_rel: f64,
    pub isometry_k12_rel: f64,
    pub isometry_k3_rel: f64,
    pub exp_j_rel: f64,
    pub dynkin_rel: f64,
    pub chaos_slope: f64,
    pub chaos_slope_tol: f64,
    pub mixture_var_rel: f64,
    pub neumann_gap: f64,
    pub fredholm_residual: f64,
    pub tilted_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            se_multiplier: 3.0,
            example31_rel: 0.10,
            null_var_rel: 0.05,
            ks_min_pass: 8,
            trace_se_multiplier: 3.0,
            girsanov_mass_rel: 0.10,
            isometry_k12_rel: 0.05,
            isometry_k3_rel: 0.10,
            exp_j_rel: 0.10,
            dynkin_rel: 0.10,
            chaos_slope: -1.0,
            chaos_slope_tol: 0.4,
            mixture_var_rel: 0.10,
            neumann_gap: 1e-6,
            fredholm_residual: 1e-10,
            tilted_rel: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
    /// Dump raw replication samples as CSV.
    pub samples: bool,
}

/// The full experiment configuration tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub factor_model: FactorModelConfig,
    pub layout: LayoutConfig,
    pub grid: GridConfig,
    pub run: RunConfig,
    pub statistics: Vec<FunctionalDecl>,
    pub tolerances: Tolerances,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "example31".into(),
            seed: 42,
            model: ModelConfig::default(),
            factor_model: FactorModelConfig::default(),
            layout: LayoutConfig::default(),
            grid: GridConfig::default(),
            run: RunConfig::default(),
            statistics: Vec::new(),
            tolerances: Tolerances::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Apply `key=value` overrides by dot path into the TOML tree before
    /// deserialization.
    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| ConfigError::OverridePath(ov.clone()))?;
            let parsed: toml::Value = parse_override_value(raw);
            set_path(&mut value, path.trim(), parsed)
                .ok_or_else(|| ConfigError::OverridePath(path.to_string()))?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON serialization of the resolved config.
    /// The output section is excluded: it does not affect any computed
    /// number, and reports must hash identically wherever they are written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputConfig {
            dir: None,
            samples: canonical.output.samples,
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') {
        if let Ok(v) = toml::from_str::<toml::Value>(&format!("x = {raw}")) {
            if let Some(arr) = v.get("x") {
                return arr.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Option<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            match cur {
                toml::Value::Table(t) => {
                    t.insert(part.to_string(), value);
                    return Some(());
                }
                _ => return None,
            }
        }
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default())),
            _ => return None,
        };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_builds() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.model.build().is_ok());
        assert!(cfg.factor_model.build().is_ok());
        assert!(cfg.layout.build().is_ok());
        assert!(cfg.grid.build().is_ok());
    }

    #[test]
    fn toml_roundtrip_and_hash_stability() {
        let text = r#"
experiment = "clt-verify"
seed = 7
[model]
kind = "single-sine"
types = 1
dim = 1
[layout]
counts = [200]
[grid]
horizon = 1.0
steps = 50
"#;
        let a = ExperimentConfig::from_toml_str(text).unwrap();
        let b = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.seed, 7);
    }

    #[test]
    fn overrides_apply() {
        let text = "experiment = \"example31\"\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            text,
            &[
                "seed=99".to_string(),
                "run.replications=10".to_string(),
                "grid.steps=25".to_string(),
                "layout.counts=[5, 5]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.run.replications, 10);
        assert_eq!(cfg.grid.steps, 25);
        assert_eq!(cfg.layout.counts, vec![5, 5]);
    }

    #[test]
    fn bad_override_errors() {
        let err =
            ExperimentConfig::from_toml_with_overrides("", &["nonsense".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::OverridePath(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str("unknown_field = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn functional_presets_build() {
        let model = ModelConfig::default();
        for preset in ["terminal", "terminal-sq", "sin-terminal", "example31"] {
            let decl = FunctionalDecl {
                name: preset.into(),
                preset: Some(preset.into()),
                expr: None,
                kappa: 1.0,
                centering: Some("per-type".into()),
                type_index: 0,
            };
            assert!(decl.build(&model).is_ok());
        }
        let decl = FunctionalDecl {
            name: "expr".into(),
            preset: None,
            expr: Some("tanh(x1) + 0.5".into()),
            kappa: 1.0,
            centering: None,
            type_index: 0,
        };
        assert!(decl.build(&model).is_ok());
    }
}
