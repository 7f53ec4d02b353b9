//! Populations, coefficient functions and numerical condition probes.
//!
//! Coefficient functions come from a preset registry (zero, constants,
//! bounded sine/tanh families) or from parsed expressions; there are no
//! foreign-function plug-ins, so configs stay self-contained. Membership of
//! particles in types is by contiguous blocks: the limit theory depends only
//! on the per-type counts, so blocks lose no generality.

use crate::expr::{parse_coefficient_expr, CompiledExpr, ExprError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("type count must be at least 1")]
    NoTypes,
    #[error("per-type count must be at least 1 (type {0})")]
    ZeroCount(usize),
    #[error("weights must sum to 1 within 1e-12 (got {0})")]
    WeightsNotNormalized(f64),
    #[error("weight {0} outside (0,1]")]
    WeightOutOfRange(f64),
    #[error("population too small: {n} particles for {k} types")]
    PopulationTooSmall { n: usize, k: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("factor diffusion must have m columns (m = {m}, got {got})")]
    NonSquareDiffusion { m: usize, got: usize },
    #[error("coefficient `{coefficient}` evaluated non-finite at {point:?}")]
    NonFinite {
        coefficient: String,
        point: Vec<f64>,
    },
    #[error("shape `{0:?}` has no closed-form derivative; derivative companions must use presets")]
    NoDerivative(Scalar1),
    #[error("time grid needs horizon > 0 and steps >= 1")]
    BadGrid,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

// ---------------------------------------------------------------------------
// Population layout
// ---------------------------------------------------------------------------

/// Assignment of `N` particles to `K` types by contiguous blocks, together
/// with the limit weights λ_α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationLayout {
    counts: Vec<usize>,
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

impl PopulationLayout {
    /// Build from explicit per-type counts; weights become N_α/N.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self, ModelError> {
        if counts.is_empty() {
            return Err(ModelError::NoTypes);
        }
        for (a, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(ModelError::ZeroCount(a));
            }
        }
        let n: usize = counts.iter().sum();
        let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self::assemble(counts, weights))
    }

    /// Build from the total count and limit weights; N_α = ⌊λ_α N⌋ with the
    /// remainder assigned to the last type.
    pub fn from_weights(n: usize, weights: &[f64]) -> Result<Self, ModelError> {
        if weights.is_empty() {
            return Err(ModelError::NoTypes);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(ModelError::WeightsNotNormalized(sum));
        }
        for &w in weights {
            // Single-type (λ = 1) is accepted as a boundary case.
            if !(w > 0.0 && w <= 1.0) {
                return Err(ModelError::WeightOutOfRange(w));
            }
        }
        let k = weights.len();
        let mut counts = Vec::with_capacity(k);
        let mut assigned = 0usize;
        for &w in &weights[..k - 1] {
            let c = (w * n as f64).floor() as usize;
            counts.push(c);
            assigned += c;
        }
        if assigned >= n {
            return Err(ModelError::PopulationTooSmall { n, k });
        }
        counts.push(n - assigned);
        for (a, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(ModelError::ZeroCount(a));
            }
        }
        Ok(Self::assemble(counts, weights.to_vec()))
    }

    fn assemble(counts: Vec<usize>, weights: Vec<f64>) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &c in &counts {
            acc += c;
            offsets.push(acc);
        }
        PopulationLayout {
            counts,
            weights,
            offsets,
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn n_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn count(&self, alpha: usize) -> usize {
        self.counts[alpha]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn weight(&self, alpha: usize) -> f64 {
        self.weights[alpha]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Particle index range of type `alpha` (contiguous block).
    pub fn range(&self, alpha: usize) -> std::ops::Range<usize> {
        self.offsets[alpha]..self.offsets[alpha + 1]
    }

    /// The membership map p: particle index -> type.
    pub fn type_of(&self, particle: usize) -> usize {
        debug_assert!(particle < self.n_total());
        match self.offsets.binary_search(&particle) {
            Ok(a) => a.min(self.k() - 1),
            Err(a) => a - 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Uniform grid on [0, T] with n steps; Δt = T/n exactly as stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(ModelError::BadGrid);
        }
        Ok(TimeGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }

    /// Number of grid points, n + 1.
    #[inline]
    pub fn points(&self) -> usize {
        self.steps + 1
    }
}

// ---------------------------------------------------------------------------
// Scalar shape presets
// ---------------------------------------------------------------------------

/// A scalar function of one real variable from the bounded preset families,
/// or a parsed expression in the variable `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scalar1 {
    Zero,
    Const(f64),
    Sin { amp: f64, freq: f64 },
    Cos { amp: f64, freq: f64 },
    Tanh { amp: f64, scale: f64 },
    /// slope·u; unbounded, for probe-range-limited use only.
    Linear { slope: f64 },
    Expr(CompiledExpr),
}

impl Scalar1 {
    pub fn sin() -> Self {
        Scalar1::Sin {
            amp: 1.0,
            freq: 1.0,
        }
    }

    pub fn from_expr(text: &str) -> Result<Self, ExprError> {
        Ok(Scalar1::Expr(parse_coefficient_expr(text, &["u"])?))
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Scalar1::Zero => 0.0,
            Scalar1::Const(c) => *c,
            Scalar1::Sin { amp, freq } => amp * (freq * u).sin(),
            Scalar1::Cos { amp, freq } => amp * (freq * u).cos(),
            Scalar1::Tanh { amp, scale } => amp * (scale * u).tanh(),
            Scalar1::Linear { slope } => slope * u,
            Scalar1::Expr(e) => e.eval(&[u]),
        }
    }

    /// Closed-form derivative; `None` for expression-backed shapes (no
    /// symbolic differentiation).
    #[inline]
    pub fn deriv(&self, u: f64) -> Option<f64> {
        Some(match self {
            Scalar1::Zero => 0.0,
            Scalar1::Const(_) => 0.0,
            Scalar1::Sin { amp, freq } => amp * freq * (freq * u).cos(),
            Scalar1::Cos { amp, freq } => -amp * freq * (freq * u).sin(),
            Scalar1::Tanh { amp, scale } => {
                let t = (scale * u).tanh();
                amp * scale * (1.0 - t * t)
            }
            Scalar1::Linear { slope } => *slope,
            Scalar1::Expr(_) => return None,
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Scalar1::Zero) || matches!(self, Scalar1::Const(c) if *c == 0.0)
    }

    /// Rescale the amplitude of a closed-form preset; `None` for expressions.
    pub fn scale_amp(&self, c: f64) -> Option<Scalar1> {
        Some(match self {
            Scalar1::Zero => Scalar1::Zero,
            Scalar1::Const(v) => Scalar1::Const(c * v),
            Scalar1::Sin { amp, freq } => Scalar1::Sin {
                amp: c * amp,
                freq: *freq,
            },
            Scalar1::Cos { amp, freq } => Scalar1::Cos {
                amp: c * amp,
                freq: *freq,
            },
            Scalar1::Tanh { amp, scale } => Scalar1::Tanh {
                amp: c * amp,
                scale: *scale,
            },
            Scalar1::Linear { slope } => Scalar1::Linear { slope: c * slope },
            Scalar1::Expr(_) => return None,
        })
    }

    /// A sup-norm bound when one is known in closed form.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Scalar1::Zero => Some(0.0),
            Scalar1::Const(c) => Some(c.abs()),
            Scalar1::Sin { amp, .. } | Scalar1::Cos { amp, .. } => Some(amp.abs()),
            Scalar1::Tanh { amp, .. } => Some(amp.abs()),
            Scalar1::Linear { .. } | Scalar1::Expr(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// States of an empirical measure
// ---------------------------------------------------------------------------

/// Borrowed view of particle states (one type, one time): `count` points in
/// R^dim stored contiguously.
#[derive(Clone, Copy)]
pub struct StatesView<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> StatesView<'a> {
    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn state(&self, j: usize) -> &'a [f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// ⟨g(x[coord]), ν⟩ over the sample.
    pub fn mean_probe(&self, probe: &Scalar1, coord: usize) -> f64 {
        let n = self.count();
        if n == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for j in 0..n {
            s += probe.eval(self.data[j * self.dim + coord]);
        }
        s / n as f64
    }
}

// ---------------------------------------------------------------------------
// Linear (no-common-factor) model
// ---------------------------------------------------------------------------

/// Per-type drift f_α(t, x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Drift {
    Zero,
    Const(Vec<f64>),
    /// out[c] = shape(x[c]).
    Coordwise(Scalar1),
    /// -rate·x (dissipative).
    MeanRevert { rate: f64 },
    /// One expression per coordinate; variables t, x1..xd.
    Expr(Vec<CompiledExpr>),
}

impl Drift {
    pub fn expr(texts: &[&str], dim: usize) -> Result<Self, ExprError> {
        let mut vars: Vec<String> = vec!["t".into()];
        for c in 0..dim {
            vars.push(format!("x{}", c + 1));
        }
        let exprs = texts
            .iter()
            .map(|t| parse_coefficient_expr(t, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Drift::Expr(exprs))
    }

    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.fill(0.0),
            Drift::Const(c) => out.copy_from_slice(c),
            Drift::Coordwise(s) => {
                for (o, &xc) in out.iter_mut().zip(x) {
                    *o = s.eval(xc);
                }
            }
            Drift::MeanRevert { rate } => {
                for (o, &xc) in out.iter_mut().zip(x) {
                    *o = -rate * xc;
                }
            }
            Drift::Expr(exprs) => {
                let mut vars = Vec::with_capacity(x.len() + 1);
                vars.push(t);
                vars.extend_from_slice(x);
                for (o, e) in out.iter_mut().zip(exprs) {
                    *o = e.eval(&vars);
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Drift::Zero => true,
            Drift::Const(c) => c.iter().all(|&v| v == 0.0),
            Drift::Coordwise(s) => s.is_zero(),
            Drift::MeanRevert { rate } => *rate == 0.0,
            Drift::Expr(_) => false,
        }
    }
}

/// Pairwise interaction kernel b_{αγ}(x, y) ∈ R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PairKernel {
    Zero,
    Const(Vec<f64>),
    /// out[c] = shape(y[c]); independent of the first argument.
    OfSecond(Scalar1),
    /// out[c] = shape(y[c] - x[c]).
    OfDifference(Scalar1),
    /// One expression per coordinate; variables x1..xd, y1..yd.
    Expr(Vec<CompiledExpr>),
}

impl PairKernel {
    pub fn expr(texts: &[&str], dim: usize) -> Result<Self, ExprError> {
        let mut vars: Vec<String> = Vec::new();
        for c in 0..dim {
            vars.push(format!("x{}", c + 1));
        }
        for c in 0..dim {
            vars.push(format!("y{}", c + 1));
        }
        let exprs = texts
            .iter()
            .map(|t| parse_coefficient_expr(t, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PairKernel::Expr(exprs))
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            PairKernel::Zero => out.fill(0.0),
            PairKernel::Const(c) => out.copy_from_slice(c),
            PairKernel::OfSecond(s) => {
                for (o, &yc) in out.iter_mut().zip(y) {
                    *o = s.eval(yc);
                }
            }
            PairKernel::OfDifference(s) => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = s.eval(y[c] - x[c]);
                }
            }
            PairKernel::Expr(exprs) => {
                let mut vars = Vec::with_capacity(x.len() + y.len());
                vars.extend_from_slice(x);
                vars.extend_from_slice(y);
                for (o, e) in out.iter_mut().zip(exprs) {
                    *o = e.eval(&vars);
                }
            }
        }
    }

    /// Whether the kernel actually reads its first argument; kernels that do
    /// not admit an O(N) empirical-mean fast path.
    pub fn depends_on_first(&self, dim: usize) -> bool {
        match self {
            PairKernel::Zero | PairKernel::Const(_) | PairKernel::OfSecond(_) => false,
            PairKernel::OfDifference(s) => !s.is_zero(),
            PairKernel::Expr(exprs) => exprs
                .iter()
                .any(|e| (0..dim).any(|c| e.uses_var(c))),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PairKernel::Zero => true,
            PairKernel::Const(c) => c.iter().all(|&v| v == 0.0),
            PairKernel::OfSecond(s) | PairKernel::OfDifference(s) => s.is_zero(),
            PairKernel::Expr(_) => false,
        }
    }
}

/// Initial-law sampler presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, sd: f64 },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialLaw {
    pub fn origin(dim: usize) -> Self {
        InitialLaw::Point(vec![0.0; dim])
    }

    #[inline]
    pub fn sample_into(&self, rng: &mut crate::rng::CounterRng, out: &mut [f64]) {
        match self {
            InitialLaw::Point(p) => out.copy_from_slice(p),
            InitialLaw::Gaussian { mean, sd } => {
                for (o, &m) in out.iter_mut().zip(mean) {
                    *o = m + sd * rng.standard_normal();
                }
            }
            InitialLaw::UniformBox { lo, hi } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = rng.uniform_range(lo[c], hi[c]);
                }
            }
        }
    }

    pub fn var_coord(&self, c: usize) -> f64 {
        match self {
            InitialLaw::Point(_) => 0.0,
            InitialLaw::Gaussian { sd, .. } => sd * sd,
            InitialLaw::UniformBox { lo, hi } => {
                let w = hi[c] - lo[c];
                w * w / 12.0
            }
        }
    }
}

/// Coefficients of the linear-interaction K-type system: per-type drifts
/// f_α, pairwise kernels b_{αγ}, initial laws and the claimed bound L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelSpec {
    pub dim: usize,
    pub drifts: Vec<Drift>,
    /// Row-major K×K: kernels[alpha * K + gamma].
    pub kernels: Vec<PairKernel>,
    pub initial: Vec<InitialLaw>,
    pub bound: f64,
}

impl LinearModelSpec {
    pub fn k(&self) -> usize {
        self.drifts.len()
    }

    #[inline]
    pub fn kernel(&self, alpha: usize, gamma: usize) -> &PairKernel {
        &self.kernels[alpha * self.k() + gamma]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.k();
        if k == 0 {
            return Err(ModelError::NoTypes);
        }
        if self.kernels.len() != k * k {
            return Err(ModelError::DimensionMismatch {
                what: "kernels".into(),
                expected: k * k,
                got: self.kernels.len(),
            });
        }
        if self.initial.len() != k {
            return Err(ModelError::DimensionMismatch {
                what: "initial laws".into(),
                expected: k,
                got: self.initial.len(),
            });
        }
        Ok(())
    }

    /// All drifts and kernels vanish.
    pub fn zero(k: usize, dim: usize) -> Self {
        LinearModelSpec {
            dim,
            drifts: vec![Drift::Zero; k],
            kernels: vec![PairKernel::Zero; k * k],
            initial: vec![InitialLaw::origin(dim); k],
            bound: 0.0,
        }
    }

    /// The two-population view of the single-type system with kernel
    /// b(x, y) = β(y), zero drift and zero initial condition (d = 1). The
    /// single-type mean (1/N)Σ_j β splits over types as Σ_γ (N_γ/N)⟨β, μ^γ⟩,
    /// so the two-type kernels carry the weights: b_{αγ}(x, y) = λ_γ β(y).
    pub fn example31(beta: Scalar1, lambda: f64) -> Self {
        let bound = beta.bound().unwrap_or(1.0);
        let b1 = beta
            .scale_amp(lambda)
            .expect("example preset needs a closed-form shape");
        let b2 = beta
            .scale_amp(1.0 - lambda)
            .expect("example preset needs a closed-form shape");
        LinearModelSpec {
            dim: 1,
            drifts: vec![Drift::Zero; 2],
            kernels: vec![
                PairKernel::OfSecond(b1.clone()),
                PairKernel::OfSecond(b2.clone()),
                PairKernel::OfSecond(b1),
                PairKernel::OfSecond(b2),
            ],
            initial: vec![InitialLaw::origin(1); 2],
            bound,
        }
    }

    /// Single-type spec with kernel b(x, y) = β(y).
    pub fn single_type_of_second(beta: Scalar1, dim: usize) -> Self {
        let bound = beta.bound().unwrap_or(1.0);
        LinearModelSpec {
            dim,
            drifts: vec![Drift::Zero],
            kernels: vec![PairKernel::OfSecond(beta)],
            initial: vec![InitialLaw::origin(dim)],
            bound,
        }
    }
}

// ---------------------------------------------------------------------------
// Common-factor model
// ---------------------------------------------------------------------------

/// Matrix-shaped dependence on the factor state: V(y) = A·shape(y) applied
/// coordinatewise, with Jacobian A·diag(shape'(y)). The shape must be a
/// preset with a closed-form derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTerm {
    /// Row-major rows×cols.
    pub matrix: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub shape: Scalar1,
}

impl FactorTerm {
    pub fn diagonal(dim: usize, scale: f64, shape: Scalar1) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = scale;
        }
        FactorTerm {
            matrix,
            rows: dim,
            cols: dim,
            shape,
        }
    }

    #[inline]
    fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.matrix[i * self.cols + j] * self.shape.eval(y[j]);
            }
            out[i] += acc;
        }
    }

    #[inline]
    fn jacobian_into(&self, y: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self.shape.deriv(y[j]).unwrap_or(f64::NAN);
                out[i * self.cols + j] += self.matrix[i * self.cols + j] * d;
            }
        }
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<(), ModelError> {
        if self.rows != rows || self.cols != cols || self.matrix.len() != rows * cols {
            return Err(ModelError::DimensionMismatch {
                what: "factor term matrix".into(),
                expected: rows * cols,
                got: self.matrix.len(),
            });
        }
        if self.shape.deriv(0.0).is_none() {
            return Err(ModelError::NoDerivative(self.shape.clone()));
        }
        Ok(())
    }
}

/// Linear dependence on one type's empirical measure through a scalar
/// moment: contribution = direction · ⟨probe(x[coord]), ν_γ⟩. Its measure
/// derivative is direction · probe(x̃[coord]) exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureTerm {
    pub gamma: usize,
    pub coord: usize,
    pub probe: Scalar1,
    pub direction: Vec<f64>,
}

/// Particle drift b_α(x, y, ν⃗) = own(x) + A·shape(y) + Σ measure terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleDrift {
    /// Coordinatewise in x; `None` means no own-state dependence.
    pub own: Option<Scalar1>,
    /// d×m dependence on the factor state.
    pub factor: Option<FactorTerm>,
    pub measure: Vec<MeasureTerm>,
}

impl ParticleDrift {
    pub fn zero() -> Self {
        ParticleDrift {
            own: None,
            factor: None,
            measure: Vec::new(),
        }
    }

    /// Scalar moments ⟨probe, ν_γ⟩, one per measure term, for the current
    /// empirical vector. Computed once per (type, step).
    pub fn measure_means(&self, nu: &[StatesView<'_>]) -> Vec<f64> {
        self.measure
            .iter()
            .map(|t| nu[t.gamma].mean_probe(&t.probe, t.coord))
            .collect()
    }

    #[inline]
    pub fn eval_with_means(&self, x: &[f64], y: &[f64], means: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(own) = &self.own {
            for (o, &xc) in out.iter_mut().zip(x) {
                *o = own.eval(xc);
            }
        }
        if let Some(f) = &self.factor {
            f.eval_into(y, out);
        }
        for (term, &mean) in self.measure.iter().zip(means) {
            for (o, &d) in out.iter_mut().zip(&term.direction) {
                *o += d * mean;
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64], nu: &[StatesView<'_>], out: &mut [f64]) {
        let means = self.measure_means(nu);
        self.eval_with_means(x, y, means.as_slice(), out);
    }

    /// b_{α,(1)}(x, r): d×m Jacobian in the factor state (row-major).
    #[inline]
    pub fn jacobian_y_into(&self, _x: &[f64], y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(f) = &self.factor {
            f.jacobian_into(y, out);
        }
    }

    /// Uncentered measure derivative b_{αγ,(2)}(x, r, x̃) ∈ R^d.
    #[inline]
    pub fn measure_kernel_into(&self, gamma: usize, x_probe: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for term in self.measure.iter().filter(|t| t.gamma == gamma) {
            let g = term.probe.eval(x_probe[term.coord]);
            for (o, &d) in out.iter_mut().zip(&term.direction) {
                *o += d * g;
            }
        }
    }

    pub fn depends_on_measure(&self, gamma: usize) -> bool {
        self.measure.iter().any(|t| t.gamma == gamma)
    }

    pub fn has_factor_dependence(&self) -> bool {
        self.factor.is_some()
    }
}

/// Factor coefficient ḡ(y, ν⃗) = const + A·shape(y) + Σ measure terms,
/// used for the factor drift and each diffusion column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCoeff {
    pub constant: Vec<f64>,
    pub factor: Option<FactorTerm>,
    pub measure: Vec<MeasureTerm>,
}

impl FactorCoeff {
    pub fn constant(values: Vec<f64>) -> Self {
        FactorCoeff {
            constant: values,
            factor: None,
            measure: Vec::new(),
        }
    }

    pub fn zero(m: usize) -> Self {
        Self::constant(vec![0.0; m])
    }

    pub fn measure_means(&self, nu: &[StatesView<'_>]) -> Vec<f64> {
        self.measure
            .iter()
            .map(|t| nu[t.gamma].mean_probe(&t.probe, t.coord))
            .collect()
    }

    #[inline]
    pub fn eval_with_means(&self, y: &[f64], means: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.constant);
        if let Some(f) = &self.factor {
            f.eval_into(y, out);
        }
        for (term, &mean) in self.measure.iter().zip(means) {
            for (o, &d) in out.iter_mut().zip(&term.direction) {
                *o += d * mean;
            }
        }
    }

    pub fn eval(&self, y: &[f64], nu: &[StatesView<'_>], out: &mut [f64]) {
        let means = self.measure_means(nu);
        self.eval_with_means(y, means.as_slice(), out);
    }

    /// ḡ_{(1)}(r): m×m Jacobian in y (row-major).
    #[inline]
    pub fn jacobian_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(f) = &self.factor {
            f.jacobian_into(y, out);
        }
    }

    /// Uncentered ḡ_{(2),γ}(r, x̃) ∈ R^m.
    #[inline]
    pub fn measure_kernel_into(&self, gamma: usize, x_probe: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for term in self.measure.iter().filter(|t| t.gamma == gamma) {
            let g = term.probe.eval(x_probe[term.coord]);
            for (o, &d) in out.iter_mut().zip(&term.direction) {
                *o += d * g;
            }
        }
    }

    pub fn depends_on_measure(&self, gamma: usize) -> bool {
        self.measure.iter().any(|t| t.gamma == gamma)
    }

    pub fn is_constant(&self) -> bool {
        self.factor.is_none() && self.measure.is_empty()
    }
}

/// The common-factor system: per-type drifts b_α(x, y, ν⃗), factor drift
/// b̄(y, ν⃗), factor diffusion columns σ̄_k(y, ν⃗), initial laws and bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonFactorModelSpec {
    pub dim: usize,
    pub factor_dim: usize,
    pub particle_drifts: Vec<ParticleDrift>,
    pub factor_drift: FactorCoeff,
    /// One column per factor Brownian coordinate; must have exactly m entries.
    pub factor_diffusion: Vec<FactorCoeff>,
    pub initial: Vec<InitialLaw>,
    pub factor_initial: InitialLaw,
    pub bound: f64,
}

impl CommonFactorModelSpec {
    pub fn k(&self) -> usize {
        self.particle_drifts.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (k, d, m) = (self.k(), self.dim, self.factor_dim);
        if k == 0 {
            return Err(ModelError::NoTypes);
        }
        if self.factor_diffusion.len() != m {
            return Err(ModelError::NonSquareDiffusion {
                m,
                got: self.factor_diffusion.len(),
            });
        }
        if self.initial.len() != k {
            return Err(ModelError::DimensionMismatch {
                what: "initial laws".into(),
                expected: k,
                got: self.initial.len(),
            });
        }
        for drift in &self.particle_drifts {
            if let Some(f) = &drift.factor {
                f.validate(d, m)?;
            }
            for t in &drift.measure {
                if t.direction.len() != d || t.gamma >= k || t.coord >= d {
                    return Err(ModelError::DimensionMismatch {
                        what: "particle measure term".into(),
                        expected: d,
                        got: t.direction.len(),
                    });
                }
            }
        }
        for coeff in std::iter::once(&self.factor_drift).chain(self.factor_diffusion.iter()) {
            if coeff.constant.len() != m {
                return Err(ModelError::DimensionMismatch {
                    what: "factor coefficient".into(),
                    expected: m,
                    got: coeff.constant.len(),
                });
            }
            if let Some(f) = &coeff.factor {
                f.validate(m, m)?;
            }
            for t in &coeff.measure {
                if t.direction.len() != m || t.gamma >= k || t.coord >= d {
                    return Err(ModelError::DimensionMismatch {
                        what: "factor measure term".into(),
                        expected: m,
                        got: t.direction.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Identity diffusion for the factor: σ̄ = I_m.
    pub fn identity_diffusion(m: usize) -> Vec<FactorCoeff> {
        (0..m)
            .map(|k| {
                let mut c = vec![0.0; m];
                c[k] = 1.0;
                FactorCoeff::constant(c)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Condition probes
// ---------------------------------------------------------------------------

/// Numerically probed regularity diagnostics. The probes are evidence, not a
/// proof; `violations` is nonempty when a declared bound is exceeded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub probes: usize,
    pub seed: u64,
    pub declared_bound: f64,
    pub max_kernel_norm: f64,
    pub max_lipschitz_quotient: f64,
    /// Worst x·f/(1 + ‖x‖²) over probes.
    pub max_drift_growth: f64,
    /// Common-factor case: fitted order of the first-order expansion
    /// residual per coefficient (≈2 for smooth presets; ∞ when exact).
    pub expansion_orders: Vec<f64>,
    pub violations: Vec<String>,
}

impl ConditionReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&a| a * a).sum::<f64>().sqrt()
}

fn check_finite(what: &str, v: &[f64], point: &[f64]) -> Result<(), ModelError> {
    if v.iter().any(|a| !a.is_finite()) {
        return Err(ModelError::NonFinite {
            coefficient: what.to_string(),
            point: point.to_vec(),
        });
    }
    Ok(())
}

/// Probe Condition-type bounds of a linear spec on random points.
pub fn validate_conditions(
    spec: &LinearModelSpec,
    probes: usize,
    seed: u64,
) -> Result<ConditionReport, ModelError> {
    spec.validate()?;
    let d = spec.dim;
    let k = spec.k();
    let mut rng =
        crate::rng::CounterRng::from_seed(seed).substream(crate::rng::StreamTag::Probe, 0);
    let mut max_norm: f64 = 0.0;
    let mut max_lip: f64 = 0.0;
    let mut max_growth: f64 = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut x2 = vec![0.0; d];
    let mut y2 = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut out2 = vec![0.0; d];
    for _ in 0..probes.max(1) {
        for v in x.iter_mut().chain(y.iter_mut()) {
            *v = rng.uniform_range(-3.0, 3.0);
        }
        for c in 0..d {
            x2[c] = x[c] + rng.uniform_range(-0.5, 0.5);
            y2[c] = y[c] + rng.uniform_range(-0.5, 0.5);
        }
        for alpha in 0..k {
            for gamma in 0..k {
                let b = spec.kernel(alpha, gamma);
                b.eval_into(&x, &y, &mut out);
                check_finite(&format!("b[{alpha}][{gamma}]"), &out, &x)?;
                max_norm = max_norm.max(norm(&out));
                b.eval_into(&x2, &y2, &mut out2);
                check_finite(&format!("b[{alpha}][{gamma}]"), &out2, &x2)?;
                let dist: f64 = x
                    .iter()
                    .zip(&x2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    + y.iter()
                        .zip(&y2)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                if dist > 1e-9 {
                    let diff: f64 = out
                        .iter()
                        .zip(&out2)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    max_lip = max_lip.max(diff / dist);
                }
            }
            let t = rng.uniform();
            spec.drifts[alpha].eval_into(t, &x, &mut out);
            check_finite(&format!("f[{alpha}]"), &out, &x)?;
            let xdot: f64 = x.iter().zip(&out).map(|(a, b)| a * b).sum();
            let nx2: f64 = x.iter().map(|a| a * a).sum();
            max_growth = max_growth.max(xdot / (1.0 + nx2));
        }
    }
    if max_norm > spec.bound + 1e-9 {
        violations.push(format!(
            "kernel norm {max_norm:.6} exceeds declared bound {}",
            spec.bound
        ));
    }
    if max_lip > spec.bound + 1e-9 {
        violations.push(format!(
            "Lipschitz quotient {max_lip:.6} exceeds declared bound {}",
            spec.bound
        ));
    }
    if max_growth > spec.bound + 1e-9 {
        violations.push(format!(
            "drift growth {max_growth:.6} exceeds declared bound {}",
            spec.bound
        ));
    }
    Ok(ConditionReport {
        probes,
        seed,
        declared_bound: spec.bound,
        max_kernel_norm: max_norm,
        max_lipschitz_quotient: max_lip,
        max_drift_growth: if max_growth.is_finite() {
            max_growth
        } else {
            0.0
        },
        expansion_orders: Vec::new(),
        violations,
    })
}

/// Probe the common-factor conditions: boundedness plus the first-order
/// expansion residual order along shrinking perturbations.
pub fn validate_common_conditions(
    spec: &CommonFactorModelSpec,
    probes: usize,
    seed: u64,
) -> Result<ConditionReport, ModelError> {
    spec.validate()?;
    let (d, m, k) = (spec.dim, spec.factor_dim, spec.k());
    let mut rng =
        crate::rng::CounterRng::from_seed(seed).substream(crate::rng::StreamTag::Probe, 1);
    let mut max_norm: f64 = 0.0;
    let mut violations = Vec::new();

    // Synthetic empirical measures for the probes.
    let atoms = 64usize;
    let mut base_states: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut s = vec![0.0; atoms * d];
        for v in s.iter_mut() {
            *v = rng.uniform_range(-2.0, 2.0);
        }
        base_states.push(s);
    }

    let mut x = vec![0.0; d];
    let mut y = vec![0.0; m];
    let mut out_d = vec![0.0; d];
    let mut out_m = vec![0.0; m];
    for _ in 0..probes.max(1) {
        for v in x.iter_mut() {
            *v = rng.uniform_range(-3.0, 3.0);
        }
        for v in y.iter_mut() {
            *v = rng.uniform_range(-3.0, 3.0);
        }
        let views: Vec<StatesView> = base_states
            .iter()
            .map(|s| StatesView { data: s, dim: d })
            .collect();
        for (alpha, drift) in spec.particle_drifts.iter().enumerate() {
            drift.eval(&x, &y, &views, &mut out_d);
            check_finite(&format!("b[{alpha}]"), &out_d, &x)?;
            max_norm = max_norm.max(norm(&out_d));
        }
        spec.factor_drift.eval(&y, &views, &mut out_m);
        check_finite("factor drift", &out_m, &y)?;
        max_norm = max_norm.max(norm(&out_m));
        for (kk, col) in spec.factor_diffusion.iter().enumerate() {
            col.eval(&y, &views, &mut out_m);
            check_finite(&format!("factor diffusion column {kk}"), &out_m, &y)?;
            max_norm = max_norm.max(norm(&out_m));
        }
    }
    if max_norm > spec.bound + 1e-9 {
        violations.push(format!(
            "coefficient norm {max_norm:.6} exceeds declared bound {}",
            spec.bound
        ));
    }

    // Expansion-order probe: residual of the first-order expansion along a
    // shrinking perturbation of (y, ν⃗).
    let scales = [1.0, 0.5, 0.25, 0.125];
    let mut orders = Vec::new();
    let delta_y: Vec<f64> = (0..m).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.uniform_range(-0.5, 0.5)).collect();

    let mut probe_coeff = |label: String, eval: &dyn Fn(&[f64], &[StatesView]) -> Vec<f64>,
                           jac: &dyn Fn(&[f64]) -> Vec<f64>,
                           mker: &dyn Fn(usize, &[f64]) -> Vec<f64>,
                           out_dim: usize| {
        let y0: Vec<f64> = (0..m).map(|i| 0.3 * i as f64 - 0.2).collect();
        let views0: Vec<StatesView> = base_states
            .iter()
            .map(|s| StatesView { data: s, dim: d })
            .collect();
        let g0 = eval(&y0, &views0);
        let jac0 = jac(&y0);
        let mut residuals = Vec::new();
        for &s in &scales {
            let y1: Vec<f64> = y0.iter().zip(&delta_y).map(|(a, b)| a + s * b).collect();
            let shifted: Vec<Vec<f64>> = base_states
                .iter()
                .map(|st| {
                    let mut out = st.clone();
                    for (j, v) in out.iter_mut().enumerate() {
                        *v += s * shift[j % d];
                    }
                    out
                })
                .collect();
            let views1: Vec<StatesView> = shifted
                .iter()
                .map(|st| StatesView { data: st, dim: d })
                .collect();
            let g1 = eval(&y1, &views1);
            // First-order prediction.
            let mut pred = g0.clone();
            for i in 0..out_dim {
                for j in 0..m {
                    pred[i] += jac0[i * m + j] * (y1[j] - y0[j]);
                }
            }
            for gamma in 0..k {
                let v0 = StatesView {
                    data: &base_states[gamma],
                    dim: d,
                };
                let v1 = StatesView {
                    data: &shifted[gamma],
                    dim: d,
                };
                let mut mean1 = vec![0.0; out_dim];
                let mut mean0 = vec![0.0; out_dim];
                for st in v1.iter() {
                    let kv = mker(gamma, st);
                    for (a, b) in mean1.iter_mut().zip(&kv) {
                        *a += b / v1.count() as f64;
                    }
                }
                for st in v0.iter() {
                    let kv = mker(gamma, st);
                    for (a, b) in mean0.iter_mut().zip(&kv) {
                        *a += b / v0.count() as f64;
                    }
                }
                for i in 0..out_dim {
                    pred[i] += mean1[i] - mean0[i];
                }
            }
            let res: f64 = g1
                .iter()
                .zip(&pred)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            residuals.push(res);
        }
        // Fit log-residual slope; exact expansions report +inf.
        if residuals.iter().all(|&r| r < 1e-12) {
            orders.push(f64::INFINITY);
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            let lr: Vec<f64> = residuals.iter().map(|r| r.max(1e-300).ln()).collect();
            let ls: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
            let mlr = lr.iter().sum::<f64>() / lr.len() as f64;
            let mls = ls.iter().sum::<f64>() / ls.len() as f64;
            for i in 0..lr.len() {
                num += (ls[i] - mls) * (lr[i] - mlr);
                den += (ls[i] - mls) * (ls[i] - mls);
            }
            let slope = num / den;
            if slope < 1.5 {
                violations.push(format!(
                    "{label}: expansion residual order {slope:.3} below quadratic"
                ));
            }
            orders.push(slope);
        }
    };

    {
        let fd = &spec.factor_drift;
        probe_coeff(
            "factor drift".into(),
            &|y, nu| {
                let mut out = vec![0.0; m];
                fd.eval(y, nu, &mut out);
                out
            },
            &|y| {
                let mut out = vec![0.0; m * m];
                fd.jacobian_into(y, &mut out);
                out
            },
            &|gamma, xt| {
                let mut out = vec![0.0; m];
                fd.measure_kernel_into(gamma, xt, &mut out);
                out
            },
            m,
        );
    }
    for (ci, col) in spec.factor_diffusion.iter().enumerate() {
        probe_coeff(
            format!("factor diffusion column {ci}"),
            &|y, nu| {
                let mut out = vec![0.0; m];
                col.eval(y, nu, &mut out);
                out
            },
            &|y| {
                let mut out = vec![0.0; m * m];
                col.jacobian_into(y, &mut out);
                out
            },
            &|gamma, xt| {
                let mut out = vec![0.0; m];
                col.measure_kernel_into(gamma, xt, &mut out);
                out
            },
            m,
        );
    }
    for (alpha, drift) in spec.particle_drifts.iter().enumerate() {
        let x0 = vec![0.1; d];
        probe_coeff(
            format!("particle drift {alpha}"),
            &|y, nu| {
                let mut out = vec![0.0; d];
                drift.eval(&x0, y, nu, &mut out);
                out
            },
            &|y| {
                let mut out = vec![0.0; d * m];
                drift.jacobian_y_into(&x0, y, &mut out);
                out
            },
            &|gamma, xt| {
                let mut out = vec![0.0; d];
                drift.measure_kernel_into(gamma, xt, &mut out);
                out
            },
            d,
        );
    }

    Ok(ConditionReport {
        probes,
        seed,
        declared_bound: spec.bound,
        max_kernel_norm: max_norm,
        max_lipschitz_quotient: 0.0,
        max_drift_growth: 0.0,
        expansion_orders: orders,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_from_counts() {
        let l = PopulationLayout::from_counts(vec![3, 2]).unwrap();
        assert_eq!(l.n_total(), 5);
        assert_eq!(l.k(), 2);
        let membership: Vec<usize> = (0..5).map(|i| l.type_of(i)).collect();
        assert_eq!(membership, vec![0, 0, 0, 1, 1]);
        assert_eq!(l.weights(), &[0.6, 0.4]);
        assert_eq!(l.range(1), 3..5);
    }

    #[test]
    fn layout_single_type_boundary() {
        let l = PopulationLayout::from_weights(10, &[1.0]).unwrap();
        assert_eq!(l.counts(), &[10]);
        assert_eq!(l.weight(0), 1.0);
    }

    #[test]
    fn layout_from_weights_floor_remainder() {
        let l = PopulationLayout::from_weights(5, &[0.5, 0.5]).unwrap();
        assert_eq!(l.counts(), &[2, 3]);
    }

    #[test]
    fn layout_rejects_bad_weights() {
        assert!(PopulationLayout::from_weights(10, &[0.6, 0.5]).is_err());
        assert!(PopulationLayout::from_counts(vec![0, 3]).is_err());
    }

    #[test]
    fn layout_counts_always_sum_to_n() {
        for n in [7usize, 10, 23, 101] {
            for w in [[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]] {
                if let Ok(l) = PopulationLayout::from_weights(n, &w) {
                    assert_eq!(l.counts().iter().sum::<usize>(), n);
                }
            }
        }
    }

    #[test]
    fn zero_kernel_report() {
        let spec = LinearModelSpec::zero(2, 1);
        let r = validate_conditions(&spec, 200, 1).unwrap();
        assert_eq!(r.max_kernel_norm, 0.0);
        assert!(r.ok());
    }

    #[test]
    fn sine_kernel_within_bound() {
        let spec = LinearModelSpec::single_type_of_second(Scalar1::sin(), 1);
        let r = validate_conditions(&spec, 500, 2).unwrap();
        assert!(r.max_kernel_norm <= 1.0 + 1e-12);
        assert!(r.max_lipschitz_quotient <= 1.0 + 1e-9);
        assert!(r.ok());
    }

    #[test]
    fn violated_bound_is_flagged() {
        let mut spec = LinearModelSpec::single_type_of_second(
            Scalar1::Sin {
                amp: 2.0,
                freq: 1.0,
            },
            1,
        );
        spec.bound = 1.0;
        let r = validate_conditions(&spec, 500, 3).unwrap();
        assert!(!r.ok());
    }

    #[test]
    fn reports_are_reproducible() {
        let spec = LinearModelSpec::single_type_of_second(Scalar1::sin(), 1);
        let a = validate_conditions(&spec, 100, 9).unwrap();
        let b = validate_conditions(&spec, 100, 9).unwrap();
        assert_eq!(a.max_kernel_norm, b.max_kernel_norm);
        assert_eq!(a.max_lipschitz_quotient, b.max_lipschitz_quotient);
    }

    fn toy_common_spec() -> CommonFactorModelSpec {
        CommonFactorModelSpec {
            dim: 1,
            factor_dim: 1,
            particle_drifts: vec![ParticleDrift {
                own: None,
                factor: Some(FactorTerm::diagonal(
                    1,
                    0.5,
                    Scalar1::Tanh {
                        amp: 1.0,
                        scale: 1.0,
                    },
                )),
                measure: vec![MeasureTerm {
                    gamma: 0,
                    coord: 0,
                    probe: Scalar1::sin(),
                    direction: vec![0.4],
                }],
            }],
            factor_drift: FactorCoeff {
                constant: vec![0.0],
                factor: Some(FactorTerm::diagonal(
                    1,
                    -0.5,
                    Scalar1::Tanh {
                        amp: 1.0,
                        scale: 1.0,
                    },
                )),
                measure: vec![],
            },
            factor_diffusion: vec![FactorCoeff::constant(vec![0.8])],
            initial: vec![InitialLaw::origin(1)],
            factor_initial: InitialLaw::origin(1),
            bound: 2.0,
        }
    }

    #[test]
    fn common_factor_expansion_probe() {
        let spec = toy_common_spec();
        let r = validate_common_conditions(&spec, 100, 4).unwrap();
        assert!(r.ok(), "violations: {:?}", r.violations);
        // tanh terms have quadratic residuals; measure terms are exact.
        for &o in &r.expansion_orders {
            assert!(o > 1.5, "order {o}");
        }
    }

    #[test]
    fn non_square_diffusion_rejected() {
        let mut spec = toy_common_spec();
        spec.factor_diffusion.push(FactorCoeff::constant(vec![1.0]));
        assert!(matches!(
            spec.validate(),
            Err(ModelError::NonSquareDiffusion { .. })
        ));
    }
}
