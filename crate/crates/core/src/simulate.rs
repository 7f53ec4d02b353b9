//! Euler–Maruyama engines for the particle systems and their mean-field
//! reference ensembles, plus the matrix-SDE fundamental solutions used by
//! the common-factor limit objects.
//!
//! All schemes use left-endpoint drift and diffusion, matching the Itô sums
//! in the limit kernels. Brownian increments come from per-particle counter
//! streams derived from (seed, particle id), so every engine is a pure
//! function of (spec, layout, grid, seeds) regardless of thread schedule.

use crate::model::{
    CommonFactorModelSpec, LinearModelSpec, ModelError, PopulationLayout, StatesView, TimeGrid,
};
use crate::rng::{CounterRng, StreamTag};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at step {step} ({what})")]
    NonFinite { step: usize, what: String },
    #[error("layout has {layout_k} types but spec has {spec_k}")]
    LayoutMismatch { layout_k: usize, spec_k: usize },
    #[error("time grids do not match")]
    GridMismatch,
    #[error("reference ensemble needs at least 2 particles per type")]
    ReferenceTooSmall,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt ensemble file: {0}")]
    Corrupt(String),
}

/// Seeds for systems with a common factor: the factor path (Y_0, W̄) is a
/// function of `factor` alone, so ensembles built from the same factor seed
/// share the identical factor realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPair {
    pub particles: u64,
    pub factor: u64,
}

/// Discrete path of the common factor: driving Brownian path and state path,
/// both with n+1 grid points of dimension m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub dim: usize,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl FactorRecord {
    #[inline]
    pub fn w_at(&self, k: usize) -> &[f64] {
        &self.w[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.dim..(k + 1) * self.dim]
    }
}

/// Borrowed view of one discrete path: n+1 points in R^dim.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> PathView<'a> {
    #[inline]
    pub fn point(&self, k: usize) -> &'a [f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn terminal(&self) -> &'a [f64] {
        self.point(self.points() - 1)
    }
}

/// Discretized ensemble of (W^i, state^i) paths, particle-major storage,
/// with an optional common-factor record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub layout: PopulationLayout,
    pub dim: usize,
    /// Driving paths, index ((i·(n+1)) + k)·d + c.
    w: Vec<f64>,
    /// State paths, same indexing.
    x: Vec<f64>,
    pub factor: Option<FactorRecord>,
    pub seed: u64,
}

impl PathEnsemble {
    fn alloc(grid: TimeGrid, layout: PopulationLayout, dim: usize, seed: u64) -> Self {
        let n = layout.n_total() * grid.points() * dim;
        PathEnsemble {
            grid,
            layout,
            dim,
            w: vec![0.0; n],
            x: vec![0.0; n],
            factor: None,
            seed,
        }
    }

    #[inline]
    fn path_len(&self) -> usize {
        self.grid.points() * self.dim
    }

    #[inline]
    pub fn w_path(&self, i: usize) -> PathView<'_> {
        let l = self.path_len();
        PathView {
            data: &self.w[i * l..(i + 1) * l],
            dim: self.dim,
        }
    }

    #[inline]
    pub fn x_path(&self, i: usize) -> PathView<'_> {
        let l = self.path_len();
        PathView {
            data: &self.x[i * l..(i + 1) * l],
            dim: self.dim,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.layout.n_total()
    }
}

/// Time-major copy of ensemble states: all particles' states at one step are
/// contiguous, so per-type empirical marginals are cheap slices.
#[derive(Debug, Clone)]
pub struct FlowTable {
    pub layout: PopulationLayout,
    pub dim: usize,
    pub points: usize,
    data: Vec<f64>,
}

impl FlowTable {
    pub fn from_ensemble(ens: &PathEnsemble) -> Self {
        let n = ens.n_particles();
        let points = ens.grid.points();
        let d = ens.dim;
        let mut data = vec![0.0; n * points * d];
        for i in 0..n {
            let xp = ens.x_path(i);
            for k in 0..points {
                let src = xp.point(k);
                let dst = (k * n + i) * d;
                data[dst..dst + d].copy_from_slice(src);
            }
        }
        FlowTable {
            layout: ens.layout.clone(),
            dim: d,
            points,
            data,
        }
    }

    /// Empirical marginal of type `alpha` at grid index `k`.
    #[inline]
    pub fn states(&self, alpha: usize, k: usize) -> StatesView<'_> {
        let n = self.layout.n_total();
        let r = self.layout.range(alpha);
        StatesView {
            data: &self.data[(k * n + r.start) * self.dim..(k * n + r.end) * self.dim],
            dim: self.dim,
        }
    }

    pub fn all_views(&self, k: usize) -> Vec<StatesView<'_>> {
        (0..self.layout.k()).map(|a| self.states(a, k)).collect()
    }
}

/// Per-step flow means ⟨b_{αγ}(·, y), μ^γ_k⟩ of the x-independent kernels,
/// computed once and shared across replications; also knows which kernels
/// centering annihilates (constants) and which need per-x averaging.
pub struct FlowKernelMeans {
    k: usize,
    d: usize,
    steps: usize,
    /// Indexed α·K+γ; empty when x-dependent, constant or zero.
    means: Vec<Vec<f64>>,
    x_dep: Vec<bool>,
    annihilated: Vec<bool>,
}

fn pair_kernel_is_constant(b: &crate::model::PairKernel) -> bool {
    matches!(
        b,
        crate::model::PairKernel::Zero | crate::model::PairKernel::Const(_)
    )
}

impl FlowKernelMeans {
    pub fn new(spec: &LinearModelSpec, flow: &FlowTable) -> Self {
        let d = spec.dim;
        let k = spec.k();
        let steps = flow.points - 1;
        let mut means = Vec::with_capacity(k * k);
        let mut x_dep = Vec::with_capacity(k * k);
        let mut annihilated = Vec::with_capacity(k * k);
        let dummy = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for alpha in 0..k {
            for gamma in 0..k {
                let b = spec.kernel(alpha, gamma);
                let dep = b.depends_on_first(d);
                x_dep.push(dep);
                annihilated.push(pair_kernel_is_constant(b));
                if dep || pair_kernel_is_constant(b) {
                    means.push(Vec::new());
                    continue;
                }
                let mut m = vec![0.0; steps * d];
                for kk in 0..steps {
                    let sv = flow.states(gamma, kk);
                    let inv = 1.0 / sv.count() as f64;
                    for j in 0..sv.count() {
                        b.eval_into(&dummy, sv.state(j), &mut buf);
                        for c in 0..d {
                            m[kk * d + c] += inv * buf[c];
                        }
                    }
                }
                means.push(m);
            }
        }
        FlowKernelMeans {
            k,
            d,
            steps,
            means,
            x_dep,
            annihilated,
        }
    }

    #[inline]
    pub fn is_annihilated(&self, alpha: usize, gamma: usize) -> bool {
        self.annihilated[alpha * self.k + gamma]
    }

    #[inline]
    pub fn is_x_dependent(&self, alpha: usize, gamma: usize) -> bool {
        self.x_dep[alpha * self.k + gamma]
    }

    /// The stored mean vector at step `kk` (x-independent kernels only).
    #[inline]
    pub fn mean_at(&self, alpha: usize, gamma: usize, kk: usize) -> &[f64] {
        let m = &self.means[alpha * self.k + gamma];
        &m[kk * self.d..(kk + 1) * self.d]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Flow-centered kernel b_{αγ,t_kk}(x, y); `flow` is consulted only for
    /// x-dependent kernels.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn eval_centered(
        &self,
        spec: &LinearModelSpec,
        flow: &FlowTable,
        alpha: usize,
        gamma: usize,
        kk: usize,
        x: &[f64],
        y: &[f64],
        out: &mut [f64],
    ) {
        let idx = alpha * self.k + gamma;
        if self.annihilated[idx] {
            out.fill(0.0);
            return;
        }
        let b = spec.kernel(alpha, gamma);
        b.eval_into(x, y, out);
        if !self.x_dep[idx] {
            let m = &self.means[idx];
            for c in 0..self.d {
                out[c] -= m[kk * self.d + c];
            }
        } else {
            let sv = flow.states(gamma, kk);
            let inv = 1.0 / sv.count() as f64;
            let mut buf = vec![0.0; self.d];
            for j in 0..sv.count() {
                b.eval_into(x, sv.state(j), &mut buf);
                for c in 0..self.d {
                    out[c] -= inv * buf[c];
                }
            }
        }
    }
}

/// Reference ensemble: i.i.d.-per-type draws standing in for the limit laws
/// ν_α (or ρ_α(ω̄,·) in the conditional case), with the per-type, per-time
/// empirical marginals acting as the flow μ^α_t.
#[derive(Debug, Clone)]
pub struct ReferenceEnsemble {
    pub ensemble: PathEnsemble,
    pub flow: FlowTable,
    pub picard_iters: usize,
}

impl ReferenceEnsemble {
    pub fn m_ref_per_type(&self) -> Vec<usize> {
        self.ensemble.layout.counts().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Linear-interaction engines
// ---------------------------------------------------------------------------

/// What the pairwise drift is averaged against at each step.
enum FlowSource<'a> {
    /// The live ensemble itself (self-interacting system).
    Live,
    /// A frozen flow table (plug-in reference / independent draws), with
    /// optionally precomputed per-step kernel means.
    Frozen(&'a FlowTable, Option<&'a FlowKernelMeans>),
}

fn check_linear(spec: &LinearModelSpec, layout: &PopulationLayout) -> Result<(), SimError> {
    spec.validate()?;
    if spec.k() != layout.k() {
        return Err(SimError::LayoutMismatch {
            layout_k: layout.k(),
            spec_k: spec.k(),
        });
    }
    Ok(())
}

fn simulate_linear(
    spec: &LinearModelSpec,
    layout: &PopulationLayout,
    grid: TimeGrid,
    seed: u64,
    source: FlowSource<'_>,
) -> Result<PathEnsemble, SimError> {
    check_linear(spec, layout)?;
    if let FlowSource::Frozen(flow, means) = &source {
        if flow.points != grid.points() {
            return Err(SimError::GridMismatch);
        }
        if let Some(m) = means {
            if m.steps() != grid.steps {
                return Err(SimError::GridMismatch);
            }
        }
    }
    let d = spec.dim;
    let k_types = layout.k();
    let n = layout.n_total();
    let n_steps = grid.steps;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut ens = PathEnsemble::alloc(grid, layout.clone(), d, seed);
    let root = CounterRng::from_seed(seed);

    // Current states, contiguous per particle.
    let mut cur = vec![0.0; n * d];
    for alpha in 0..k_types {
        for i in layout.range(alpha) {
            let mut rng = root.substream(StreamTag::Initial, i as u64);
            spec.initial[alpha].sample_into(&mut rng, &mut cur[i * d..(i + 1) * d]);
        }
    }
    let mut streams: Vec<CounterRng> = (0..n)
        .map(|i| root.substream(StreamTag::Particle, i as u64))
        .collect();

    let path_len = ens.path_len();
    let any_x_dep: Vec<bool> = (0..k_types)
        .map(|a| (0..k_types).any(|g| spec.kernel(a, g).depends_on_first(d)))
        .collect();

    let mut type_drift = vec![0.0; k_types * d];
    let mut buf = vec![0.0; d];
    let mut drift_i = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let dummy_x = vec![0.0; d];

    for k in 0..=n_steps {
        // Record states at grid index k.
        for i in 0..n {
            let dst = i * path_len + k * d;
            ens.x[dst..dst + d].copy_from_slice(&cur[i * d..(i + 1) * d]);
        }
        if k == n_steps {
            break;
        }
        let t = ens.grid.time(k);

        // Empirical means of x-independent kernels, once per (α, γ).
        type_drift.fill(0.0);
        for alpha in 0..k_types {
            for gamma in 0..k_types {
                let b = spec.kernel(alpha, gamma);
                if b.is_zero() || b.depends_on_first(d) {
                    continue;
                }
                let acc = &mut type_drift[alpha * d..(alpha + 1) * d];
                match &source {
                    FlowSource::Live => {
                        let r = layout.range(gamma);
                        let inv = 1.0 / (r.len() as f64);
                        for j in r {
                            b.eval_into(&dummy_x, &cur[j * d..(j + 1) * d], &mut buf);
                            for (a, &v) in acc.iter_mut().zip(&buf) {
                                *a += inv * v;
                            }
                        }
                    }
                    FlowSource::Frozen(flow, cached) => match cached {
                        Some(means) => {
                            for (a, &v) in acc.iter_mut().zip(means.mean_at(alpha, gamma, k)) {
                                *a += v;
                            }
                        }
                        None => {
                            let sv = flow.states(gamma, k);
                            let inv = 1.0 / sv.count() as f64;
                            for j in 0..sv.count() {
                                b.eval_into(&dummy_x, sv.state(j), &mut buf);
                                for (a, &v) in acc.iter_mut().zip(&buf) {
                                    *a += inv * v;
                                }
                            }
                        }
                    },
                }
            }
        }

        for alpha in 0..k_types {
            for i in layout.range(alpha) {
                let (xi_lo, xi_hi) = (i * d, (i + 1) * d);
                drift_i.copy_from_slice(&type_drift[alpha * d..(alpha + 1) * d]);
                // x-dependent kernels need the per-particle empirical mean.
                if any_x_dep[alpha] {
                    for gamma in 0..k_types {
                        let b = spec.kernel(alpha, gamma);
                        if b.is_zero() || !b.depends_on_first(d) {
                            continue;
                        }
                        match &source {
                            FlowSource::Live => {
                                let r = layout.range(gamma);
                                let inv = 1.0 / (r.len() as f64);
                                for j in r {
                                    b.eval_into(
                                        &cur[xi_lo..xi_hi],
                                        &cur[j * d..(j + 1) * d],
                                        &mut buf,
                                    );
                                    for (a, &v) in drift_i.iter_mut().zip(&buf) {
                                        *a += inv * v;
                                    }
                                }
                            }
                            FlowSource::Frozen(flow, _) => {
                                let sv = flow.states(gamma, k);
                                let inv = 1.0 / sv.count() as f64;
                                for j in 0..sv.count() {
                                    b.eval_into(&cur[xi_lo..xi_hi], sv.state(j), &mut buf);
                                    for (a, &v) in drift_i.iter_mut().zip(&buf) {
                                        *a += inv * v;
                                    }
                                }
                            }
                        }
                    }
                }
                spec.drifts[alpha].eval_into(t, &cur[xi_lo..xi_hi], &mut buf);
                streams[i].fill_normal(sqrt_dt, &mut dw);
                let wp = i * path_len + k * d;
                for c in 0..d {
                    let inc = dw[c];
                    ens.w[wp + d + c] = ens.w[wp + c] + inc;
                    let s = cur[xi_lo + c] + (buf[c] + drift_i[c]) * dt + inc;
                    if !s.is_finite() {
                        return Err(SimError::NonFinite {
                            step: k,
                            what: format!("particle {i} coordinate {c}"),
                        });
                    }
                    cur[xi_lo + c] = s;
                }
            }
        }
    }
    Ok(ens)
}

/// N-particle self-interacting system: left-endpoint Euler–Maruyama with the
/// live per-type empirical means in the drift.
pub fn simulate_interacting(
    spec: &LinearModelSpec,
    layout: &PopulationLayout,
    grid: TimeGrid,
    seed: u64,
) -> Result<PathEnsemble, SimError> {
    simulate_linear(spec, layout, grid, seed, FlowSource::Live)
}

/// Independent particles driven by a frozen flow; draws approximate i.i.d.
/// samples from the per-type limit laws.
pub fn simulate_against_flow(
    spec: &LinearModelSpec,
    counts: &[usize],
    grid: TimeGrid,
    seed: u64,
    flow: &FlowTable,
) -> Result<PathEnsemble, SimError> {
    let layout = PopulationLayout::from_counts(counts.to_vec())?;
    simulate_linear(spec, &layout, grid, seed, FlowSource::Frozen(flow, None))
}

/// [`simulate_against_flow`] with precomputed flow-kernel means; use when
/// many replications share one reference flow.
pub fn simulate_against_flow_cached(
    spec: &LinearModelSpec,
    counts: &[usize],
    grid: TimeGrid,
    seed: u64,
    flow: &FlowTable,
    means: &FlowKernelMeans,
) -> Result<PathEnsemble, SimError> {
    let layout = PopulationLayout::from_counts(counts.to_vec())?;
    simulate_linear(spec, &layout, grid, seed, FlowSource::Frozen(flow, Some(means)))
}

/// `count` independent particles, all of type `alpha`, driven by a frozen
/// flow. Used to draw operator samples from one type's limit law.
pub fn simulate_type_against_flow(
    spec: &LinearModelSpec,
    alpha: usize,
    count: usize,
    grid: TimeGrid,
    seed: u64,
    flow: &FlowTable,
) -> Result<PathEnsemble, SimError> {
    spec.validate()?;
    if flow.points != grid.points() {
        return Err(SimError::GridMismatch);
    }
    let d = spec.dim;
    let k_types = spec.k();
    let layout = PopulationLayout::from_counts(vec![count])?;
    let mut ens = PathEnsemble::alloc(grid, layout, d, seed);
    let root = CounterRng::from_seed(seed);
    let mut cur = vec![0.0; count * d];
    for i in 0..count {
        let mut rng = root.substream(StreamTag::Initial, i as u64);
        spec.initial[alpha].sample_into(&mut rng, &mut cur[i * d..(i + 1) * d]);
    }
    let mut streams: Vec<CounterRng> = (0..count)
        .map(|i| root.substream(StreamTag::Particle, i as u64))
        .collect();
    let path_len = ens.path_len();
    let mut common = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut drift_i = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let dummy_x = vec![0.0; d];
    let x_dep = (0..k_types).any(|g| spec.kernel(alpha, g).depends_on_first(d));
    for k in 0..=grid.steps {
        for i in 0..count {
            let dst = i * path_len + k * d;
            ens.x[dst..dst + d].copy_from_slice(&cur[i * d..(i + 1) * d]);
        }
        if k == grid.steps {
            break;
        }
        let t = grid.time(k);
        common.fill(0.0);
        for gamma in 0..k_types {
            let b = spec.kernel(alpha, gamma);
            if b.is_zero() || b.depends_on_first(d) {
                continue;
            }
            let sv = flow.states(gamma, k);
            let inv = 1.0 / sv.count() as f64;
            for j in 0..sv.count() {
                b.eval_into(&dummy_x, sv.state(j), &mut buf);
                for (a, &v) in common.iter_mut().zip(&buf) {
                    *a += inv * v;
                }
            }
        }
        for i in 0..count {
            let (lo, hi) = (i * d, (i + 1) * d);
            drift_i.copy_from_slice(&common);
            if x_dep {
                for gamma in 0..k_types {
                    let b = spec.kernel(alpha, gamma);
                    if b.is_zero() || !b.depends_on_first(d) {
                        continue;
                    }
                    let sv = flow.states(gamma, k);
                    let inv = 1.0 / sv.count() as f64;
                    for j in 0..sv.count() {
                        b.eval_into(&cur[lo..hi], sv.state(j), &mut buf);
                        for (a, &v) in drift_i.iter_mut().zip(&buf) {
                            *a += inv * v;
                        }
                    }
                }
            }
            spec.drifts[alpha].eval_into(t, &cur[lo..hi], &mut buf);
            streams[i].fill_normal(sqrt_dt_of(grid), &mut dw);
            let wp = i * path_len + k * d;
            for c in 0..d {
                ens.w[wp + d + c] = ens.w[wp + c] + dw[c];
                let s = cur[lo + c] + (buf[c] + drift_i[c]) * grid.dt() + dw[c];
                if !s.is_finite() {
                    return Err(SimError::NonFinite {
                        step: k,
                        what: format!("particle {i} coordinate {c}"),
                    });
                }
                cur[lo + c] = s;
            }
        }
    }
    Ok(ens)
}

#[inline]
fn sqrt_dt_of(grid: TimeGrid) -> f64 {
    grid.dt().sqrt()
}

/// Mean-field reference ensemble: one large self-interacting system whose
/// empirical flow stands in for μ^α_t, optionally refined by re-simulating
/// against the frozen previous flow (Picard iteration, same driving noise).
pub fn simulate_reference(
    spec: &LinearModelSpec,
    m_ref_per_type: usize,
    grid: TimeGrid,
    seed: u64,
    picard_iters: usize,
) -> Result<ReferenceEnsemble, SimError> {
    if m_ref_per_type < 2 {
        return Err(SimError::ReferenceTooSmall);
    }
    let counts = vec![m_ref_per_type; spec.k()];
    let layout = PopulationLayout::from_counts(counts)?;
    let mut ens = simulate_linear(spec, &layout, grid, seed, FlowSource::Live)?;
    for _ in 0..picard_iters {
        let flow = FlowTable::from_ensemble(&ens);
        ens = simulate_linear(spec, &layout, grid, seed, FlowSource::Frozen(&flow, None))?;
    }
    let flow = FlowTable::from_ensemble(&ens);
    Ok(ReferenceEnsemble {
        ensemble: ens,
        flow,
        picard_iters,
    })
}

// ---------------------------------------------------------------------------
// Common-factor engines
// ---------------------------------------------------------------------------

enum FactorSource<'a> {
    /// Simulate the factor jointly with the particles (live empirical flow).
    Joint,
    /// Use a stored factor path and a frozen flow (conditional draws).
    Frozen(&'a FactorRecord, &'a FlowTable),
}

fn simulate_common(
    spec: &CommonFactorModelSpec,
    layout: &PopulationLayout,
    grid: TimeGrid,
    seeds: SeedPair,
    source: FactorSource<'_>,
) -> Result<PathEnsemble, SimError> {
    spec.validate()?;
    if spec.k() != layout.k() {
        return Err(SimError::LayoutMismatch {
            layout_k: layout.k(),
            spec_k: spec.k(),
        });
    }
    let d = spec.dim;
    let m = spec.factor_dim;
    let k_types = layout.k();
    let n = layout.n_total();
    let n_steps = grid.steps;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut ens = PathEnsemble::alloc(grid, layout.clone(), d, seeds.particles);
    let root = CounterRng::from_seed(seeds.particles);

    let mut cur = vec![0.0; n * d];
    for alpha in 0..k_types {
        for i in layout.range(alpha) {
            let mut rng = root.substream(StreamTag::Initial, i as u64);
            spec.initial[alpha].sample_into(&mut rng, &mut cur[i * d..(i + 1) * d]);
        }
    }
    let mut streams: Vec<CounterRng> = (0..n)
        .map(|i| root.substream(StreamTag::Particle, i as u64))
        .collect();

    // Factor path: either simulated jointly (seeded by the factor seed
    // alone) or replayed from a stored record.
    let (mut factor_record, mut factor_rng) = match &source {
        FactorSource::Joint => {
            let mut fr = FactorRecord {
                dim: m,
                w: vec![0.0; grid.points() * m],
                y: vec![0.0; grid.points() * m],
                seed: seeds.factor,
            };
            let mut frng = CounterRng::from_seed(seeds.factor).substream(StreamTag::Factor, 0);
            let mut y0 = vec![0.0; m];
            spec.factor_initial.sample_into(&mut frng, &mut y0);
            fr.y[..m].copy_from_slice(&y0);
            (fr, Some(frng))
        }
        FactorSource::Frozen(fr, flow) => {
            if fr.w.len() != grid.points() * m || flow.points != grid.points() {
                return Err(SimError::GridMismatch);
            }
            ((*fr).clone(), None)
        }
    };

    let path_len = ens.path_len();
    let mut ucur = factor_record.y[..m].to_vec();
    let mut drift_buf = vec![0.0; d];
    let mut fdrift = vec![0.0; m];
    let mut fdiff = vec![0.0; m];
    let mut dwbar = vec![0.0; m];
    let mut dw = vec![0.0; d];

    for k in 0..=n_steps {
        for i in 0..n {
            let dst = i * path_len + k * d;
            ens.x[dst..dst + d].copy_from_slice(&cur[i * d..(i + 1) * d]);
        }
        if factor_rng.is_some() {
            factor_record.y[k * m..(k + 1) * m].copy_from_slice(&ucur);
        }
        if k == n_steps {
            break;
        }

        // Per-type measure views at the left endpoint.
        let live_views: Vec<StatesView<'_>>;
        let frozen_views: Vec<StatesView<'_>>;
        let views: &[StatesView<'_>] = match &source {
            FactorSource::Joint => {
                live_views = (0..k_types)
                    .map(|a| {
                        let r = layout.range(a);
                        StatesView {
                            data: &cur[r.start * d..r.end * d],
                            dim: d,
                        }
                    })
                    .collect();
                &live_views
            }
            FactorSource::Frozen(_, flow) => {
                frozen_views = flow.all_views(k);
                &frozen_views
            }
        };
        let y_left: Vec<f64> = match &source {
            FactorSource::Joint => ucur.clone(),
            FactorSource::Frozen(fr, _) => fr.y_at(k).to_vec(),
        };

        let drift_means: Vec<Vec<f64>> = spec
            .particle_drifts
            .iter()
            .map(|pd| pd.measure_means(views))
            .collect();
        let factor_drift_means = spec.factor_drift.measure_means(views);
        let factor_diff_means: Vec<Vec<f64>> = spec
            .factor_diffusion
            .iter()
            .map(|col| col.measure_means(views))
            .collect();

        for alpha in 0..k_types {
            let pd = &spec.particle_drifts[alpha];
            for i in layout.range(alpha) {
                let (lo, hi) = (i * d, (i + 1) * d);
                pd.eval_with_means(&cur[lo..hi], &y_left, &drift_means[alpha], &mut drift_buf);
                streams[i].fill_normal(sqrt_dt, &mut dw);
                let wp = i * path_len + k * d;
                for c in 0..d {
                    ens.w[wp + d + c] = ens.w[wp + c] + dw[c];
                    let s = cur[lo + c] + drift_buf[c] * dt + dw[c];
                    if !s.is_finite() {
                        return Err(SimError::NonFinite {
                            step: k,
                            what: format!("particle {i} coordinate {c}"),
                        });
                    }
                    cur[lo + c] = s;
                }
            }
        }

        // Factor update (joint mode only; frozen mode replays the record).
        if let Some(frng) = factor_rng.as_mut() {
            spec.factor_drift
                .eval_with_means(&ucur, &factor_drift_means, &mut fdrift);
            frng.fill_normal(sqrt_dt, &mut dwbar);
            let wk = k * m;
            for c in 0..m {
                factor_record.w[wk + m + c] = factor_record.w[wk + c] + dwbar[c];
            }
            let mut unew = ucur.clone();
            for (c, v) in unew.iter_mut().enumerate() {
                *v += fdrift[c] * dt;
            }
            for (kk, col) in spec.factor_diffusion.iter().enumerate() {
                col.eval_with_means(&ucur, &factor_diff_means[kk], &mut fdiff);
                for c in 0..m {
                    unew[c] += fdiff[c] * dwbar[kk];
                }
            }
            for (c, &v) in unew.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SimError::NonFinite {
                        step: k,
                        what: format!("factor coordinate {c}"),
                    });
                }
                ucur[c] = v;
            }
        }
    }
    ens.factor = Some(factor_record);
    Ok(ens)
}

/// Joint Euler–Maruyama of particles and common factor; the per-type live
/// empirical vector enters every drift, the factor follows its own SDE.
pub fn simulate_common_factor_interacting(
    spec: &CommonFactorModelSpec,
    layout: &PopulationLayout,
    grid: TimeGrid,
    seeds: SeedPair,
) -> Result<PathEnsemble, SimError> {
    simulate_common(spec, layout, grid, seeds, FactorSource::Joint)
}

/// Conditional reference ensemble for one factor draw: particles are
/// conditionally independent given (Y_0, W̄); the coupled system is simulated
/// with the plug-in empirical flow, so the stored flow approximates the
/// conditional law ρ_α(ω̄,·) and its time marginals.
pub fn simulate_conditional_reference(
    spec: &CommonFactorModelSpec,
    factor_seed: u64,
    m_ref_per_type: usize,
    grid: TimeGrid,
    particle_seed: u64,
    picard_iters: usize,
) -> Result<ReferenceEnsemble, SimError> {
    if m_ref_per_type < 2 {
        return Err(SimError::ReferenceTooSmall);
    }
    let counts = vec![m_ref_per_type; spec.k()];
    let layout = PopulationLayout::from_counts(counts)?;
    let seeds = SeedPair {
        particles: particle_seed,
        factor: factor_seed,
    };
    let mut ens = simulate_common(spec, &layout, grid, seeds, FactorSource::Joint)?;
    for _ in 0..picard_iters {
        let flow = FlowTable::from_ensemble(&ens);
        let factor = ens.factor.clone().expect("factor present");
        ens = simulate_common(
            spec,
            &layout,
            grid,
            seeds,
            FactorSource::Frozen(&factor, &flow),
        )?;
    }
    let flow = FlowTable::from_ensemble(&ens);
    Ok(ReferenceEnsemble {
        ensemble: ens,
        flow,
        picard_iters,
    })
}

/// Fresh conditionally independent particles for a stored factor draw: the
/// factor path and flow are frozen from `cond`, the particle noise comes
/// from `seed`.
pub fn simulate_conditional_against_flow(
    spec: &CommonFactorModelSpec,
    counts: &[usize],
    grid: TimeGrid,
    seed: u64,
    cond: &ReferenceEnsemble,
) -> Result<PathEnsemble, SimError> {
    let layout = PopulationLayout::from_counts(counts.to_vec())?;
    let factor = cond
        .ensemble
        .factor
        .as_ref()
        .ok_or(SimError::GridMismatch)?;
    let seeds = SeedPair {
        particles: seed,
        factor: factor.seed,
    };
    simulate_common(
        spec,
        &layout,
        grid,
        seeds,
        FactorSource::Frozen(factor, &cond.flow),
    )
}

/// `count` fresh conditionally independent particles of a single type
/// `alpha` for a stored factor draw.
pub fn simulate_conditional_type_against_flow(
    spec: &CommonFactorModelSpec,
    alpha: usize,
    count: usize,
    grid: TimeGrid,
    seed: u64,
    cond: &ReferenceEnsemble,
) -> Result<PathEnsemble, SimError> {
    spec.validate()?;
    let factor = cond
        .ensemble
        .factor
        .as_ref()
        .ok_or(SimError::GridMismatch)?;
    if factor.w.len() != grid.points() * spec.factor_dim || cond.flow.points != grid.points() {
        return Err(SimError::GridMismatch);
    }
    let d = spec.dim;
    let layout = PopulationLayout::from_counts(vec![count])?;
    let mut ens = PathEnsemble::alloc(grid, layout, d, seed);
    let root = CounterRng::from_seed(seed);
    let mut cur = vec![0.0; count * d];
    for i in 0..count {
        let mut rng = root.substream(StreamTag::Initial, i as u64);
        spec.initial[alpha].sample_into(&mut rng, &mut cur[i * d..(i + 1) * d]);
    }
    let mut streams: Vec<CounterRng> = (0..count)
        .map(|i| root.substream(StreamTag::Particle, i as u64))
        .collect();
    let path_len = ens.path_len();
    let pd = &spec.particle_drifts[alpha];
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut drift_buf = vec![0.0; d];
    let mut dw = vec![0.0; d];
    for k in 0..=grid.steps {
        for i in 0..count {
            let dst = i * path_len + k * d;
            ens.x[dst..dst + d].copy_from_slice(&cur[i * d..(i + 1) * d]);
        }
        if k == grid.steps {
            break;
        }
        let views = cond.flow.all_views(k);
        let means = pd.measure_means(&views);
        let y = factor.y_at(k);
        for i in 0..count {
            let (lo, hi) = (i * d, (i + 1) * d);
            pd.eval_with_means(&cur[lo..hi], y, &means, &mut drift_buf);
            streams[i].fill_normal(sqrt_dt, &mut dw);
            let wp = i * path_len + k * d;
            for c in 0..d {
                ens.w[wp + d + c] = ens.w[wp + c] + dw[c];
                let s = cur[lo + c] + drift_buf[c] * dt + dw[c];
                if !s.is_finite() {
                    return Err(SimError::NonFinite {
                        step: k,
                        what: format!("particle {i} coordinate {c}"),
                    });
                }
                cur[lo + c] = s;
            }
        }
    }
    ens.factor = Some(factor.clone());
    Ok(ens)
}

// ---------------------------------------------------------------------------
// Fundamental solution and s_{γ,t}
// ---------------------------------------------------------------------------

/// Pathwise fundamental solution Φ_t of the linearized factor SDE and its
/// inverse Ψ_t, both m×m per grid point. Ψ is simulated from its own SDE
/// (with the Itô correction term), not obtained by matrix inversion; the
/// inversion residual is a diagnostic.
#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    pub m: usize,
    /// (n+1) row-major m×m matrices.
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl FundamentalSolution {
    #[inline]
    pub fn phi_at(&self, k: usize) -> &[f64] {
        &self.phi[k * self.m * self.m..(k + 1) * self.m * self.m]
    }

    #[inline]
    pub fn psi_at(&self, k: usize) -> &[f64] {
        &self.psi[k * self.m * self.m..(k + 1) * self.m * self.m]
    }

    /// max_k ‖Ψ_k Φ_k − I‖_F.
    pub fn max_inverse_residual(&self) -> f64 {
        let m = self.m;
        let points = self.phi.len() / (m * m);
        let mut worst = 0.0f64;
        let mut prod = vec![0.0; m * m];
        for k in 0..points {
            mat_mul(self.psi_at(k), self.phi_at(k), m, &mut prod);
            let mut acc = 0.0;
            for i in 0..m {
                for j in 0..m {
                    let e = prod[i * m + j] - if i == j { 1.0 } else { 0.0 };
                    acc += e * e;
                }
            }
            worst = worst.max(acc.sqrt());
        }
        worst
    }
}

#[inline]
fn mat_mul(a: &[f64], b: &[f64], m: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for l in 0..m {
            let ail = a[i * m + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += ail * b[l * m + j];
            }
        }
    }
}

#[inline]
fn mat_vec(a: &[f64], v: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += a[i * m + j] * v[j];
        }
        out[i] = acc;
    }
}

/// Euler–Maruyama for Φ and Ψ along a conditional reference draw, with
/// coefficients A_s = b̄_(1)(R_s) and F^k_s = σ̄_{k,(1)}(R_s).
pub fn fundamental_solution(
    spec: &CommonFactorModelSpec,
    cond: &ReferenceEnsemble,
) -> Result<FundamentalSolution, SimError> {
    let m = spec.factor_dim;
    let grid = cond.ensemble.grid;
    let factor = cond
        .ensemble
        .factor
        .as_ref()
        .ok_or(SimError::GridMismatch)?;
    let points = grid.points();
    let dt = grid.dt();
    let mm = m * m;
    let mut phi = vec![0.0; points * mm];
    let mut psi = vec![0.0; points * mm];
    for i in 0..m {
        phi[i * m + i] = 1.0;
        psi[i * m + i] = 1.0;
    }
    let mut a = vec![0.0; mm];
    let mut f = vec![vec![0.0; mm]; m];
    let mut tmp = vec![0.0; mm];
    let mut tmp2 = vec![0.0; mm];
    for k in 0..grid.steps {
        let y = factor.y_at(k);
        spec.factor_drift.jacobian_into(y, &mut a);
        for (kk, col) in spec.factor_diffusion.iter().enumerate() {
            col.jacobian_into(y, &mut f[kk]);
        }
        let dwbar: Vec<f64> = (0..m)
            .map(|c| factor.w[(k + 1) * m + c] - factor.w[k * m + c])
            .collect();
        let (cur_off, next_off) = (k * mm, (k + 1) * mm);
        // Φ_{k+1} = Φ_k + A Φ_k dt + Σ F^j Φ_k dW̄^j
        let phik = phi[cur_off..cur_off + mm].to_vec();
        mat_mul(&a, &phik, m, &mut tmp);
        let mut next: Vec<f64> = (0..mm).map(|i| phik[i] + tmp[i] * dt).collect();
        for (j, fj) in f.iter().enumerate() {
            mat_mul(fj, &phik, m, &mut tmp);
            for i in 0..mm {
                next[i] += tmp[i] * dwbar[j];
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                step: k,
                what: "fundamental solution".into(),
            });
        }
        phi[next_off..next_off + mm].copy_from_slice(&next);
        // Ψ_{k+1} = Ψ_k − Ψ_k A dt − Σ Ψ_k F^j dW̄^j + Σ Ψ_k (F^j)² dt
        let psik = psi[cur_off..cur_off + mm].to_vec();
        mat_mul(&psik, &a, m, &mut tmp);
        let mut nextp: Vec<f64> = (0..mm).map(|i| psik[i] - tmp[i] * dt).collect();
        for (j, fj) in f.iter().enumerate() {
            mat_mul(&psik, fj, m, &mut tmp);
            for i in 0..mm {
                nextp[i] -= tmp[i] * dwbar[j];
            }
            mat_mul(&tmp, fj, m, &mut tmp2);
            for i in 0..mm {
                nextp[i] += tmp2[i] * dt;
            }
        }
        if nextp.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                step: k,
                what: "inverse fundamental solution".into(),
            });
        }
        psi[next_off..next_off + mm].copy_from_slice(&nextp);
    }
    Ok(FundamentalSolution { m, phi, psi })
}

/// Precomputed per-step data for evaluating s_{γ,t} on many particle paths:
/// flow-centering means of the (2)-kernels, diffusion Jacobians and factor
/// increments.
pub struct SGammaContext<'a> {
    spec: &'a CommonFactorModelSpec,
    fund: &'a FundamentalSolution,
    gamma: usize,
    /// ⟨b̄_{(2),γ}(R_k, ·), ν_γ,k⟩ per step.
    bbar_means: Vec<f64>,
    /// ⟨σ̄_{j,(2),γ}(R_k, ·), ν_γ,k⟩ per step, per diffusion column.
    sig_means: Vec<Vec<f64>>,
    /// σ̄_{j,(1)}(R_k) per step per column (m×m).
    sig_jac: Vec<Vec<f64>>,
    dwbar: Vec<f64>,
    grid: TimeGrid,
}

/// Build the shared context for type `gamma`.
pub fn s_gamma_context<'a>(
    spec: &'a CommonFactorModelSpec,
    fund: &'a FundamentalSolution,
    cond: &ReferenceEnsemble,
    gamma: usize,
) -> Result<SGammaContext<'a>, SimError> {
    let m = spec.factor_dim;
    let grid = cond.ensemble.grid;
    let factor = cond
        .ensemble
        .factor
        .as_ref()
        .ok_or(SimError::GridMismatch)?;
    let steps = grid.steps;
    let mut bbar_means = vec![0.0; steps * m];
    let mut sig_means = vec![vec![0.0; steps * m]; m];
    let mut sig_jac = vec![vec![0.0; steps * m * m]; m];
    let mut buf = vec![0.0; m];
    for k in 0..steps {
        let nu = cond.flow.states(gamma, k);
        let inv = 1.0 / nu.count() as f64;
        for j in 0..nu.count() {
            spec.factor_drift
                .measure_kernel_into(gamma, nu.state(j), &mut buf);
            for c in 0..m {
                bbar_means[k * m + c] += inv * buf[c];
            }
            for (cc, col) in spec.factor_diffusion.iter().enumerate() {
                col.measure_kernel_into(gamma, nu.state(j), &mut buf);
                for c in 0..m {
                    sig_means[cc][k * m + c] += inv * buf[c];
                }
            }
        }
        let y = factor.y_at(k);
        for (cc, col) in spec.factor_diffusion.iter().enumerate() {
            col.jacobian_into(y, &mut sig_jac[cc][k * m * m..(k + 1) * m * m]);
        }
    }
    let mut dwbar = vec![0.0; steps * m];
    for k in 0..steps {
        for c in 0..m {
            dwbar[k * m + c] = factor.w[(k + 1) * m + c] - factor.w[k * m + c];
        }
    }
    Ok(SGammaContext {
        spec,
        fund,
        gamma,
        bbar_means,
        sig_means,
        sig_jac,
        dwbar,
        grid,
    })
}

/// Evaluate t ↦ s_{γ,t}(x_path, D) on the grid: Φ_t times the left-endpoint
/// Itô/time sums of Ψ_s against the flow-centered (2)-kernels.
pub fn s_gamma_path_with(ctx: &SGammaContext<'_>, x_path: PathView<'_>) -> Vec<f64> {
    let m = ctx.spec.factor_dim;
    let steps = ctx.grid.steps;
    let dt = ctx.grid.dt();
    let mut out = vec![0.0; (steps + 1) * m];
    let mut acc = vec![0.0; m];
    let mut term = vec![0.0; m];
    let mut cterm = vec![0.0; m];
    let mut psummed = vec![0.0; m];
    let mut jacprod = vec![0.0; m];
    for k in 0..steps {
        // s at grid index k uses sums over l < k; emit before accumulating.
        let phik = ctx.fund.phi_at(k);
        mat_vec(phik, &acc, m, &mut term);
        out[k * m..(k + 1) * m].copy_from_slice(&term);

        let xk = x_path.point(k);
        let psik = ctx.fund.psi_at(k);
        // b̄^c_{(2),γ}(R_k, X_k) dt
        ctx.spec
            .factor_drift
            .measure_kernel_into(ctx.gamma, xk, &mut cterm);
        for c in 0..m {
            cterm[c] -= ctx.bbar_means[k * m + c];
        }
        mat_vec(psik, &cterm, m, &mut psummed);
        for c in 0..m {
            acc[c] += psummed[c] * dt;
        }
        for (cc, col) in ctx.spec.factor_diffusion.iter().enumerate() {
            col.measure_kernel_into(ctx.gamma, xk, &mut cterm);
            for c in 0..m {
                cterm[c] -= ctx.sig_means[cc][k * m + c];
            }
            // + Ψ σ̄^c dW̄ − Ψ σ̄_{(1)} σ̄^c dt
            let jac = &ctx.sig_jac[cc][k * m * m..(k + 1) * m * m];
            mat_vec(jac, &cterm, m, &mut jacprod);
            mat_vec(psik, &cterm, m, &mut psummed);
            let dw = ctx.dwbar[k * m + cc];
            for c in 0..m {
                acc[c] += psummed[c] * dw;
            }
            mat_vec(psik, &jacprod, m, &mut psummed);
            for c in 0..m {
                acc[c] -= psummed[c] * dt;
            }
        }
    }
    let phin = ctx.fund.phi_at(steps);
    mat_vec(phin, &acc, m, &mut term);
    out[steps * m..(steps + 1) * m].copy_from_slice(&term);
    out
}

/// One-shot convenience wrapper around [`s_gamma_context`] and
/// [`s_gamma_path_with`].
pub fn s_gamma_path(
    spec: &CommonFactorModelSpec,
    fund: &FundamentalSolution,
    x_path: PathView<'_>,
    cond: &ReferenceEnsemble,
    gamma: usize,
) -> Result<Vec<f64>, SimError> {
    let ctx = s_gamma_context(spec, fund, cond, gamma)?;
    Ok(s_gamma_path_with(&ctx, x_path))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MFEN";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64_vec(r: &mut impl Read, len: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Columnar binary layout: header (dims, grid, layout, seeds), then the W
/// block and the X block, both particle-major then time-major, then the
/// factor record when present. All floats little-endian f64.
pub fn write_ensemble_binary(ens: &PathEnsemble, w: &mut impl Write) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_u64(w, ens.dim as u64)?;
    write_f64(w, ens.grid.horizon)?;
    write_u64(w, ens.grid.steps as u64)?;
    write_u64(w, ens.layout.k() as u64)?;
    for &c in ens.layout.counts() {
        write_u64(w, c as u64)?;
    }
    for &lw in ens.layout.weights() {
        write_f64(w, lw)?;
    }
    write_u64(w, ens.seed)?;
    write_u64(w, u64::from(ens.factor.is_some()))?;
    write_f64_slice(w, &ens.w)?;
    write_f64_slice(w, &ens.x)?;
    if let Some(f) = &ens.factor {
        write_u64(w, f.dim as u64)?;
        write_u64(w, f.seed)?;
        write_f64_slice(w, &f.w)?;
        write_f64_slice(w, &f.y)?;
    }
    Ok(())
}

pub fn read_ensemble_binary(r: &mut impl Read) -> Result<PathEnsemble, SimError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SimError::Corrupt("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    if u32::from_le_bytes(vb) != VERSION {
        return Err(SimError::Corrupt("unsupported version".into()));
    }
    let dim = read_u64(r)? as usize;
    let horizon = read_f64(r)?;
    let steps = read_u64(r)? as usize;
    let k = read_u64(r)? as usize;
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push(read_u64(r)? as usize);
    }
    let mut _weights = Vec::with_capacity(k);
    for _ in 0..k {
        _weights.push(read_f64(r)?);
    }
    let seed = read_u64(r)?;
    let has_factor = read_u64(r)? != 0;
    let layout =
        PopulationLayout::from_counts(counts).map_err(|e| SimError::Corrupt(e.to_string()))?;
    let grid = TimeGrid::new(horizon, steps).map_err(|e| SimError::Corrupt(e.to_string()))?;
    let n = layout.n_total() * grid.points() * dim;
    let w = read_f64_vec(r, n)?;
    let x = read_f64_vec(r, n)?;
    let factor = if has_factor {
        let fdim = read_u64(r)? as usize;
        let fseed = read_u64(r)?;
        let fw = read_f64_vec(r, grid.points() * fdim)?;
        let fy = read_f64_vec(r, grid.points() * fdim)?;
        Some(FactorRecord {
            dim: fdim,
            w: fw,
            y: fy,
            seed: fseed,
        })
    } else {
        None
    };
    Ok(PathEnsemble {
        grid,
        layout,
        dim,
        w,
        x,
        factor,
        seed,
    })
}

/// Small-run CSV dump: one row per (particle, grid point).
pub fn write_ensemble_csv(ens: &PathEnsemble, w: &mut impl Write) -> io::Result<()> {
    write!(w, "particle,type,time")?;
    for c in 0..ens.dim {
        write!(w, ",w{}", c + 1)?;
    }
    for c in 0..ens.dim {
        write!(w, ",x{}", c + 1)?;
    }
    writeln!(w)?;
    for i in 0..ens.n_particles() {
        let alpha = ens.layout.type_of(i);
        let wp = ens.w_path(i);
        let xp = ens.x_path(i);
        for k in 0..ens.grid.points() {
            write!(w, "{},{},{}", i, alpha, ens.grid.time(k))?;
            for v in wp.point(k) {
                write!(w, ",{v}")?;
            }
            for v in xp.point(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::model::{
        CommonFactorModelSpec, FactorCoeff, FactorTerm, InitialLaw, ParticleDrift, Scalar1,
    };

    /// Single-type toy: b(x,y,ν) = 0.6·tanh(y), b̄(y) = −0.5·tanh(y),
    /// σ̄ = 0.8 constant.
    pub fn toy_common_spec() -> CommonFactorModelSpec {
        CommonFactorModelSpec {
            dim: 1,
            factor_dim: 1,
            particle_drifts: vec![ParticleDrift {
                own: None,
                factor: Some(FactorTerm::diagonal(
                    1,
                    0.6,
                    Scalar1::Tanh {
                        amp: 1.0,
                        scale: 1.0,
                    },
                )),
                measure: vec![],
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
            bound: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Drift, FactorCoeff, FactorTerm, InitialLaw, PairKernel, Scalar1};

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 50).unwrap()
    }

    #[test]
    fn zero_drift_is_exact() {
        let spec = LinearModelSpec::zero(2, 2);
        let layout = PopulationLayout::from_counts(vec![3, 4]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 42).unwrap();
        for i in 0..7 {
            let wp = ens.w_path(i);
            let xp = ens.x_path(i);
            assert_eq!(wp.point(0), &[0.0, 0.0]);
            for k in 0..=50 {
                assert_eq!(wp.point(k), xp.point(k), "particle {i} step {k}");
            }
        }
    }

    #[test]
    fn constant_kernel_is_exact() {
        // b_{αγ} ≡ c for all pairs: drift is K·c, exactly integrated.
        let c = 0.7;
        let k_types = 2;
        let spec = LinearModelSpec {
            dim: 1,
            drifts: vec![Drift::Zero; k_types],
            kernels: vec![PairKernel::Const(vec![c]); k_types * k_types],
            initial: vec![InitialLaw::origin(1); k_types],
            bound: c,
        };
        let layout = PopulationLayout::from_counts(vec![5, 5]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 1).unwrap();
        let dt = ens.grid.dt();
        for i in 0..10 {
            let wp = ens.w_path(i);
            let xp = ens.x_path(i);
            for k in 0..=50 {
                let expect = wp.point(k)[0] + k_types as f64 * c * dt * k as f64;
                assert!(
                    (xp.point(k)[0] - expect).abs() < 1e-12,
                    "step {k}: {} vs {expect}",
                    xp.point(k)[0]
                );
            }
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = LinearModelSpec::example31(Scalar1::sin(), 0.5);
        let layout = PopulationLayout::from_counts(vec![6, 6]).unwrap();
        let a = simulate_interacting(&spec, &layout, grid(), 9).unwrap();
        let b = simulate_interacting(&spec, &layout, grid(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn brownian_increment_moments() {
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![2000]).unwrap();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let ens = simulate_interacting(&spec, &layout, g, 4).unwrap();
        let dt = g.dt();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut count = 0usize;
        for i in 0..2000 {
            let wp = ens.w_path(i);
            for k in 0..10 {
                let inc = wp.point(k + 1)[0] - wp.point(k)[0];
                sum += inc;
                sum2 += inc * inc;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum2 / count as f64;
        assert!(mean.abs() < 3.0 * (dt / count as f64).sqrt());
        assert!((var - dt).abs() < 3.0 * dt * (2.0f64 / count as f64).sqrt());
    }

    #[test]
    fn weak_error_polynomial_moments() {
        // b ≡ 0: Z_T = W_T exactly, so E[Z_T²] = T and E[Z_T⁴] = 3T²
        // within Monte Carlo error.
        let spec = LinearModelSpec::zero(1, 1);
        let layout = PopulationLayout::from_counts(vec![8000]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 33).unwrap();
        let xs: Vec<f64> = (0..8000).map(|i| ens.x_path(i).terminal()[0]).collect();
        let n = xs.len() as f64;
        let m2 = xs.iter().map(|x| x * x).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / n;
        let se2 = (xs.iter().map(|x| x.powi(4)).sum::<f64>() / n - m2 * m2).sqrt() / n.sqrt();
        let se4 = (xs.iter().map(|x| x.powi(8)).sum::<f64>() / n - m4 * m4).sqrt() / n.sqrt();
        assert!((m2 - 1.0).abs() < 3.0 * se2, "E Z_T² = {m2}");
        assert!((m4 - 3.0).abs() < 3.0 * se4, "E Z_T⁴ = {m4}");
    }

    #[test]
    fn conditional_particles_are_uncorrelated_given_factor() {
        // With the factor path frozen and no measure coupling, particles
        // from disjoint seed streams are conditionally independent: the
        // empirical cross-correlation of terminal states over pairs stays
        // within 3 SE of 0.
        let spec = toy_common_spec();
        let cond = simulate_conditional_reference(&spec, 8, 4000, grid(), 3, 0).unwrap();
        let xs: Vec<f64> = (0..4000)
            .map(|i| cond.ensemble.x_path(i).terminal()[0])
            .collect();
        let pairs = 2000;
        let a: Vec<f64> = (0..pairs).map(|i| xs[2 * i]).collect();
        let b: Vec<f64> = (0..pairs).map(|i| xs[2 * i + 1]).collect();
        let cov = crate::statistics::covariance(&a, &b);
        let va = crate::statistics::variance(&a);
        let vb = crate::statistics::variance(&b);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 3.0 / (pairs as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn reference_flow_variance_matches_brownian() {
        // b ≡ 0: particles are X_0 + W; flow marginal variance at T ≈ Var(X_0) + T.
        let mut spec = LinearModelSpec::zero(1, 1);
        spec.initial = vec![InitialLaw::Gaussian {
            mean: vec![0.0],
            sd: 0.5,
        }];
        let r = simulate_reference(&spec, 4000, grid(), 12, 0).unwrap();
        let sv = r.flow.states(0, 50);
        let n = sv.count() as f64;
        let mean: f64 = sv.iter().map(|s| s[0]).sum::<f64>() / n;
        let var: f64 = sv.iter().map(|s| (s[0] - mean) * (s[0] - mean)).sum::<f64>() / n;
        let target = 0.25 + 1.0;
        let se = target * (2.0f64 / n).sqrt();
        assert!((var - target).abs() < 3.0 * se, "var {var} vs {target}");
    }

    #[test]
    fn picard_zero_equals_interacting() {
        let spec = LinearModelSpec::example31(Scalar1::sin(), 0.5);
        let r = simulate_reference(&spec, 50, grid(), 3, 0).unwrap();
        let layout = PopulationLayout::from_counts(vec![50, 50]).unwrap();
        let direct = simulate_interacting(&spec, &layout, grid(), 3).unwrap();
        assert_eq!(r.ensemble, direct);
    }

    #[test]
    fn example31_flow_mean_stays_near_zero() {
        // sin is odd and the limit flow is symmetric, so ⟨sin, μ_t⟩ ≈ 0 and
        // the flow mean stays near 0 (3 SE band, SE ≈ √(t/M)).
        let spec = LinearModelSpec::example31(Scalar1::sin(), 0.5);
        let r = simulate_reference(&spec, 3000, grid(), 7, 0).unwrap();
        for k in [10, 25, 50] {
            let mut mean = 0.0;
            let mut count = 0.0;
            for a in 0..2 {
                let sv = r.flow.states(a, k);
                for s in sv.iter() {
                    mean += s[0];
                    count += 1.0;
                }
            }
            mean /= count;
            let t = r.ensemble.grid.time(k);
            let se = (t / count).sqrt();
            assert!(mean.abs() < 3.5 * se, "k={k}: mean {mean}, se {se}");
        }
    }

    fn decoupled_common_spec() -> CommonFactorModelSpec {
        CommonFactorModelSpec {
            dim: 1,
            factor_dim: 1,
            particle_drifts: vec![crate::model::ParticleDrift::zero()],
            factor_drift: FactorCoeff::zero(1),
            factor_diffusion: CommonFactorModelSpec::identity_diffusion(1),
            initial: vec![InitialLaw::origin(1)],
            factor_initial: InitialLaw::origin(1),
            bound: 1.0,
        }
    }

    #[test]
    fn decoupled_common_factor_is_exact() {
        let spec = decoupled_common_spec();
        let layout = PopulationLayout::from_counts(vec![5]).unwrap();
        let seeds = SeedPair {
            particles: 4,
            factor: 5,
        };
        let ens = simulate_common_factor_interacting(&spec, &layout, grid(), seeds).unwrap();
        let f = ens.factor.as_ref().unwrap();
        for k in 0..=50 {
            assert_eq!(f.y_at(k)[0], f.w_at(k)[0], "U = U_0 + W̄ exactly");
        }
        for i in 0..5 {
            assert_eq!(ens.w_path(i).point(50), ens.x_path(i).point(50));
        }
    }

    #[test]
    fn deterministic_factor_ode_order() {
        // σ̄ ≡ 0, b̄(y) = a·tanh(y): compare the factor path against a
        // fine-grid integration of the same ODE; error should halve with Δt.
        let a = 0.4;
        let mut spec = decoupled_common_spec();
        spec.factor_drift = FactorCoeff {
            constant: vec![0.0],
            factor: Some(FactorTerm::diagonal(
                1,
                a,
                Scalar1::Tanh {
                    amp: 1.0,
                    scale: 1.0,
                },
            )),
            measure: vec![],
        };
        spec.factor_diffusion = vec![FactorCoeff::zero(1)];
        spec.factor_initial = InitialLaw::Point(vec![0.3]);
        let layout = PopulationLayout::from_counts(vec![2]).unwrap();
        let seeds = SeedPair {
            particles: 1,
            factor: 2,
        };
        let mut errs = Vec::new();
        for steps in [25usize, 50, 100] {
            let g = TimeGrid::new(1.0, steps).unwrap();
            let ens = simulate_common_factor_interacting(&spec, &layout, g, seeds).unwrap();
            let yt = ens.factor.as_ref().unwrap().y_at(steps)[0];
            let fine = 200_000usize;
            let dt = 1.0 / fine as f64;
            let mut y = 0.3f64;
            for _ in 0..fine {
                y += a * y.tanh() * dt;
            }
            errs.push((yt - y).abs());
        }
        assert!(errs[0] > 1.5 * errs[1], "{errs:?}");
        assert!(errs[1] > 1.5 * errs[2], "{errs:?}");
    }

    #[test]
    fn conditional_reference_shares_factor_path() {
        let spec = toy_common_spec();
        let a = simulate_conditional_reference(&spec, 77, 20, grid(), 1, 0).unwrap();
        let b = simulate_conditional_reference(&spec, 77, 20, grid(), 2, 0).unwrap();
        assert_eq!(
            a.ensemble.factor.as_ref().unwrap().w,
            b.ensemble.factor.as_ref().unwrap().w
        );
        assert_ne!(a.ensemble.x, b.ensemble.x);
        let c = simulate_conditional_reference(&spec, 77, 20, grid(), 1, 0).unwrap();
        assert_eq!(a.ensemble, c.ensemble);
    }

    use super::tests_support::toy_common_spec;

    #[test]
    fn conditional_law_gaussian_given_factor() {
        // b_α(x,y,ν) = g(y) only: X_t | Y ~ N(X_0 + ∫g(Y)ds, t); check the
        // empirical conditional variance at T and the conditional mean
        // against quadrature along the stored factor path.
        let spec = toy_common_spec();
        let cond = simulate_conditional_reference(&spec, 5, 3000, grid(), 6, 0).unwrap();
        let sv = cond.flow.states(0, 50);
        let n = sv.count() as f64;
        let mean: f64 = sv.iter().map(|s| s[0]).sum::<f64>() / n;
        let var: f64 = sv.iter().map(|s| (s[0] - mean) * (s[0] - mean)).sum::<f64>() / n;
        let se = 1.0 * (2.0f64 / n).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
        let f = cond.ensemble.factor.as_ref().unwrap();
        let dt = 0.02;
        let mut integral = 0.0;
        for k in 0..50 {
            integral += 0.6 * f.y_at(k)[0].tanh() * dt;
        }
        let se_mean = (1.0f64 / n).sqrt();
        assert!(
            (mean - integral).abs() < 3.5 * se_mean,
            "{mean} vs {integral}"
        );
    }

    #[test]
    fn fundamental_solution_identity_when_flat() {
        let spec = decoupled_common_spec();
        let cond = simulate_conditional_reference(&spec, 3, 10, grid(), 2, 0).unwrap();
        let fund = fundamental_solution(&spec, &cond).unwrap();
        for k in 0..=50 {
            assert_eq!(fund.phi_at(k), &[1.0]);
            assert_eq!(fund.psi_at(k), &[1.0]);
        }
        assert_eq!(fund.max_inverse_residual(), 0.0);
    }

    #[test]
    fn fundamental_solution_exponential_oracle() {
        // m=1, b̄_{(1)} ≡ a, σ̄_{(1)} ≡ 0: Φ_t ≈ e^{at}, O(Δt) global error.
        let a = 0.7;
        let mut spec = decoupled_common_spec();
        spec.factor_drift = FactorCoeff {
            constant: vec![0.0],
            factor: Some(FactorTerm::diagonal(1, a, Scalar1::Linear { slope: 1.0 })),
            measure: vec![],
        };
        spec.factor_diffusion = vec![FactorCoeff::zero(1)];
        let mut errs = Vec::new();
        for steps in [50usize, 100, 200] {
            let g = TimeGrid::new(1.0, steps).unwrap();
            let cond = simulate_conditional_reference(&spec, 3, 10, g, 2, 0).unwrap();
            let fund = fundamental_solution(&spec, &cond).unwrap();
            errs.push((fund.phi_at(steps)[0] - a.exp()).abs());
        }
        assert!(errs[0] > 1.5 * errs[1]);
        assert!(errs[1] > 1.5 * errs[2]);
    }

    #[test]
    fn psi_inverts_phi_at_rate_dt() {
        // Generic bounded coefficients with noise in the linearization.
        let mut spec = toy_common_spec();
        spec.factor_diffusion = vec![FactorCoeff {
            constant: vec![0.5],
            factor: Some(FactorTerm::diagonal(
                1,
                0.3,
                Scalar1::Tanh {
                    amp: 1.0,
                    scale: 1.0,
                },
            )),
            measure: vec![],
        }];
        let mut residuals = Vec::new();
        for steps in [25usize, 50, 100, 200] {
            let g = TimeGrid::new(1.0, steps).unwrap();
            let cond = simulate_conditional_reference(&spec, 11, 10, g, 2, 0).unwrap();
            let fund = fundamental_solution(&spec, &cond).unwrap();
            residuals.push(fund.max_inverse_residual());
        }
        assert!(
            residuals[0] > residuals[3],
            "residuals should shrink: {residuals:?}"
        );
        assert!(residuals[3] < 0.05, "{residuals:?}");
    }

    #[test]
    fn s_gamma_zero_kernels_vanish() {
        let spec = toy_common_spec();
        let cond = simulate_conditional_reference(&spec, 3, 10, grid(), 2, 0).unwrap();
        let fund = fundamental_solution(&spec, &cond).unwrap();
        let s = s_gamma_path(&spec, &fund, cond.ensemble.x_path(0), &cond, 0).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn s_gamma_matches_direct_quadrature() {
        // σ̄_{k,(2),γ} ≡ 0, b̄_{(2),γ}(r, x̃) = x̃, Φ ≡ 1 (no (1)-terms):
        // s_{γ,t} = ∫_0^t (X_s − flow mean_s) ds, recomputed independently
        // with a left-Riemann sum.
        let mut spec = decoupled_common_spec();
        spec.factor_drift = FactorCoeff {
            constant: vec![0.0],
            factor: None,
            measure: vec![crate::model::MeasureTerm {
                gamma: 0,
                coord: 0,
                probe: Scalar1::Linear { slope: 1.0 },
                direction: vec![1.0],
            }],
        };
        let cond = simulate_conditional_reference(&spec, 3, 50, grid(), 2, 0).unwrap();
        let fund = fundamental_solution(&spec, &cond).unwrap();
        let xp = cond.ensemble.x_path(7);
        let s = s_gamma_path(&spec, &fund, xp, &cond, 0).unwrap();
        let dt = cond.ensemble.grid.dt();
        let mut acc = 0.0;
        for k in 0..=50 {
            assert!((s[k] - acc).abs() < 1e-12, "k={k}: {} vs {acc}", s[k]);
            if k < 50 {
                let sv = cond.flow.states(0, k);
                let mean: f64 = sv.iter().map(|st| st[0]).sum::<f64>() / sv.count() as f64;
                acc += (xp.point(k)[0] - mean) * dt;
            }
        }
    }

    #[test]
    fn s_gamma_ensemble_average_is_zero() {
        // Averaging s_{γ,t} over the flow's own sample is exactly zero at
        // every grid point (empirical centering).
        let mut spec = toy_common_spec();
        spec.factor_drift.measure.push(crate::model::MeasureTerm {
            gamma: 0,
            coord: 0,
            probe: Scalar1::sin(),
            direction: vec![0.5],
        });
        let cond = simulate_conditional_reference(&spec, 3, 40, grid(), 2, 0).unwrap();
        let fund = fundamental_solution(&spec, &cond).unwrap();
        let ctx = s_gamma_context(&spec, &fund, &cond, 0).unwrap();
        let mut avg = vec![0.0; 51];
        for j in 0..40 {
            let s = s_gamma_path_with(&ctx, cond.ensemble.x_path(j));
            for k in 0..=50 {
                avg[k] += s[k] / 40.0;
            }
        }
        for (k, v) in avg.iter().enumerate() {
            assert!(v.abs() < 1e-10, "k={k}: {v}");
        }
    }

    #[test]
    fn binary_roundtrip() {
        let spec = LinearModelSpec::example31(Scalar1::sin(), 0.5);
        let layout = PopulationLayout::from_counts(vec![3, 2]).unwrap();
        let ens = simulate_interacting(&spec, &layout, grid(), 21).unwrap();
        let mut buf = Vec::new();
        write_ensemble_binary(&ens, &mut buf).unwrap();
        let back = read_ensemble_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(ens, back);
    }

    #[test]
    fn csv_has_expected_shape() {
        let spec = LinearModelSpec::zero(1, 2);
        let layout = PopulationLayout::from_counts(vec![2]).unwrap();
        let g = TimeGrid::new(0.5, 2).unwrap();
        let ens = simulate_interacting(&spec, &layout, g, 0).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&ens, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.starts_with("particle,type,time,w1,w2,x1,x2"));
    }
}
