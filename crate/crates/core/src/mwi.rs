//! Multiple Wiener integral samplers over sample-discretized L² spaces,
//! symmetric statistics, and the tilted limit law.
//!
//! The Gaussian field {I_1(h)} lives on an M-point sample space with the
//! 1/M-weighted inner product. A [`ChaosBasis`] holds the |λ|-ranked
//! eigenpairs of one symmetric kernel (for spectral I_2) plus any extra
//! orthonormal directions needed to represent registered functions exactly,
//! so jointly registered I_1's reproduce their sample covariances without
//! truncation error. Samplers are pure functions of (basis, draw), with
//! draws supplied from counter streams.

use crate::operators::{cross_trace_offdiag, SampleOperator};
use crate::rng::CounterRng;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MwiError {
    #[error("tuple count {needed} exceeds cap {cap}")]
    TupleCapExceeded { needed: u128, cap: u128 },
    #[error("symmetrization supports K ≤ 8, got {0}")]
    KTooLarge(usize),
    #[error("sample length {got} does not match basis size {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Squared-mass fraction retained by the spectral truncation.
pub const DEFAULT_MASS_TARGET: f64 = 0.99;

// ---------------------------------------------------------------------------
// Chaos basis
// ---------------------------------------------------------------------------

/// Handle to a registered function: coefficients in the basis directions
/// (eigenvectors first, then extra orthonormal directions).
#[derive(Debug, Clone)]
pub struct I1Handle {
    coeffs: Vec<f64>,
    norm2: f64,
}

impl I1Handle {
    /// ‖h‖² under the sample inner product.
    pub fn norm2(&self) -> f64 {
        self.norm2
    }

    pub fn inner(&self, other: &I1Handle) -> f64 {
        let n = self.coeffs.len().min(other.coeffs.len());
        (0..n).map(|r| self.coeffs[r] * other.coeffs[r]).sum()
    }
}

/// Eigendecomposition of a symmetric sample kernel plus registered extra
/// directions; the realization of the Gaussian field and its chaoses.
#[derive(Debug, Clone)]
pub struct ChaosBasis {
    pub m: usize,
    /// Retained eigenvalues, |λ|-ranked.
    pub eigenvalues: Vec<f64>,
    /// Retained eigenvectors, orthonormal under ⟨u,v⟩ = (1/M)Σ u_i v_i.
    eigenvectors: Vec<Vec<f64>>,
    /// Extra orthonormal directions from registrations.
    extra: Vec<Vec<f64>>,
    /// Σ_retained λ² / Σ_all λ².
    pub captured_sq_mass: f64,
}

impl ChaosBasis {
    /// Basis with no spectral part; registrations supply all directions.
    pub fn trivial(m: usize) -> Self {
        ChaosBasis {
            m,
            eigenvalues: Vec::new(),
            eigenvectors: Vec::new(),
            extra: Vec::new(),
            captured_sq_mass: 1.0,
        }
    }

    /// Eigendecompose (1/M)·S for a symmetric kernel matrix S of sample
    /// values; keep the top eigenpairs by |λ| until `mass_target` of the
    /// squared mass is captured.
    pub fn from_symmetric_matrix(s: &DMatrix<f64>, mass_target: f64) -> Self {
        let m = s.nrows();
        let mf = m as f64;
        let c = s / mf;
        let eig = c.symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .total_cmp(&eig.eigenvalues[a].abs())
        });
        let total: f64 = eig.eigenvalues.iter().map(|l| l * l).sum();
        let mut kept = 0.0;
        let mut eigenvalues = Vec::new();
        let mut eigenvectors = Vec::new();
        for &idx in &order {
            let l = eig.eigenvalues[idx];
            if total > 0.0 && kept >= mass_target * total {
                break;
            }
            kept += l * l;
            eigenvalues.push(l);
            // Orthonormal under the 1/M weight: e
            // = √M · (ℓ²-orthonormal vector).
            let v: Vec<f64> = (0..m).map(|i| eig.eigenvectors[(i, idx)] * mf.sqrt()).collect();
            eigenvectors.push(v);
        }
        ChaosBasis {
            m,
            eigenvalues,
            eigenvectors,
            extra: Vec::new(),
            captured_sq_mass: if total > 0.0 { kept / total } else { 1.0 },
        }
    }

    /// Total number of independent Gaussian coordinates per draw.
    pub fn dims(&self) -> usize {
        self.eigenvectors.len() + self.extra.len()
    }

    /// Fraction of the kernel's squared spectral mass captured.
    pub fn truncation_mass(&self) -> f64 {
        self.captured_sq_mass
    }

    #[inline]
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let inv = 1.0 / self.m as f64;
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * inv
    }

    /// Register a function by its sample values; the residual beyond the
    /// current directions becomes a new orthonormal direction, so all
    /// registered functions are represented exactly.
    pub fn register(&mut self, values: &[f64]) -> Result<I1Handle, MwiError> {
        if values.len() != self.m {
            return Err(MwiError::LengthMismatch {
                expected: self.m,
                got: values.len(),
            });
        }
        let norm2 = self.dot(values, values);
        let mut coeffs = Vec::with_capacity(self.dims() + 1);
        let mut residual = values.to_vec();
        for e in self.eigenvectors.iter().chain(self.extra.iter()) {
            let c = self.dot(values, e);
            coeffs.push(c);
            for (r, ev) in residual.iter_mut().zip(e) {
                *r -= c * ev;
            }
        }
        let rn2 = self.dot(&residual, &residual);
        if rn2 > 1e-24 * norm2.max(1.0) {
            let rn = rn2.sqrt();
            for r in residual.iter_mut() {
                *r /= rn;
            }
            self.extra.push(residual);
            coeffs.push(rn);
        }
        Ok(I1Handle { coeffs, norm2 })
    }

    /// One standard-normal coordinate per basis direction.
    pub fn draw(&self, rng: &mut CounterRng) -> Vec<f64> {
        (0..self.dims()).map(|_| rng.standard_normal()).collect()
    }

    /// I_1(h) for a registered handle: Σ_r ⟨h, e_r⟩ Z_r. Registration keeps
    /// the representation exact, so Cov(I_1(h), I_1(g)) = ⟨h, g⟩ holds at
    /// the level of the sampler's analytic covariance.
    #[inline]
    pub fn i1_value(&self, h: &I1Handle, z: &[f64]) -> f64 {
        h.coeffs.iter().zip(z).map(|(c, zz)| c * zz).sum()
    }

    /// Spectral second chaos of the basis kernel: I_2(S) = Σ_r λ_r (Z_r²−1).
    #[inline]
    pub fn i2_value(&self, z: &[f64]) -> f64 {
        self.eigenvalues
            .iter()
            .zip(z)
            .map(|(l, zz)| l * (zz * zz - 1.0))
            .sum()
    }

    /// Product-form chaos of a rank-one kernel:
    /// I_k(φ_k^h) = Σ_j (−1)^j C_{k,j} ‖h‖^{2j} I_1(h)^{k−2j}
    /// with C_{k,j} = k!/((k−2j)! 2^j j!).
    pub fn ik_product_value(&self, h: &I1Handle, k: usize, z: &[f64]) -> f64 {
        let i1 = self.i1_value(h, z);
        let mut acc = 0.0;
        for j in 0..=(k / 2) {
            let c = falling_coeff(k, j);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * c * h.norm2.powi(j as i32) * i1.powi((k - 2 * j) as i32);
        }
        acc
    }

    /// Analytic variance of I_2 of the basis kernel over retained pairs.
    pub fn i2_variance(&self) -> f64 {
        2.0 * self.eigenvalues.iter().map(|l| l * l).sum::<f64>()
    }
}

/// C_{k,j} = k! / ((k−2j)! 2^j j!).
fn falling_coeff(k: usize, j: usize) -> f64 {
    let mut num = 1.0f64;
    for i in (k - 2 * j + 1)..=k {
        num *= i as f64;
    }
    let mut den = 1.0f64;
    for i in 1..=j {
        den *= 2.0 * i as f64;
    }
    num / den
}

// ---------------------------------------------------------------------------
// The limit variable J
// ---------------------------------------------------------------------------

/// Parameters of J = ½(I_2(f) − Trace(AA*)) with f = ĥ + ĥ* − ĥ*ĥ built
/// from the sample kernel matrix.
#[derive(Debug, Clone)]
pub struct JParams {
    pub trace_aa_star: f64,
}

/// The symmetric sample matrix of f: F = H + Hᵀ − HᵀH/M.
pub fn f_matrix(op: &SampleOperator) -> DMatrix<f64> {
    let m = op.m as f64;
    let ht = op.h.transpose();
    &op.h + &ht - (&ht * &op.h) / m
}

/// Build the shared chaos basis on f's spectrum together with the J
/// parameters. Sharing the basis with `ik_truncated` realizes the joint law
/// of (J, I_K) required by the tilted limit.
pub fn j_basis(op: &SampleOperator, mass_target: f64) -> (ChaosBasis, JParams) {
    let f = f_matrix(op);
    let basis = ChaosBasis::from_symmetric_matrix(&f, mass_target);
    let (tr, _se) = cross_trace_offdiag(&op.h, &op.h);
    (basis, JParams { trace_aa_star: tr })
}

/// J value for one draw.
#[inline]
pub fn j_value(basis: &ChaosBasis, p: &JParams, z: &[f64]) -> f64 {
    0.5 * (basis.i2_value(z) - p.trace_aa_star)
}

/// Analytic first two moments of the J sampler, estimated without any
/// eigendecomposition: E J = −½ Tr(AA*), Var J = ½ ‖f‖² with both integrals
/// estimated by off-diagonal sample means.
pub fn j_moments(op: &SampleOperator) -> (f64, f64) {
    let (tr, _) = cross_trace_offdiag(&op.h, &op.h);
    let f = f_matrix(op);
    let (f2, _) = cross_trace_offdiag(&f, &f);
    (-0.5 * tr, 0.5 * f2)
}

// ---------------------------------------------------------------------------
// I_K of lifted symmetric functions
// ---------------------------------------------------------------------------

/// Sampler for I_K(φ̂^sym) of a separable K-tuple functional
/// φ̂ = Σ_r c_r ⊗_α h_{r,α}: each factor is registered exactly in the shared
/// basis and I_K of the symmetrized tensor is the Wick product of the
/// factors' I_1 values with their exact sample Gram.
#[derive(Debug, Clone)]
pub struct IkSampler {
    pub k: usize,
    terms: Vec<(f64, Vec<I1Handle>)>,
    grams: Vec<Vec<f64>>,
    /// ‖φ̂^sym‖² in the sample inner product (for isometry checks).
    pub sym_norm2: f64,
}

/// Build the I_K sampler; `terms` carries (coefficient, per-coordinate
/// sample-value vectors of the lifted factors).
pub fn ik_truncated(
    basis: &mut ChaosBasis,
    k: usize,
    terms: &[(f64, Vec<Vec<f64>>)],
) -> Result<IkSampler, MwiError> {
    if k > 8 {
        return Err(MwiError::KTooLarge(k));
    }
    let mut handles = Vec::with_capacity(terms.len());
    for (c, factors) in terms {
        let hs: Vec<I1Handle> = factors
            .iter()
            .map(|v| basis.register(v))
            .collect::<Result<_, _>>()?;
        handles.push((*c, hs));
    }
    let grams: Vec<Vec<f64>> = handles
        .iter()
        .map(|(_, hs)| {
            let mut g = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..k {
                    g[a * k + b] = hs[a].inner(&hs[b]);
                }
            }
            g
        })
        .collect();
    // ‖φ̂^sym‖²: K!‖φ̂^sym‖² = E I_K² = Σ_{r,s} c_r c_s per-term Wick
    // covariance = Σ_{r,s} c_r c_s Σ_π Π_α ⟨h_{r,α}, h_{s,π(α)}⟩ / ... ;
    // computed via the permanent of the cross-Gram divided by K!.
    let mut sym_norm2 = 0.0;
    for (a, (ca, ha)) in handles.iter().enumerate() {
        for (b, (cb, hb)) in handles.iter().enumerate() {
            let mut cross = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    cross[i * k + j] = ha[i].inner(&hb[j]);
                }
            }
            sym_norm2 += ca * cb * permanent(&cross, k) / factorial(k);
            let _ = (a, b);
        }
    }
    Ok(IkSampler {
        k,
        terms: handles,
        grams,
        sym_norm2,
    })
}

impl IkSampler {
    /// I_K value for one draw from the shared basis.
    pub fn value(&self, basis: &ChaosBasis, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((c, hs), gram) in self.terms.iter().zip(&self.grams) {
            let vals: Vec<f64> = hs.iter().map(|h| basis.i1_value(h, z)).collect();
            acc += c * wick_product(&vals, gram, self.k);
        }
        acc
    }
}

/// Wick (Hermite) product :X_1⋯X_n: of jointly Gaussian values with
/// covariance `gram`, by the recursion
/// :X_1⋯X_n: = X_n :X_1⋯X_{n−1}: − Σ_{i<n} Cov(X_i, X_n) :X_1⋯X_{n−1}∖X_i:.
fn wick_product(vals: &[f64], gram: &[f64], k: usize) -> f64 {
    fn rec(active: u32, vals: &[f64], gram: &[f64], k: usize) -> f64 {
        if active == 0 {
            return 1.0;
        }
        let last = 31 - active.leading_zeros();
        let rest = active & !(1u32 << last);
        let mut acc = vals[last as usize] * rec(rest, vals, gram, k);
        let mut bits = rest;
        while bits != 0 {
            let i = bits.trailing_zeros();
            bits &= bits - 1;
            let cov = gram[(i as usize) * k + last as usize];
            if cov != 0.0 {
                acc -= cov * rec(rest & !(1u32 << i), vals, gram, k);
            }
        }
        acc
    }
    rec((1u32 << k) - 1, vals, gram, k)
}

fn permanent(a: &[f64], k: usize) -> f64 {
    // Ryser-style enumeration is overkill for k ≤ 8; plain recursion.
    fn rec(a: &[f64], k: usize, row: usize, used: u32) -> f64 {
        if row == k {
            return 1.0;
        }
        let mut acc = 0.0;
        for col in 0..k {
            if used & (1 << col) == 0 {
                let v = a[row * k + col];
                if v != 0.0 {
                    acc += v * rec(a, k, row + 1, used | (1 << col));
                }
            }
        }
        acc
    }
    rec(a, k, 0, 0)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

// ---------------------------------------------------------------------------
// Tilted sampling
// ---------------------------------------------------------------------------

/// Weighted draws (I_K value, exp(J) weight) from the shared basis; the
/// tilted law is realized by self-normalized importance weighting.
#[derive(Debug, Clone)]
pub struct TiltedOutput {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    /// Effective sample size of the weights.
    pub ess: f64,
    /// Fraction of draws, 0..1; a warning flag when below 0.05.
    pub ess_fraction: f64,
}

/// Draw `n` coupled samples of (I_K, exp(J)) sharing the Gaussian field.
pub fn tilted_ik_draws(
    basis: &ChaosBasis,
    jp: &JParams,
    ik: &IkSampler,
    n: usize,
    rng: &mut CounterRng,
) -> TiltedOutput {
    let mut values = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let z = basis.draw(rng);
        values.push(ik.value(basis, &z));
        weights.push(j_value(basis, jp, &z).exp());
    }
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    TiltedOutput {
        values,
        weights,
        ess,
        ess_fraction: ess / n as f64,
    }
}

/// Self-normalized weighted mean of f over a tilted sample.
pub fn weighted_mean(out: &TiltedOutput, f: impl Fn(f64) -> f64) -> f64 {
    let num: f64 = out
        .values
        .iter()
        .zip(&out.weights)
        .map(|(v, w)| w * f(*v))
        .sum();
    let den: f64 = out.weights.iter().sum();
    num / den
}

// ---------------------------------------------------------------------------
// Symmetric statistics
// ---------------------------------------------------------------------------

fn binomial_count(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// σ^n_k(φ_k) = Σ_{i_1<…<i_k ≤ n} φ_k(X_{i_1},…,X_{i_k}); zero when n < k.
/// `eval` receives the increasing index tuple.
pub fn symmetric_statistic(
    n: usize,
    k: usize,
    cap: u128,
    eval: impl Fn(&[usize]) -> f64,
) -> Result<f64, MwiError> {
    if n < k {
        return Ok(0.0);
    }
    let needed = binomial_count(n, k);
    if needed > cap {
        return Err(MwiError::TupleCapExceeded { needed, cap });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut acc = 0.0;
    loop {
        acc += eval(&idx);
        // Next increasing k-tuple.
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(acc);
            }
            pos -= 1;
            if idx[pos] < n - (k - pos) {
                idx[pos] += 1;
                for q in pos + 1..k {
                    idx[q] = idx[q - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Symmetrized evaluator: (1/K!) Σ_π φ(t_{π(1)}, …, t_{π(K)}) over tuple
/// assignments; exact permutation invariance by construction.
pub fn symmetrize<F: Fn(&[usize]) -> f64>(
    k: usize,
    eval: F,
) -> Result<impl Fn(&[usize]) -> f64, MwiError> {
    if k > 8 {
        return Err(MwiError::KTooLarge(k));
    }
    let perms = permutations(k);
    let kf = factorial(k);
    Ok(move |tuple: &[usize]| {
        let mut acc = 0.0;
        let mut arg = vec![0usize; k];
        for p in &perms {
            for (slot, &src) in p.iter().enumerate() {
                arg[slot] = tuple[src];
            }
            acc += eval(&arg);
        }
        acc / kf
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    fn heap(n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n <= 1 {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            heap(n - 1, cur, out);
            if n % 2 == 0 {
                cur.swap(i, n - 1);
            } else {
                cur.swap(0, n - 1);
            }
        }
    }
    heap(k, &mut cur, &mut out);
    out
}
