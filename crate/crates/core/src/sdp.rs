//! # Dense semidefinite programming
//!
//! A small primal-dual interior-point solver for linear matrix inequality
//! problems
//!
//! ```text
//!   minimize    cᵀy
//!   subject to  C⁰ⱼ + Σᵢ yᵢ Cⁱⱼ ⪰ 0      for every block j
//!               A·y = b
//! ```
//!
//! ## Method
//!
//! 1. Equalities are eliminated by a null-space reparameterization
//!    `y = y₀ + N·t` computed from an SVD of `A`; an inconsistent system is
//!    reported as infeasible straight away.
//! 2. The reduced problem `min cᵀt, G·t + s = h, s ⪰ 0` and its conic dual
//!    `max −hᵀz, Gᵀz + c = 0, z ⪰ 0` are embedded in a homogeneous self-dual
//!    system with the extra scalars `τ, κ ≥ 0`. Converged iterates with `τ > 0`
//!    give an optimal pair; `κ > 0` gives an infeasibility certificate.
//! 3. Each iteration computes Nesterov–Todd scaling matrices (kept so that the
//!    scaled point λ is diagonal), an affine predictor, and a Mehrotra
//!    corrector. The Newton system is reduced to a dense `m × m` positive
//!    definite matrix factored with Cholesky.
//!
//! The start point is `t = 0, s = z = I, τ = κ = 1`. Nothing is randomized, so
//! repeated solves are bitwise identical.
//!
//! ## Export
//!
//! [`to_sdpa`] writes the sparse SDPA text format for cross-checking with
//! external solvers, and [`from_sdpa`] reads it back.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Environment variable overriding the total block dimension cap.
pub const MAX_DIM_ENV: &str = "AGCV_MAX_SDP_DIM";

/// Default cap on the sum of block sizes.
pub const DEFAULT_MAX_DIM: usize = 200;

// ---------------------------------------------------------------------------
// Errors and settings
// ---------------------------------------------------------------------------

/// Errors raised while building or solving an SDP.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    /// A coefficient matrix was not symmetric.
    #[error("block {block} matrix for variable {var:?} is not symmetric (asymmetry {asym:e})")]
    NotSymmetric {
        /// Block index.
        block: usize,
        /// Variable index (`None` for the constant part).
        var: Option<usize>,
        /// Largest |Aᵢⱼ − Aⱼᵢ|.
        asym: f64,
    },
    /// Matrix handed to [`min_eigenvalue`] is not symmetric.
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NonSymmetricInput(f64),
    /// Shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Total block dimension exceeds the configured cap.
    #[error("total block dimension {total} exceeds the cap {cap} (set {MAX_DIM_ENV} to raise it)")]
    DimensionCap {
        /// Requested total.
        total: usize,
        /// Active cap.
        cap: usize,
    },
    /// Malformed SDPA text.
    #[error("SDPA parse error on line {line}: {message}")]
    SdpaParse {
        /// 1-based line number.
        line: usize,
        /// Description.
        message: String,
    },
}

/// Solver tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Minimum eigenvalue accepted for a realized block.
    pub psd_tol: f64,
    /// Absolute duality-gap tolerance for `Optimal`.
    pub gap_tol: f64,
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    /// Iteration cap.
    pub max_iterations: usize,
    /// Cap on the sum of block sizes.
    pub max_dim: usize,
    /// Record per-iteration statistics in the solution.
    pub record_history: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            psd_tol: 1e-7,
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_iterations: 200,
            max_dim: max_dim_from_env(),
            record_history: false,
        }
    }
}

/// Reads the dimension cap from [`MAX_DIM_ENV`], defaulting to
/// [`DEFAULT_MAX_DIM`].
pub fn max_dim_from_env() -> usize {
    std::env::var(MAX_DIM_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_MAX_DIM)
}

// ---------------------------------------------------------------------------
// Problem
// ---------------------------------------------------------------------------

/// One LMI block `C⁰ + Σᵢ yᵢ Cⁱ`, coefficient matrices stored as sparse
/// upper-triangle triplets `(row, col, value)` with `row ≤ col`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpBlock {
    size: usize,
    constant: Vec<(usize, usize, f64)>,
    coeffs: Vec<(usize, Vec<(usize, usize, f64)>)>,
}

impl SdpBlock {
    /// Empty block of the given size.
    pub fn new(size: usize) -> Self {
        Self { size, constant: Vec::new(), coeffs: Vec::new() }
    }

    /// Block size.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Adds `value` at symmetric position `(i, j)` of the constant part.
    pub fn add_constant_entry(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.constant.push((r, c, value));
    }

    /// Adds `value` at symmetric position `(i, j)` of the coefficient matrix
    /// of variable `var`.
    pub fn add_coeff_entry(&mut self, var: usize, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        match self.coeffs.iter_mut().find(|(v, _)| *v == var) {
            Some((_, e)) => e.push((r, c, value)),
            None => self.coeffs.push((var, vec![(r, c, value)])),
        }
    }

    /// Sets the constant part from a dense matrix (rejecting asymmetry).
    pub fn set_constant_dense(&mut self, m: &DMatrix<f64>, block_index: usize) -> Result<(), SdpError> {
        self.constant = dense_to_triplets(m, self.size, block_index, None)?;
        Ok(())
    }

    /// Sets the coefficient matrix of `var` from a dense matrix (rejecting
    /// asymmetry).
    pub fn set_coeff_dense(&mut self, var: usize, m: &DMatrix<f64>, block_index: usize) -> Result<(), SdpError> {
        let t = dense_to_triplets(m, self.size, block_index, Some(var))?;
        self.coeffs.retain(|(v, _)| *v != var);
        if !t.is_empty() {
            self.coeffs.push((var, t));
        }
        Ok(())
    }

    /// Constant part as a dense matrix.
    pub fn constant_dense(&self) -> DMatrix<f64> {
        triplets_to_dense(&self.constant, self.size)
    }

    /// Coefficient matrix of `var` as a dense matrix (zero if absent).
    pub fn coeff_dense(&self, var: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for (v, t) in &self.coeffs {
            if *v == var {
                accumulate(&mut m, t);
            }
        }
        m
    }

    /// Variables with a (possibly) nonzero coefficient matrix, ascending.
    pub fn variables(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.coeffs.iter().map(|(v, _)| *v).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Realized matrix `C⁰ + Σ yᵢ Cⁱ`.
    pub fn realize(&self, y: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant_dense();
        for (v, t) in &self.coeffs {
            let yv = y[*v];
            if yv != 0.0 {
                for &(i, j, val) in t {
                    m[(i, j)] += yv * val;
                    if i != j {
                        m[(j, i)] += yv * val;
                    }
                }
            }
        }
        m
    }
}

fn dense_to_triplets(
    m: &DMatrix<f64>,
    size: usize,
    block: usize,
    var: Option<usize>,
) -> Result<Vec<(usize, usize, f64)>, SdpError> {
    if m.nrows() != size || m.ncols() != size {
        return Err(SdpError::Dimension(format!(
            "block {block} expects {size}×{size}, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = asymmetry(m);
    if asym > 1e-12 {
        return Err(SdpError::NotSymmetric { block, var, asym });
    }
    let mut out = Vec::new();
    for i in 0..size {
        for j in i..size {
            if m[(i, j)] != 0.0 {
                out.push((i, j, m[(i, j)]));
            }
        }
    }
    Ok(out)
}

fn triplets_to_dense(t: &[(usize, usize, f64)], size: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(size, size);
    accumulate(&mut m, t);
    m
}

fn accumulate(m: &mut DMatrix<f64>, t: &[(usize, usize, f64)]) {
    for &(i, j, v) in t {
        m[(i, j)] += v;
        if i != j {
            m[(j, i)] += v;
        }
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut a: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            a = a.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    a
}

/// An LMI problem over `m` scalar decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    /// Objective vector `c` (minimized).
    pub cost: Vec<f64>,
    /// PSD blocks.
    pub blocks: Vec<SdpBlock>,
    /// Equality rows `aₖ·y = bₖ` (dense rows of length `m`).
    pub eq_rows: Vec<Vec<f64>>,
    /// Equality right-hand sides.
    pub eq_rhs: Vec<f64>,
}

impl SdpProblem {
    /// Problem with `m` variables, zero cost, no blocks or equalities.
    pub fn new(m: usize) -> Self {
        Self { cost: vec![0.0; m], blocks: Vec::new(), eq_rows: Vec::new(), eq_rhs: Vec::new() }
    }

    /// Number of scalar variables.
    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    /// Sum of block sizes.
    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(SdpBlock::size).sum()
    }

    /// Adds a block, returning its index.
    pub fn add_block(&mut self, block: SdpBlock) -> usize {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    /// Adds a sparse equality `Σ coefᵢ·y_{varᵢ} = rhs`.
    pub fn add_equality(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.num_vars()];
        for &(v, c) in terms {
            row[v] += c;
        }
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    fn check(&self) -> Result<(), SdpError> {
        let m = self.num_vars();
        for (b, blk) in self.blocks.iter().enumerate() {
            for (v, t) in &blk.coeffs {
                if *v >= m {
                    return Err(SdpError::Dimension(format!("block {b} references variable {v} ≥ {m}")));
                }
                if t.iter().any(|&(i, j, _)| i >= blk.size || j >= blk.size) {
                    return Err(SdpError::Dimension(format!("block {b} entry out of range")));
                }
            }
            if blk.constant.iter().any(|&(i, j, _)| i >= blk.size || j >= blk.size) {
                return Err(SdpError::Dimension(format!("block {b} constant entry out of range")));
            }
        }
        if self.eq_rows.len() != self.eq_rhs.len() || self.eq_rows.iter().any(|r| r.len() != m) {
            return Err(SdpError::Dimension("equality rows must have length m".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Solution
// ---------------------------------------------------------------------------

/// Termination status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    /// Converged with duality gap within tolerance.
    Optimal,
    /// A point satisfying every constraint was found (pure feasibility
    /// problems stop as soon as one is found).
    Feasible,
    /// Certified infeasible.
    Infeasible,
    /// Certified unbounded below.
    Unbounded,
    /// Iteration cap or numerical breakdown.
    NumericalFailure,
}

impl SdpStatus {
    /// True for `Optimal` and `Feasible`.
    pub fn is_feasible(self) -> bool {
        matches!(self, SdpStatus::Optimal | SdpStatus::Feasible)
    }
}

/// Per-iteration statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    /// Primal objective estimate `cᵀx/τ`.
    pub primal_objective: f64,
    /// Dual objective estimate `−hᵀz/τ`.
    pub dual_objective: f64,
    /// Relative primal residual.
    pub primal_residual: f64,
    /// Relative dual residual.
    pub dual_residual: f64,
    /// Complementarity gap `⟨s, z⟩/τ²`.
    pub gap: f64,
    /// Homogenizing scalars.
    pub tau: f64,
    /// Homogenizing scalars.
    pub kappa: f64,
}

/// Result of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    /// Termination status.
    pub status: SdpStatus,
    /// Decision variables (original, un-reduced coordinates).
    pub y: Vec<f64>,
    /// Realized block matrices at `y`.
    pub block_matrices: Vec<DMatrix<f64>>,
    /// Primal objective `cᵀy`.
    pub objective: f64,
    /// Dual objective.
    pub dual_objective: f64,
    /// Duality gap estimate.
    pub duality_gap: f64,
    /// Interior-point iterations performed.
    pub iterations: usize,
    /// Per-iteration statistics when requested.
    pub history: Vec<IterationStats>,
}

impl SdpSolution {
    /// Smallest eigenvalue over all realized blocks (`+∞` when there are
    /// none).
    pub fn min_block_eigenvalue(&self) -> f64 {
        self.block_matrices.iter().map(min_eig_unchecked).fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Eigenvalues
// ---------------------------------------------------------------------------

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SdpError> {
    if m.nrows() != m.ncols() {
        return Err(SdpError::Dimension("matrix must be square".into()));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = asymmetry(m);
    if asym > 1e-12 * scale {
        return Err(SdpError::NonSymmetricInput(asym));
    }
    Ok(min_eig_unchecked(m))
}

fn min_eig_unchecked(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Equality elimination
// ---------------------------------------------------------------------------

/// Null-space reparameterization `y = y0 + N·t` of `A·y = b`.
struct Reduction {
    y0: DVector<f64>,
    null: DMatrix<f64>,
}

fn eliminate(problem: &SdpProblem) -> Option<Reduction> {
    let m = problem.num_vars();
    let p = problem.eq_rows.len();
    if p == 0 {
        return Some(Reduction { y0: DVector::zeros(m), null: DMatrix::identity(m, m) });
    }
    // Pad with zero rows so the SVD returns a full right singular basis.
    let rows = p.max(m);
    let mut a = DMatrix::zeros(rows, m);
    let mut b = DVector::zeros(rows);
    for (k, (row, &rhs)) in problem.eq_rows.iter().zip(&problem.eq_rhs).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a[(k, j)] = v;
        }
        b[k] = rhs;
    }
    if m == 0 {
        let ok = b.iter().all(|v| v.abs() <= 1e-9);
        return ok.then(|| Reduction { y0: DVector::zeros(0), null: DMatrix::zeros(0, 0) });
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = 1e-10 * smax.max(1.0) * (rows.max(m) as f64);
    let mut y0 = DVector::zeros(m);
    let mut null_cols = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let coef = u.column(k).dot(&b) / s;
            y0 += vt.row(k).transpose() * coef;
        } else {
            null_cols.push(vt.row(k).transpose());
        }
    }
    let resid = (&a * &y0 - &b).amax();
    if resid > 1e-9 * b.amax().max(1.0) {
        return None;
    }
    let null = if null_cols.is_empty() { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&null_cols) };
    Some(Reduction { y0, null })
}

// ---------------------------------------------------------------------------
// Interior point core
// ---------------------------------------------------------------------------

/// Reduced conic problem: `min cᵀx, s = h − Σ xᵢ Gᵢ... ` stored per block as
/// `h` (constant) and `g[i]` where the slack is `h + Σ xᵢ g[i]`.
struct Reduced {
    cost: DVector<f64>,
    h: Vec<DMatrix<f64>>,
    /// `g[b][i]`: coefficient of reduced variable `i` in block `b`.
    g: Vec<Vec<DMatrix<f64>>>,
}

fn reduce(problem: &SdpProblem, red: &Reduction) -> Reduced {
    let k = red.null.ncols();
    let m = problem.num_vars();
    let mut h = Vec::new();
    let mut g = Vec::new();
    for blk in &problem.blocks {
        let n = blk.size();
        let mut c0 = blk.constant_dense();
        let mut gi = vec![DMatrix::zeros(n, n); k];
        for v in blk.variables() {
            let cv = blk.coeff_dense(v);
            let y0v = red.y0[v];
            if y0v != 0.0 {
                c0 += &cv * y0v;
            }
            for (t, gt) in gi.iter_mut().enumerate() {
                let nv = red.null[(v, t)];
                if nv != 0.0 {
                    *gt += &cv * nv;
                }
            }
        }
        h.push(c0);
        g.push(gi);
    }
    let c = DVector::from_vec(problem.cost.clone());
    let cost = if m == 0 { DVector::zeros(0) } else { red.null.transpose() * c };
    Reduced { cost, h, g }
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn block_norm(ms: &[DMatrix<f64>]) -> f64 {
    ms.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

/// Factorization `M = L Lᵀ` used for scaling (Cholesky with an eigenvalue
/// fallback for nearly singular inputs).
fn sqrt_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some(ch.l());
    }
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Some(&eig.eigenvectors * d)
}

/// Nesterov–Todd scaling of one block: `s = R Λ Rᵀ`, `z = R⁻ᵀ Λ R⁻¹` with Λ
/// diagonal.
#[derive(Clone)]
struct Scaling {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl Scaling {
    fn identity(n: usize) -> Self {
        Self { r: DMatrix::identity(n, n), rinv: DMatrix::identity(n, n), lambda: DVector::from_element(n, 1.0) }
    }

    /// NT scaling of the pair `(s, z)`; returns `(r̃, r̃⁻¹, λ)`.
    fn compute(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<Self> {
        let l1 = sqrt_factor(s)?;
        let l2 = sqrt_factor(z)?;
        let svd = (l2.transpose() * &l1).svd(true, true);
        let u = svd.u?;
        let v = svd.v_t?.transpose();
        let lam = svd.singular_values;
        if lam.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return None;
        }
        let isq = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
        let r = &l1 * &v * &isq;
        let rinv = &isq * u.transpose() * l2.transpose();
        Some(Self { r, rinv, lambda: lam })
    }

    /// `𝒲(U) = R⁻¹ U R⁻ᵀ`.
    fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.rinv * u * self.rinv.transpose()
    }

    /// `𝒲⁻¹(U) = R U Rᵀ`.
    fn apply_inv(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r * u * self.r.transpose()
    }

    /// `𝒲ᵀ(V) = R⁻ᵀ V R⁻¹`.
    fn apply_t(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.rinv.transpose() * v * &self.rinv
    }

    fn s(&self) -> DMatrix<f64> {
        self.apply_inv(&DMatrix::from_diagonal(&self.lambda))
    }

    fn z(&self) -> DMatrix<f64> {
        self.apply_t(&DMatrix::from_diagonal(&self.lambda))
    }
}

/// Solves `λ ∘ U = R` for `U`.
fn lam_div(lam: &DVector<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lam.len();
    DMatrix::from_fn(n, n, |i, j| 2.0 * r[(i, j)] / (lam[i] + lam[j]))
}

/// `U ∘ V = (UV + VU)/2`.
fn jordan(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    (u * v + v * u) * 0.5
}

/// Largest `α` with `λ + α D ⪰ 0` (λ diagonal, positive).
fn max_step(lam: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lam.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| {
        let v = 0.5 * (d[(i, j)] + d[(j, i)]);
        v / (lam[i] * lam[j]).sqrt()
    });
    let mn = SymmetricEigen::new(scaled).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if mn >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / mn
    }
}

fn scalar_step(v: f64, dv: f64) -> f64 {
    if dv < 0.0 {
        -v / dv
    } else {
        f64::INFINITY
    }
}

enum CoreOutcome {
    Optimal { x: DVector<f64>, gap: f64, dcost: f64 },
    Feasible { x: DVector<f64> },
    PrimalInfeasible,
    DualInfeasible { x: DVector<f64> },
    Failure { x: DVector<f64> },
}

struct CoreResult {
    outcome: CoreOutcome,
    iterations: usize,
    history: Vec<IterationStats>,
}

/// Homogeneous self-dual interior-point loop on the reduced problem
/// `min cᵀx, s = h + Σ xᵢ gᵢ ⪰ 0` (i.e. `G = −g`).
fn hsd_solve(p: &Reduced, settings: &SolverSettings) -> CoreResult {
    let k = p.cost.len();
    let nb = p.h.len();
    let sizes: Vec<usize> = p.h.iter().map(|m| m.nrows()).collect();
    let nu: f64 = sizes.iter().sum::<usize>() as f64;
    let feasibility_only = p.cost.iter().all(|&c| c == 0.0);

    let mut x = DVector::zeros(k);
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;
    let mut sc: Vec<Scaling> = sizes.iter().map(|&n| Scaling::identity(n)).collect();

    let resx0 = p.cost.norm().max(1.0);
    let resz0 = block_norm(&p.h).max(1.0);
    let mut history = Vec::new();

    // G x with G = −g.
    let gx = |x: &DVector<f64>| -> Vec<DMatrix<f64>> {
        (0..nb)
            .map(|b| {
                let mut acc = DMatrix::zeros(sizes[b], sizes[b]);
                for (i, gi) in p.g[b].iter().enumerate() {
                    if x[i] != 0.0 {
                        acc -= gi * x[i];
                    }
                }
                acc
            })
            .collect()
    };
    // Gᵀ z.
    let gtz = |z: &[DMatrix<f64>]| -> DVector<f64> {
        DVector::from_fn(k, |i, _| -(0..nb).map(|b| frob(&p.g[b][i], &z[b])).sum::<f64>())
    };

    for iter in 0..=settings.max_iterations {
        let s: Vec<DMatrix<f64>> = sc.iter().map(Scaling::s).collect();
        let z: Vec<DMatrix<f64>> = sc.iter().map(Scaling::z).collect();

        let gxv = gx(&x);
        let hrx = -gtz(&z);
        let rx = -&hrx + &p.cost * tau; // Gᵀz + cτ
        let hrz: Vec<DMatrix<f64>> = (0..nb).map(|b| &gxv[b] + &s[b]).collect();
        let rz: Vec<DMatrix<f64>> = (0..nb).map(|b| &hrz[b] - &p.h[b] * tau).collect();
        let cx = p.cost.dot(&x);
        let hz: f64 = (0..nb).map(|b| frob(&p.h[b], &z[b])).sum();
        let rt = kappa + cx + hz;
        let sz: f64 = (0..nb).map(|b| frob(&s[b], &z[b])).sum();
        let mu = (sz + tau * kappa) / (nu + 1.0);

        let pcost = cx / tau;
        let dcost = -hz / tau;
        let gap = sz / (tau * tau);
        let pres = block_norm(&rz) / tau / resz0;
        let dres = rx.norm() / tau / resx0;
        let relgap = if pcost < 0.0 {
            Some(gap / -pcost)
        } else if dcost > 0.0 {
            Some(gap / dcost)
        } else {
            None
        };
        if settings.record_history {
            history.push(IterationStats {
                primal_objective: pcost,
                dual_objective: dcost,
                primal_residual: pres,
                dual_residual: dres,
                gap,
                tau,
                kappa,
            });
        }

        // Early exit for pure feasibility problems: the current primal point
        // already satisfies every block strictly.
        if feasibility_only && tau > 0.0 {
            let xt = &x / tau;
            let strict = (0..nb).all(|b| {
                let mut m = p.h[b].clone();
                for (i, gi) in p.g[b].iter().enumerate() {
                    if xt[i] != 0.0 {
                        m += gi * xt[i];
                    }
                }
                m.nrows() == 0 || min_eig_unchecked(&m) > 0.0
            });
            if strict {
                return CoreResult { outcome: CoreOutcome::Feasible { x: xt }, iterations: iter, history };
            }
        }

        if pres <= settings.feas_tol
            && dres <= settings.feas_tol
            && (gap <= settings.gap_tol || relgap.is_some_and(|r| r <= settings.gap_tol))
        {
            return CoreResult { outcome: CoreOutcome::Optimal { x: &x / tau, gap, dcost }, iterations: iter, history };
        }
        if hz < 0.0 && hrx.norm() / resx0 / (-hz) <= settings.feas_tol {
            return CoreResult { outcome: CoreOutcome::PrimalInfeasible, iterations: iter, history };
        }
        if cx < 0.0 && block_norm(&hrz) / resz0 / (-cx) <= settings.feas_tol {
            return CoreResult { outcome: CoreOutcome::DualInfeasible { x: &x / (-cx) }, iterations: iter, history };
        }
        if iter == settings.max_iterations {
            break;
        }

        // Scaled problem data for this iteration.
        let ghat: Vec<Vec<DMatrix<f64>>> =
            (0..nb).map(|b| p.g[b].iter().map(|gi| sc[b].apply(&(-gi))).collect()).collect();
        let hhat: Vec<DMatrix<f64>> = (0..nb).map(|b| sc[b].apply(&p.h[b])).collect();
        let rzhat: Vec<DMatrix<f64>> = (0..nb).map(|b| sc[b].apply(&rz[b])).collect();

        let mut mmat = DMatrix::zeros(k, k);
        for b in 0..nb {
            for i in 0..k {
                for j in 0..=i {
                    let v = frob(&ghat[b][i], &ghat[b][j]);
                    mmat[(i, j)] += v;
                    if i != j {
                        mmat[(j, i)] += v;
                    }
                }
            }
        }
        let diag_max = (0..k).map(|i| mmat[(i, i)]).fold(0.0f64, f64::max);
        let chol = match mmat.clone().cholesky() {
            Some(c) => c,
            None => {
                let mut reg = mmat.clone();
                for i in 0..k {
                    reg[(i, i)] += 1e-13 * diag_max.max(1e-300);
                }
                match reg.cholesky() {
                    Some(c) => c,
                    None => break,
                }
            }
        };
        let ghat_t = |v: &[DMatrix<f64>]| -> DVector<f64> {
            DVector::from_fn(k, |i, _| (0..nb).map(|b| frob(&ghat[b][i], &v[b])).sum::<f64>())
        };
        let ghat_x = |dx: &DVector<f64>| -> Vec<DMatrix<f64>> {
            (0..nb)
                .map(|b| {
                    let mut acc = DMatrix::zeros(sizes[b], sizes[b]);
                    for (i, gi) in ghat[b].iter().enumerate() {
                        if dx[i] != 0.0 {
                            acc += gi * dx[i];
                        }
                    }
                    acc
                })
                .collect()
        };

        // Direction that absorbs dτ.
        let dx_b = chol.solve(&(ghat_t(&hhat) - &p.cost));
        let gdx_b = ghat_x(&dx_b);
        let dz_b: Vec<DMatrix<f64>> = (0..nb).map(|b| &gdx_b[b] - &hhat[b]).collect();
        let denom = p.cost.dot(&dx_b) + (0..nb).map(|b| frob(&hhat[b], &dz_b[b])).sum::<f64>() - kappa / tau;

        // Solves the linearized system for a given complementarity target.
        let solve_dir = |eta: f64, rs: &[DMatrix<f64>], rk: f64| {
            let u: Vec<DMatrix<f64>> = (0..nb).map(|b| lam_div(&sc[b].lambda, &rs[b])).collect();
            let w: Vec<DMatrix<f64>> = (0..nb).map(|b| &rzhat[b] * eta + &u[b]).collect();
            let rhs = -&rx * eta - ghat_t(&w);
            let dx_a = chol.solve(&rhs);
            let gdx_a = ghat_x(&dx_a);
            let dz_a: Vec<DMatrix<f64>> = (0..nb).map(|b| &gdx_a[b] + &w[b]).collect();
            let num = -eta * rt - p.cost.dot(&dx_a) - (0..nb).map(|b| frob(&hhat[b], &dz_a[b])).sum::<f64>() - rk / tau;
            let dtau = num / denom;
            let dx = &dx_a + &dx_b * dtau;
            let dz: Vec<DMatrix<f64>> = (0..nb).map(|b| &dz_a[b] + &dz_b[b] * dtau).collect();
            let ds: Vec<DMatrix<f64>> = (0..nb).map(|b| &u[b] - &dz[b]).collect();
            let dkappa = (rk - kappa * dtau) / tau;
            (dx, ds, dz, dtau, dkappa)
        };

        let step_len = |ds: &[DMatrix<f64>], dz: &[DMatrix<f64>], dtau: f64, dkappa: f64| {
            let mut a = scalar_step(tau, dtau).min(scalar_step(kappa, dkappa));
            for b in 0..nb {
                a = a.min(max_step(&sc[b].lambda, &ds[b])).min(max_step(&sc[b].lambda, &dz[b]));
            }
            a
        };

        // Predictor.
        let rs_aff: Vec<DMatrix<f64>> =
            (0..nb).map(|b| -DMatrix::from_diagonal(&sc[b].lambda.map(|l| l * l))).collect();
        let (_, ds_a, dz_a, dtau_a, dkappa_a) = solve_dir(1.0, &rs_aff, -tau * kappa);
        let alpha_a = step_len(&ds_a, &dz_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_a).powi(3);

        // Corrector.
        let rs: Vec<DMatrix<f64>> = (0..nb)
            .map(|b| {
                let n = sizes[b];
                let lam = &sc[b].lambda;
                let mut r = -DMatrix::from_diagonal(&lam.map(|l| l * l));
                r -= jordan(&ds_a[b], &dz_a[b]);
                for i in 0..n {
                    r[(i, i)] += sigma * mu;
                }
                r
            })
            .collect();
        let rk = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, ds, dz, dtau, dkappa) = solve_dir(1.0 - sigma, &rs, rk);
        let alpha = (0.99 * step_len(&ds, &dz, dtau, dkappa)).min(1.0);
        if !alpha.is_finite() || alpha < 1e-12 {
            break;
        }

        // Update, recomputing the scaling in the current scaled coordinates.
        let mut next = Vec::with_capacity(nb);
        let mut ok = true;
        for b in 0..nb {
            let lam = DMatrix::from_diagonal(&sc[b].lambda);
            let s_new = &lam + &ds[b] * alpha;
            let z_new = &lam + &dz[b] * alpha;
            match Scaling::compute(&((&s_new + s_new.transpose()) * 0.5), &((&z_new + z_new.transpose()) * 0.5)) {
                Some(t) => next.push(Scaling { r: &sc[b].r * &t.r, rinv: &t.rinv * &sc[b].rinv, lambda: t.lambda }),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        sc = next;
        x += &dx * alpha;
        tau += alpha * dtau;
        kappa += alpha * dkappa;
        if !(tau > 0.0 && kappa > 0.0 && x.iter().all(|v| v.is_finite())) {
            break;
        }
    }
    let xt = if tau > 0.0 { &x / tau } else { x.clone() };
    CoreResult { outcome: CoreOutcome::Failure { x: xt }, iterations: settings.max_iterations, history }
}

// ---------------------------------------------------------------------------
// Public solve
// ---------------------------------------------------------------------------

/// Solves an LMI problem.
pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution, SdpError> {
    problem.check()?;
    let total = problem.total_dim();
    if total > settings.max_dim {
        return Err(SdpError::DimensionCap { total, cap: settings.max_dim });
    }
    let m = problem.num_vars();
    let finish =
        |status: SdpStatus, y: Vec<f64>, dual: f64, gap: f64, iterations: usize, history: Vec<IterationStats>| {
            let block_matrices: Vec<DMatrix<f64>> = problem.blocks.iter().map(|b| b.realize(&y)).collect();
            let objective = problem.cost.iter().zip(&y).map(|(c, v)| c * v).sum();
            SdpSolution {
                status,
                y,
                block_matrices,
                objective,
                dual_objective: dual,
                duality_gap: gap,
                iterations,
                history,
            }
        };

    let red = match eliminate(problem) {
        Some(r) => r,
        None => {
            return Ok(finish(SdpStatus::Infeasible, vec![0.0; m], f64::NAN, f64::NAN, 0, Vec::new()));
        }
    };
    let reduced = reduce(problem, &red);
    let offset: f64 = problem.cost.iter().zip(red.y0.iter()).map(|(c, v)| c * v).sum();
    let lift = |t: &DVector<f64>| -> Vec<f64> {
        let y = &red.y0 + &red.null * t;
        y.iter().copied().collect()
    };

    // No free variables left: only check the fixed point.
    if reduced.cost.is_empty() {
        let y = lift(&DVector::zeros(0));
        let sol = finish(SdpStatus::Feasible, y, offset, 0.0, 0, Vec::new());
        let status =
            if sol.min_block_eigenvalue() >= -settings.psd_tol { SdpStatus::Feasible } else { SdpStatus::Infeasible };
        return Ok(SdpSolution { status, ..sol });
    }
    if problem.blocks.is_empty() {
        // Unconstrained linear objective.
        let unbounded = reduced.cost.amax() > 0.0;
        let y = lift(&DVector::zeros(reduced.cost.len()));
        let status = if unbounded { SdpStatus::Unbounded } else { SdpStatus::Feasible };
        return Ok(finish(status, y, offset, 0.0, 0, Vec::new()));
    }

    let core = hsd_solve(&reduced, settings);
    let CoreResult { outcome, iterations, history } = core;
    Ok(match outcome {
        CoreOutcome::Optimal { x, gap, dcost } => {
            let sol = finish(SdpStatus::Optimal, lift(&x), dcost + offset, gap, iterations, history);
            if sol.min_block_eigenvalue() >= -settings.psd_tol {
                sol
            } else {
                SdpSolution { status: SdpStatus::NumericalFailure, ..sol }
            }
        }
        CoreOutcome::Feasible { x } => {
            let sol = finish(SdpStatus::Feasible, lift(&x), f64::NAN, f64::NAN, iterations, history);
            let dual = sol.objective;
            SdpSolution { dual_objective: dual, duality_gap: 0.0, ..sol }
        }
        CoreOutcome::PrimalInfeasible => {
            finish(SdpStatus::Infeasible, vec![0.0; m], f64::NAN, f64::NAN, iterations, history)
        }
        CoreOutcome::DualInfeasible { x } => {
            let y: Vec<f64> = (&red.null * x).iter().copied().collect();
            finish(SdpStatus::Unbounded, y, f64::NEG_INFINITY, f64::NAN, iterations, history)
        }
        CoreOutcome::Failure { x } => {
            finish(SdpStatus::NumericalFailure, lift(&x), f64::NAN, f64::NAN, iterations, history)
        }
    })
}

// ---------------------------------------------------------------------------
// SDPA sparse format
// ---------------------------------------------------------------------------

/// Writes the problem in sparse SDPA format.
///
/// SDPA solves `min cᵀy s.t. Σ Fᵢ yᵢ − F₀ ⪰ 0`, so the constant part is
/// written negated (`F₀ = −C⁰`). Equalities `a·y = b` become a trailing
/// diagonal (LP) block holding `a·y − b ≥ 0` and `−a·y + b ≥ 0`, declared with
/// a negative block size.
pub fn to_sdpa(problem: &SdpProblem) -> String {
    let m = problem.num_vars();
    let p = problem.eq_rows.len();
    let mut nblocks = problem.blocks.len();
    if p > 0 {
        nblocks += 1;
    }
    let mut out = String::new();
    let _ = writeln!(out, "{m}");
    let _ = writeln!(out, "{nblocks}");
    let mut sizes: Vec<String> = problem.blocks.iter().map(|b| b.size().to_string()).collect();
    if p > 0 {
        sizes.push(format!("-{}", 2 * p));
    }
    let _ = writeln!(out, "{}", sizes.join(" "));
    let costs: Vec<String> = problem.cost.iter().map(|c| fmt_num(*c)).collect();
    let _ = writeln!(out, "{}", costs.join(" "));
    for (bi, blk) in problem.blocks.iter().enumerate() {
        let c0 = blk.constant_dense();
        write_matrix(&mut out, 0, bi + 1, &(-c0));
    }
    for v in 0..m {
        for (bi, blk) in problem.blocks.iter().enumerate() {
            write_matrix(&mut out, v + 1, bi + 1, &blk.coeff_dense(v));
        }
    }
    if p > 0 {
        let lb = problem.blocks.len() + 1;
        for (k, &rhs) in problem.eq_rhs.iter().enumerate() {
            if rhs != 0.0 {
                let _ = writeln!(out, "0 {lb} {} {} {}", 2 * k + 1, 2 * k + 1, fmt_num(rhs));
                let _ = writeln!(out, "0 {lb} {} {} {}", 2 * k + 2, 2 * k + 2, fmt_num(-rhs));
            }
        }
        for v in 0..m {
            for (k, row) in problem.eq_rows.iter().enumerate() {
                if row[v] != 0.0 {
                    let _ = writeln!(out, "{} {lb} {} {} {}", v + 1, 2 * k + 1, 2 * k + 1, fmt_num(row[v]));
                    let _ = writeln!(out, "{} {lb} {} {} {}", v + 1, 2 * k + 2, 2 * k + 2, fmt_num(-row[v]));
                }
            }
        }
    }
    out
}

fn write_matrix(out: &mut String, mat: usize, blk: usize, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            if m[(i, j)] != 0.0 {
                let _ = writeln!(out, "{mat} {blk} {} {} {}", i + 1, j + 1, fmt_num(m[(i, j)]));
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:?}")
}

/// Parses sparse SDPA text. Diagonal (negative-size) blocks become ordinary
/// blocks with diagonal entries, so `to_sdpa(from_sdpa(to_sdpa(p)))` equals
/// `to_sdpa(p)` only up to that representation; the feasible set and optimum
/// are preserved.
pub fn from_sdpa(text: &str) -> Result<SdpProblem, SdpError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split(['"', '*']).next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let perr = |line: usize, message: &str| SdpError::SdpaParse { line, message: message.to_string() };
    let (ln, l) = lines.next().ok_or_else(|| perr(0, "missing variable count"))?;
    let m: usize = first_token(l).parse().map_err(|_| perr(ln, "bad variable count"))?;
    let (ln, l) = lines.next().ok_or_else(|| perr(ln, "missing block count"))?;
    let nb: usize = first_token(l).parse().map_err(|_| perr(ln, "bad block count"))?;
    let (ln, l) = lines.next().ok_or_else(|| perr(ln, "missing block sizes"))?;
    let sizes: Vec<i64> = l
        .split(|c: char| c.is_whitespace() || c == ',' || c == '{' || c == '}' || c == '(' || c == ')')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<i64>().map_err(|_| perr(ln, "bad block size")))
        .collect::<Result<_, _>>()?;
    if sizes.len() != nb {
        return Err(perr(ln, "block size count mismatch"));
    }
    let (ln, l) = lines.next().ok_or_else(|| perr(ln, "missing cost vector"))?;
    let cost: Vec<f64> = l
        .split(|c: char| c.is_whitespace() || c == ',' || c == '{' || c == '}' || c == '(' || c == ')')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| perr(ln, "bad cost entry")))
        .collect::<Result<_, _>>()?;
    if cost.len() != m {
        return Err(perr(ln, "cost vector length mismatch"));
    }
    let mut problem = SdpProblem::new(m);
    problem.cost = cost;
    for &s in &sizes {
        problem.add_block(SdpBlock::new(s.unsigned_abs() as usize));
    }
    for (ln, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 5 {
            return Err(perr(ln, "expected `<matno> <blkno> <i> <j> <value>`"));
        }
        let mat: usize = t[0].parse().map_err(|_| perr(ln, "bad matrix number"))?;
        let blk: usize = t[1].parse().map_err(|_| perr(ln, "bad block number"))?;
        let i: usize = t[2].parse().map_err(|_| perr(ln, "bad row"))?;
        let j: usize = t[3].parse().map_err(|_| perr(ln, "bad column"))?;
        let v: f64 = t[4].parse().map_err(|_| perr(ln, "bad value"))?;
        if mat > m || blk == 0 || blk > nb {
            return Err(perr(ln, "matrix or block number out of range"));
        }
        let size = problem.blocks[blk - 1].size();
        if i == 0 || j == 0 || i > size || j > size {
            return Err(perr(ln, "entry index out of range"));
        }
        if sizes[blk - 1] < 0 && i != j {
            return Err(perr(ln, "off-diagonal entry in a diagonal block"));
        }
        let b = &mut problem.blocks[blk - 1];
        if mat == 0 {
            b.add_constant_entry(i - 1, j - 1, -v);
        } else {
            b.add_coeff_entry(mat - 1, i - 1, j - 1, v);
        }
    }
    Ok(problem)
}

fn first_token(l: &str) -> &str {
    l.split(|c: char| c.is_whitespace() || c == ',').next().unwrap_or("")
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
