//! # Sum-of-squares programs
//!
//! An [`SosProgram`] declares unknown polynomials (free or SOS), signed scalar
//! unknowns, and constraints of the form `expression ∈ Σ[vars]` where the
//! expression is affine in the unknowns. [`compile`] turns it into an
//! [`SdpProblem`] through the Gram-matrix representation:
//!
//! * a free unknown of degree `d` gets one scalar per monomial of degree ≤ `d`;
//! * an SOS unknown of degree `d` gets a PSD Gram matrix over the monomials of
//!   degree ≤ `d/2`;
//! * every constraint gets its own PSD Gram matrix `Q` over the monomials of
//!   degree ≤ ⌈deg/2⌉ and one equality per monomial matching the expression's
//!   coefficients with those of `zᵀQz`.
//!
//! [`solve`] compiles, runs the SDP solver, and [`extract`]s the polynomial
//! solution, re-expanding every identity and rejecting any whose residual
//! exceeds `residual_tol`. [`bisect`] drives one-dimensional searches over a
//! scalar parameter whose feasibility is monotone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::poly::{monomial_basis, Monomial, Polynomial, VarId, VarTable};
use crate::sdp::{self, SdpBlock, SdpError, SdpProblem, SdpStatus, SolverSettings};

// ---------------------------------------------------------------------------
// Errors and settings
// ---------------------------------------------------------------------------

/// Errors raised while building, compiling or solving an SOS program.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    /// Product of two expressions that both contain unknowns.
    #[error("product of two unknown-bearing expressions ({0}) is not affine")]
    Bilinear(String),
    /// Lie derivative of a term that already carries one.
    #[error("nested Lie derivative of unknown `{0}` is not supported")]
    NestedLie(String),
    /// A name was declared twice.
    #[error("duplicate unknown name `{0}`")]
    Duplicate(String),
    /// A constraint references an undeclared unknown.
    #[error("undeclared unknown `{0}`")]
    Undeclared(String),
    /// SOS unknowns need an even degree.
    #[error("SOS unknown `{name}` has odd degree {degree}")]
    OddDegree {
        /// Unknown name.
        name: String,
        /// Declared degree.
        degree: u32,
    },
    /// The SDP layer rejected the compiled problem.
    #[error(transparent)]
    Sdp(#[from] SdpError),
    /// The SDP solve did not produce a feasible point.
    #[error("SDP solve ended with status {0:?}")]
    NotFeasible(SdpStatus),
    /// The extracted solution failed re-expansion.
    #[error("identity `{label}` residual {residual:e} exceeds tolerance")]
    Residual {
        /// Constraint label.
        label: String,
        /// Coefficient ℓ∞ residual.
        residual: f64,
    },
    /// An extracted Gram matrix is not PSD within tolerance.
    #[error("Gram matrix `{label}` has eigenvalue {eigenvalue:e} below −psd_tol")]
    NotPsd {
        /// Constraint or unknown label.
        label: String,
        /// Smallest eigenvalue.
        eigenvalue: f64,
    },
}

impl SosError {
    /// True when the error means "not certified" (infeasible or numerically
    /// unresolved) rather than a malformed program.
    pub fn is_infeasibility(&self) -> bool {
        matches!(self, SosError::NotFeasible(_) | SosError::Residual { .. } | SosError::NotPsd { .. })
    }
}

/// Settings for solving SOS programs.
#[derive(Debug, Clone, PartialEq)]
pub struct SosSettings {
    /// Underlying SDP solver settings.
    pub solver: SolverSettings,
    /// Coefficient ℓ∞ tolerance on re-expanded identities.
    pub residual_tol: f64,
}

impl Default for SosSettings {
    fn default() -> Self {
        Self { solver: SolverSettings::default(), residual_tol: 1e-6 }
    }
}

// ---------------------------------------------------------------------------
// Unknowns and expressions
// ---------------------------------------------------------------------------

/// Kind of an unknown polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownKind {
    /// Any polynomial of bounded degree.
    Free,
    /// A sum of squares of bounded (even) degree.
    Sos,
}

/// An unknown polynomial over a list of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialVariable {
    /// Unique name.
    pub name: String,
    /// Variables the polynomial ranges over.
    pub vars: Vec<VarId>,
    /// Maximum total degree.
    pub degree: u32,
    /// Free or SOS.
    pub kind: UnknownKind,
}

impl PolynomialVariable {
    /// Free unknown.
    pub fn free(name: &str, vars: &[VarId], degree: u32) -> Self {
        Self { name: name.to_string(), vars: vars.to_vec(), degree, kind: UnknownKind::Free }
    }

    /// SOS unknown.
    pub fn sos(name: &str, vars: &[VarId], degree: u32) -> Self {
        Self { name: name.to_string(), vars: vars.to_vec(), degree, kind: UnknownKind::Sos }
    }
}

/// Sign constraint on a scalar unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarSign {
    /// Unconstrained.
    Free,
    /// `≥ 0`.
    NonNeg,
    /// `≤ 0`.
    NonPos,
}

/// Gram layout of an unknown: its monomial basis and the number of scalar
/// decision variables it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramLayout {
    /// Monomial basis (coefficient basis for free unknowns, Gram basis `z`
    /// for SOS unknowns).
    pub basis: Vec<Monomial>,
    /// Number of scalar decision variables.
    pub num_scalars: usize,
    /// Gram matrix size (0 for free unknowns).
    pub gram_size: usize,
}

/// Gram parameterization of an unknown polynomial.
pub fn gram_parameterize(unknown: &PolynomialVariable) -> GramLayout {
    match unknown.kind {
        UnknownKind::Free => {
            let basis = monomial_basis(&unknown.vars, unknown.degree);
            GramLayout { num_scalars: basis.len(), basis, gram_size: 0 }
        }
        UnknownKind::Sos => {
            let basis = monomial_basis(&unknown.vars, unknown.degree / 2);
            let n = basis.len();
            GramLayout { basis, num_scalars: n * (n + 1) / 2, gram_size: n }
        }
    }
}

/// Polynomial vector field along which a Lie derivative is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    /// Differentiated variables.
    pub vars: Vec<VarId>,
    /// Rate of each variable.
    pub rates: Vec<Polynomial>,
}

/// `factor · u` or `factor · L_F u` for an unknown polynomial `u`.
#[derive(Debug, Clone, PartialEq)]
struct UnknownTerm {
    unknown: String,
    factor: Polynomial,
    lie: Option<Field>,
}

/// An expression affine in the unknowns:
/// `known + Σ factor·(u or L_F u) + Σ scalar·factor`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SosExpr {
    known: Polynomial,
    terms: Vec<UnknownTerm>,
    scalars: Vec<(String, Polynomial)>,
}

impl SosExpr {
    /// A known polynomial.
    pub fn known(p: Polynomial) -> Self {
        Self { known: p, ..Self::default() }
    }

    /// The unknown polynomial `name`.
    pub fn unknown(name: &str) -> Self {
        Self {
            terms: vec![UnknownTerm { unknown: name.to_string(), factor: Polynomial::constant(1.0), lie: None }],
            ..Self::default()
        }
    }

    /// The scalar unknown `name` (as a constant polynomial).
    pub fn scalar(name: &str) -> Self {
        Self { scalars: vec![(name.to_string(), Polynomial::constant(1.0))], ..Self::default() }
    }

    /// True when the expression contains no unknowns.
    pub fn is_known(&self) -> bool {
        self.terms.is_empty() && self.scalars.is_empty()
    }

    /// Sum.
    pub fn add(mut self, other: SosExpr) -> SosExpr {
        self.known = self.known.add(&other.known);
        self.terms.extend(other.terms);
        self.scalars.extend(other.scalars);
        self
    }

    /// Difference.
    pub fn sub(self, other: SosExpr) -> SosExpr {
        self.add(other.scale(-1.0))
    }

    /// Adds a known polynomial.
    pub fn add_known(mut self, p: &Polynomial) -> SosExpr {
        self.known = self.known.add(p);
        self
    }

    /// Scalar multiple.
    pub fn scale(self, s: f64) -> SosExpr {
        self.mul_known(&Polynomial::constant(s))
    }

    /// Product with a known polynomial.
    pub fn mul_known(mut self, p: &Polynomial) -> SosExpr {
        self.known = self.known.mul(p);
        for t in &mut self.terms {
            t.factor = t.factor.mul(p);
        }
        for (_, f) in &mut self.scalars {
            *f = f.mul(p);
        }
        self
    }

    /// Product of two expressions; at most one may contain unknowns.
    pub fn mul(self, other: SosExpr) -> Result<SosExpr, SosError> {
        match (self.is_known(), other.is_known()) {
            (_, true) => Ok(self.mul_known(&other.known)),
            (true, false) => Ok(other.mul_known(&self.known)),
            (false, false) => {
                let names: Vec<String> = self.unknown_names().into_iter().chain(other.unknown_names()).collect();
                Err(SosError::Bilinear(names.join(" × ")))
            }
        }
    }

    /// Lie derivative along `field`.
    pub fn lie(self, field: &Field) -> Result<SosExpr, SosError> {
        let mut out = SosExpr::known(self.known.lie_derivative(&field.vars, &field.rates));
        for t in self.terms {
            if t.lie.is_some() {
                return Err(SosError::NestedLie(t.unknown));
            }
            let df = t.factor.lie_derivative(&field.vars, &field.rates);
            if !df.is_zero() {
                out.terms.push(UnknownTerm { unknown: t.unknown.clone(), factor: df, lie: None });
            }
            out.terms.push(UnknownTerm { unknown: t.unknown, factor: t.factor, lie: Some(field.clone()) });
        }
        for (name, f) in self.scalars {
            let df = f.lie_derivative(&field.vars, &field.rates);
            if !df.is_zero() {
                out.scalars.push((name, df));
            }
        }
        Ok(out)
    }

    fn unknown_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.terms.iter().map(|t| t.unknown.clone()).collect();
        v.extend(self.scalars.iter().map(|(n, _)| n.clone()));
        v.sort();
        v.dedup();
        v
    }

    /// Evaluates the expression with the unknowns replaced by solutions.
    pub fn realize(&self, polys: &BTreeMap<String, Polynomial>, scalars: &BTreeMap<String, f64>) -> Polynomial {
        let mut out = self.known.clone();
        for t in &self.terms {
            let u = &polys[&t.unknown];
            let op = match &t.lie {
                None => u.clone(),
                Some(f) => u.lie_derivative(&f.vars, &f.rates),
            };
            out = out.add(&t.factor.mul(&op));
        }
        for (name, f) in &self.scalars {
            out = out.add(&f.scale(scalars[name]));
        }
        out
    }

    fn degree_bound(&self, degrees: &HashMap<&str, u32>) -> u32 {
        let mut d = self.known.degree();
        for t in &self.terms {
            let du = degrees.get(t.unknown.as_str()).copied().unwrap_or(0);
            let op = match &t.lie {
                None => du,
                Some(f) => du.saturating_sub(1) + f.rates.iter().map(Polynomial::degree).max().unwrap_or(0),
            };
            d = d.max(op + t.factor.degree());
        }
        for (_, f) in &self.scalars {
            d = d.max(f.degree());
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Program
// ---------------------------------------------------------------------------

/// `expression ∈ Σ[vars]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SosConstraint {
    /// Human-readable label (used in errors, dumps and certificates).
    pub label: String,
    /// Affine expression.
    pub expr: SosExpr,
    /// Variables of the SOS cone.
    pub vars: Vec<VarId>,
}

/// `expression(point) = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointConstraint {
    /// Label.
    pub label: String,
    /// Affine expression.
    pub expr: SosExpr,
    /// Evaluation point (unlisted variables are zero).
    pub point: BTreeMap<VarId, f64>,
    /// Required value.
    pub value: f64,
}

/// A sum-of-squares program.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SosProgram {
    /// Unknown polynomials.
    pub unknowns: Vec<PolynomialVariable>,
    /// Scalar unknowns with sign constraints.
    pub scalars: Vec<(String, ScalarSign)>,
    /// SOS constraints.
    pub constraints: Vec<SosConstraint>,
    /// Point-evaluation equalities.
    pub point_constraints: Vec<PointConstraint>,
    /// Linear objective over scalars (minimized).
    pub objective: Vec<(String, f64)>,
}

impl SosProgram {
    /// Empty program.
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an unknown polynomial.
    pub fn add_unknown(&mut self, u: PolynomialVariable) -> Result<SosExpr, SosError> {
        if self.has_name(&u.name) {
            return Err(SosError::Duplicate(u.name));
        }
        if u.kind == UnknownKind::Sos && u.degree % 2 == 1 {
            return Err(SosError::OddDegree { name: u.name, degree: u.degree });
        }
        let e = SosExpr::unknown(&u.name);
        self.unknowns.push(u);
        Ok(e)
    }

    /// Declares a scalar unknown.
    pub fn add_scalar(&mut self, name: &str, sign: ScalarSign) -> Result<SosExpr, SosError> {
        if self.has_name(name) {
            return Err(SosError::Duplicate(name.to_string()));
        }
        self.scalars.push((name.to_string(), sign));
        Ok(SosExpr::scalar(name))
    }

    /// Adds `expr ∈ Σ[vars]`.
    pub fn add_sos_constraint(&mut self, label: &str, expr: SosExpr, vars: &[VarId]) {
        self.constraints.push(SosConstraint { label: label.to_string(), expr, vars: vars.to_vec() });
    }

    /// Adds `expr(point) = value`.
    pub fn add_point_constraint(&mut self, label: &str, expr: SosExpr, point: BTreeMap<VarId, f64>, value: f64) {
        self.point_constraints.push(PointConstraint { label: label.to_string(), expr, point, value });
    }

    /// Sets the objective `minimize Σ wᵢ·scalarᵢ`.
    pub fn minimize(&mut self, objective: &[(&str, f64)]) {
        self.objective = objective.iter().map(|(n, w)| (n.to_string(), *w)).collect();
    }

    fn has_name(&self, name: &str) -> bool {
        self.unknowns.iter().any(|u| u.name == name) || self.scalars.iter().any(|(n, _)| n == name)
    }
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

/// Linear form over SDP variables, keyed by monomial.
type LinPoly = BTreeMap<Monomial, BTreeMap<usize, f64>>;

#[derive(Debug, Clone, PartialEq)]
struct UnknownLayout {
    layout: GramLayout,
    /// SDP variable and the basis polynomial it multiplies.
    columns: Vec<(usize, Polynomial)>,
    /// PSD block index for SOS unknowns.
    block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConstraintLayout {
    basis: Vec<Monomial>,
    block: usize,
    equalities: usize,
}

/// A compiled SOS program together with the back-map from SDP variables to
/// polynomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledSos {
    /// The SDP.
    pub sdp: SdpProblem,
    program: SosProgram,
    unknowns: Vec<UnknownLayout>,
    scalar_vars: Vec<usize>,
    constraints: Vec<ConstraintLayout>,
}

/// Index pairs `(i, j)`, `i ≤ j`, of an `n × n` upper triangle.
fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn add_lin(target: &mut LinPoly, m: Monomial, var: usize, c: f64) {
    if c != 0.0 {
        *target.entry(m).or_default().entry(var).or_insert(0.0) += c;
    }
}

/// Compiles an SOS program into an SDP.
pub fn compile(program: &SosProgram) -> Result<CompiledSos, SosError> {
    let mut nvars = 0usize;
    let mut blocks: Vec<SdpBlock> = Vec::new();
    let mut unknowns = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut degrees: HashMap<&str, u32> = HashMap::new();

    for (k, u) in program.unknowns.iter().enumerate() {
        let layout = gram_parameterize(u);
        let mut columns = Vec::new();
        let mut block = None;
        match u.kind {
            UnknownKind::Free => {
                for m in &layout.basis {
                    columns.push((nvars, Polynomial::term(1.0, m.clone())));
                    nvars += 1;
                }
            }
            UnknownKind::Sos => {
                let n = layout.gram_size;
                let mut b = SdpBlock::new(n);
                for (i, j) in upper_pairs(n) {
                    let mono = layout.basis[i].mul(&layout.basis[j]);
                    let c = if i == j { 1.0 } else { 2.0 };
                    columns.push((nvars, Polynomial::term(c, mono)));
                    b.add_coeff_entry(nvars, i, j, 1.0);
                    nvars += 1;
                }
                blocks.push(b);
                block = Some(blocks.len() - 1);
            }
        }
        index.insert(u.name.as_str(), k);
        degrees.insert(u.name.as_str(), u.degree);
        unknowns.push(UnknownLayout { layout, columns, block });
    }

    let mut scalar_vars = Vec::new();
    let mut scalar_index: HashMap<&str, usize> = HashMap::new();
    for (name, sign) in &program.scalars {
        let v = nvars;
        nvars += 1;
        match sign {
            ScalarSign::Free => {}
            ScalarSign::NonNeg | ScalarSign::NonPos => {
                let mut b = SdpBlock::new(1);
                b.add_coeff_entry(v, 0, 0, if *sign == ScalarSign::NonNeg { 1.0 } else { -1.0 });
                blocks.push(b);
            }
        }
        scalar_index.insert(name.as_str(), v);
        scalar_vars.push(v);
    }

    // Linear form of an expression: constant part plus SDP-variable parts.
    let linearize = |expr: &SosExpr| -> Result<(Polynomial, LinPoly), SosError> {
        let mut lin = LinPoly::new();
        for t in &expr.terms {
            let k = *index.get(t.unknown.as_str()).ok_or_else(|| SosError::Undeclared(t.unknown.clone()))?;
            for (var, basis_poly) in &unknowns[k].columns {
                let op = match &t.lie {
                    None => basis_poly.clone(),
                    Some(f) => basis_poly.lie_derivative(&f.vars, &f.rates),
                };
                for (m, c) in t.factor.mul(&op).terms() {
                    add_lin(&mut lin, m.clone(), *var, c);
                }
            }
        }
        for (name, f) in &expr.scalars {
            let var = *scalar_index.get(name.as_str()).ok_or_else(|| SosError::Undeclared(name.clone()))?;
            for (m, c) in f.terms() {
                add_lin(&mut lin, m.clone(), var, c);
            }
        }
        Ok((expr.known.clone(), lin))
    };

    // Gram blocks and coefficient matching, one constraint at a time.
    let mut eq_terms: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut constraints = Vec::new();
    for con in &program.constraints {
        let (known, mut lin) = linearize(&con.expr)?;
        let deg = con.expr.degree_bound(&degrees);
        let basis = monomial_basis(&con.vars, deg.div_ceil(2));
        let n = basis.len();
        let mut b = SdpBlock::new(n);
        for (i, j) in upper_pairs(n) {
            let v = nvars;
            nvars += 1;
            b.add_coeff_entry(v, i, j, 1.0);
            let c = if i == j { 1.0 } else { 2.0 };
            // expression − zᵀQz = 0
            add_lin(&mut lin, basis[i].mul(&basis[j]), v, -c);
        }
        blocks.push(b);
        let mut monos: BTreeSet<Monomial> = lin.keys().cloned().collect();
        monos.extend(known.terms().map(|(m, _)| m.clone()));
        let before = eq_terms.len();
        for m in monos {
            let row: Vec<(usize, f64)> = lin
                .get(&m)
                .map(|r| r.iter().filter(|(_, c)| **c != 0.0).map(|(v, c)| (*v, *c)).collect())
                .unwrap_or_default();
            let rhs = -known.coeff(&m);
            if row.is_empty() && rhs == 0.0 {
                continue;
            }
            eq_terms.push((row, rhs));
        }
        constraints.push(ConstraintLayout { basis, block: blocks.len() - 1, equalities: eq_terms.len() - before });
    }
    for pc in &program.point_constraints {
        let (known, lin) = linearize(&pc.expr)?;
        let value_of = |v: VarId| pc.point.get(&v).copied().unwrap_or(0.0);
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        for (m, r) in &lin {
            let mv = m.eval_with(&value_of);
            for (v, c) in r {
                *row.entry(*v).or_insert(0.0) += c * mv;
            }
        }
        let rhs = pc.value - known.eval_with(&value_of);
        eq_terms.push((row.into_iter().filter(|(_, c)| *c != 0.0).collect(), rhs));
    }

    let mut sdp_problem = SdpProblem::new(nvars);
    for (name, w) in &program.objective {
        let v = *scalar_index.get(name.as_str()).ok_or_else(|| SosError::Undeclared(name.clone()))?;
        sdp_problem.cost[v] += *w;
    }
    for b in blocks {
        sdp_problem.add_block(b);
    }
    for (row, rhs) in &eq_terms {
        sdp_problem.add_equality(row, *rhs);
    }
    Ok(CompiledSos { sdp: sdp_problem, program: program.clone(), unknowns, scalar_vars, constraints })
}

impl CompiledSos {
    /// Deterministic human-readable listing of bases, block sizes and
    /// equality counts.
    pub fn dump(&self, vars: &VarTable) -> String {
        let mut out = String::new();
        let basis_text = |b: &[Monomial]| -> String {
            b.iter().map(|m| if m.is_one() { "1".to_string() } else { m.to_text(vars) }).collect::<Vec<_>>().join(", ")
        };
        let _ = writeln!(
            out,
            "sdp: {} variables, {} blocks, {} equalities",
            self.sdp.num_vars(),
            self.sdp.blocks.len(),
            self.sdp.eq_rows.len()
        );
        for (u, l) in self.program.unknowns.iter().zip(&self.unknowns) {
            let kind = match u.kind {
                UnknownKind::Free => "free",
                UnknownKind::Sos => "sos",
            };
            let _ = writeln!(
                out,
                "unknown {} ({kind}, degree {}): basis [{}], {} scalars{}",
                u.name,
                u.degree,
                basis_text(&l.layout.basis),
                l.layout.num_scalars,
                l.block.map(|b| format!(", block {b} of size {}", l.layout.gram_size)).unwrap_or_default()
            );
        }
        for (name, sign) in &self.program.scalars {
            let _ = writeln!(out, "scalar {name} ({sign:?})");
        }
        for (c, l) in self.program.constraints.iter().zip(&self.constraints) {
            let _ = writeln!(
                out,
                "constraint {}: basis [{}], block {} of size {}, {} equalities",
                c.label,
                basis_text(&l.basis),
                l.block,
                l.basis.len(),
                l.equalities
            );
        }
        for pc in &self.program.point_constraints {
            let _ = writeln!(out, "point constraint {}: value {}", pc.label, pc.value);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Solution
// ---------------------------------------------------------------------------

/// A Gram matrix certifying `p = zᵀQz`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCertificate {
    /// Monomial basis `z`.
    pub basis: Vec<Monomial>,
    /// Symmetric PSD matrix `Q`.
    pub matrix: DMatrix<f64>,
}

impl GramCertificate {
    /// Expands `zᵀQz`.
    pub fn expand(&self) -> Polynomial {
        let n = self.basis.len();
        let mut p = Polynomial::zero();
        for i in 0..n {
            for j in 0..n {
                let c = self.matrix[(i, j)];
                if c != 0.0 {
                    p.add_term(self.basis[i].mul(&self.basis[j]), c);
                }
            }
        }
        p
    }
}

/// Extracted solution of an SOS program.
#[derive(Debug, Clone, PartialEq)]
pub struct SosSolution {
    /// SDP status (`Optimal` or `Feasible`).
    pub status: SdpStatus,
    /// Unknown polynomials by name.
    pub polys: BTreeMap<String, Polynomial>,
    /// Scalar unknowns by name.
    pub scalars: BTreeMap<String, f64>,
    /// Gram matrices of SOS unknowns by name.
    pub unknown_grams: BTreeMap<String, GramCertificate>,
    /// Gram matrices of constraints by label.
    pub constraint_grams: BTreeMap<String, GramCertificate>,
    /// Largest identity residual over all constraints.
    pub max_residual: f64,
    /// Objective value.
    pub objective: f64,
    /// SDP iterations.
    pub iterations: usize,
}

/// Reconstructs polynomials from an SDP solution and validates every
/// identity.
pub fn extract(
    solution: &sdp::SdpSolution,
    compiled: &CompiledSos,
    settings: &SosSettings,
) -> Result<SosSolution, SosError> {
    if !solution.status.is_feasible() {
        return Err(SosError::NotFeasible(solution.status));
    }
    let y = &solution.y;
    let mut polys = BTreeMap::new();
    let mut unknown_grams = BTreeMap::new();
    for (u, l) in compiled.program.unknowns.iter().zip(&compiled.unknowns) {
        let mut p = Polynomial::zero();
        for (v, bp) in &l.columns {
            p = p.add(&bp.scale(y[*v]));
        }
        if let Some(b) = l.block {
            let matrix = solution.block_matrices[b].clone();
            check_psd(&u.name, &matrix, settings)?;
            unknown_grams.insert(u.name.clone(), GramCertificate { basis: l.layout.basis.clone(), matrix });
        }
        polys.insert(u.name.clone(), p);
    }
    let scalars: BTreeMap<String, f64> =
        compiled.program.scalars.iter().zip(&compiled.scalar_vars).map(|((n, _), v)| (n.clone(), y[*v])).collect();
    let mut constraint_grams = BTreeMap::new();
    let mut max_residual: f64 = 0.0;
    for (c, l) in compiled.program.constraints.iter().zip(&compiled.constraints) {
        let gram = GramCertificate { basis: l.basis.clone(), matrix: solution.block_matrices[l.block].clone() };
        check_psd(&c.label, &gram.matrix, settings)?;
        let residual = c.expr.realize(&polys, &scalars).max_abs_diff(&gram.expand());
        if !(residual <= settings.residual_tol) {
            return Err(SosError::Residual { label: c.label.clone(), residual });
        }
        max_residual = max_residual.max(residual);
        constraint_grams.insert(c.label.clone(), gram);
    }
    let objective = compiled.program.objective.iter().map(|(n, w)| w * scalars[n]).sum();
    Ok(SosSolution {
        status: solution.status,
        polys,
        scalars,
        unknown_grams,
        constraint_grams,
        max_residual,
        objective,
        iterations: solution.iterations,
    })
}

fn check_psd(label: &str, m: &DMatrix<f64>, settings: &SosSettings) -> Result<(), SosError> {
    let eigenvalue = sdp::min_eigenvalue(&((m + m.transpose()) * 0.5))?;
    if eigenvalue < -settings.solver.psd_tol {
        return Err(SosError::NotPsd { label: label.to_string(), eigenvalue });
    }
    Ok(())
}

/// Compiles, solves and extracts.
pub fn solve(program: &SosProgram, settings: &SosSettings) -> Result<SosSolution, SosError> {
    let compiled = compile(program)?;
    let sol = sdp::solve(&compiled.sdp, &settings.solver)?;
    extract(&sol, &compiled, settings)
}

/// Stored evidence of an SOS solution: every unknown polynomial and every
/// Gram matrix (constraints by label, SOS unknowns by name), in the
/// coordinates the program was built in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SosEvidence {
    /// Unknown polynomials by name.
    pub polys: BTreeMap<String, Polynomial>,
    /// Scalar unknowns by name.
    pub scalars: BTreeMap<String, f64>,
    /// Gram certificates by constraint label or SOS-unknown name.
    pub grams: BTreeMap<String, GramCertificate>,
}

impl From<&SosSolution> for SosEvidence {
    fn from(s: &SosSolution) -> Self {
        let mut grams = s.constraint_grams.clone();
        grams.extend(s.unknown_grams.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self { polys: s.polys.clone(), scalars: s.scalars.clone(), grams }
    }
}

impl SosEvidence {
    /// Evidence with variables renamed by `vars` and unknown / constraint
    /// names rewritten by `names`.
    pub fn renamed(&self, vars: &HashMap<VarId, VarId>, names: impl Fn(&str) -> String) -> SosEvidence {
        SosEvidence {
            polys: self.polys.iter().map(|(k, p)| (names(k), p.rename(vars))).collect(),
            scalars: self.scalars.iter().map(|(k, &v)| (names(k), v)).collect(),
            grams: self
                .grams
                .iter()
                .map(|(k, g)| {
                    let basis = g.basis.iter().map(|m| m.rename(vars)).collect();
                    (names(k), GramCertificate { basis, matrix: g.matrix.clone() })
                })
                .collect(),
        }
    }
}

/// Re-validates stored evidence against a program without solving anything:
/// every Gram matrix must be PSD within `psd_tol`, every SOS unknown must
/// equal its Gram expansion, and every constraint expression (rebuilt from
/// the program) must equal its Gram expansion within `residual_tol`.
/// Returns the largest residual.
pub fn check_evidence(program: &SosProgram, evidence: &SosEvidence, settings: &SosSettings) -> Result<f64, SosError> {
    let mut max_residual: f64 = 0.0;
    let mut check = |label: &str, target: &Polynomial| -> Result<(), SosError> {
        let gram = evidence.grams.get(label).ok_or_else(|| SosError::Undeclared(label.to_string()))?;
        check_psd(label, &gram.matrix, settings)?;
        let residual = target.max_abs_diff(&gram.expand());
        if !(residual <= settings.residual_tol) {
            return Err(SosError::Residual { label: label.to_string(), residual });
        }
        max_residual = max_residual.max(residual);
        Ok(())
    };
    for u in &program.unknowns {
        let p = evidence.polys.get(&u.name).ok_or_else(|| SosError::Undeclared(u.name.clone()))?;
        if u.kind == UnknownKind::Sos {
            check(&u.name, p)?;
        }
    }
    for (name, sign) in &program.scalars {
        let v = *evidence.scalars.get(name).ok_or_else(|| SosError::Undeclared(name.clone()))?;
        let bad = match sign {
            ScalarSign::Free => false,
            ScalarSign::NonNeg => v < -settings.solver.psd_tol,
            ScalarSign::NonPos => v > settings.solver.psd_tol,
        };
        if bad {
            return Err(SosError::NotPsd { label: name.clone(), eigenvalue: v });
        }
    }
    for c in &program.constraints {
        let target = c.expr.realize(&evidence.polys, &evidence.scalars);
        check(&c.label, &target)?;
    }
    for pc in &program.point_constraints {
        let value_of = |v: VarId| pc.point.get(&v).copied().unwrap_or(0.0);
        let got = pc.expr.realize(&evidence.polys, &evidence.scalars).eval_with(&value_of);
        let residual = (got - pc.value).abs();
        if !(residual <= settings.residual_tol) {
            return Err(SosError::Residual { label: pc.label.clone(), residual });
        }
    }
    Ok(max_residual)
}

// ---------------------------------------------------------------------------
// Bisection
// ---------------------------------------------------------------------------

/// Search direction for [`bisect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BisectDirection {
    /// Feasibility holds above a threshold; find the smallest feasible value.
    MinimizeFindSmallestFeasible,
    /// Feasibility holds below a threshold; find the largest feasible value.
    MaximizeFindLargestFeasible,
}

/// Why a bisection could not produce a value.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BisectError {
    /// No feasible point in the bracket (the endpoint that should be
    /// feasible is not).
    #[error("infeasible at bracket endpoint {endpoint}")]
    Infeasible {
        /// The endpoint that failed.
        endpoint: f64,
    },
    /// Feasibility contradicts the declared monotone direction.
    #[error("non-monotone feasibility: {feasible} feasible but {infeasible} infeasible")]
    NonMonotone {
        /// Feasible endpoint.
        feasible: f64,
        /// Infeasible endpoint.
        infeasible: f64,
    },
    /// Malformed bracket or tolerance.
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket {
        /// Lower end.
        lo: f64,
        /// Upper end.
        hi: f64,
    },
}

/// Outcome of a successful bisection.
#[derive(Debug, Clone, PartialEq)]
pub struct BisectResult<T> {
    /// Boundary value on the feasible side.
    pub value: f64,
    /// Witness from the last feasible evaluation at `value`.
    pub witness: T,
    /// Bisection iterations (excluding endpoint checks).
    pub iterations: usize,
    /// Every evaluated point and its feasibility, in order.
    pub evaluations: Vec<(f64, bool)>,
}

/// Number of halvings needed to shrink `[lo, hi]` below `tol`.
pub fn bisection_iterations(lo: f64, hi: f64, tol: f64) -> usize {
    if hi - lo <= tol {
        0
    } else {
        ((hi - lo) / tol).log2().ceil() as usize
    }
}

/// One-dimensional bisection on a monotone feasibility oracle.
///
/// The oracle returns `Some(witness)` when the program at the given scalar is
/// feasible. Endpoints are checked first; the returned value lies within `tol`
/// of the feasibility boundary, on its feasible side.
pub fn bisect<T>(
    mut oracle: impl FnMut(f64) -> Option<T>,
    direction: BisectDirection,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<BisectResult<T>, BisectError> {
    if !(lo <= hi) || !(tol > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(BisectError::InvalidBracket { lo, hi });
    }
    let mut evaluations = Vec::new();
    let mut eval = |x: f64, evaluations: &mut Vec<(f64, bool)>| {
        let r = oracle(x);
        evaluations.push((x, r.is_some()));
        r
    };
    // `good` is the endpoint expected feasible, `bad` the other one.
    let (good, bad) = match direction {
        BisectDirection::MinimizeFindSmallestFeasible => (hi, lo),
        BisectDirection::MaximizeFindLargestFeasible => (lo, hi),
    };
    let Some(mut witness) = eval(good, &mut evaluations) else {
        if lo != hi && eval(bad, &mut evaluations).is_some() {
            return Err(BisectError::NonMonotone { feasible: bad, infeasible: good });
        }
        return Err(BisectError::Infeasible { endpoint: good });
    };
    if lo == hi {
        return Ok(BisectResult { value: good, witness, iterations: 0, evaluations });
    }
    if let Some(w) = eval(bad, &mut evaluations) {
        return Ok(BisectResult { value: bad, witness: w, iterations: 0, evaluations });
    }
    let (mut feas, mut infeas) = (good, bad);
    let n = bisection_iterations(lo, hi, tol);
    for _ in 0..n {
        let mid = 0.5 * (feas + infeas);
        match eval(mid, &mut evaluations) {
            Some(w) => {
                feas = mid;
                witness = w;
            }
            None => infeas = mid,
        }
    }
    Ok(BisectResult { value: feas, witness, iterations: n, evaluations })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(names: &[&str]) -> (VarTable, Vec<VarId>) {
        let mut t = VarTable::new();
        let ids = names.iter().map(|n| t.intern(n)).collect();
        (t, ids)
    }

    #[test]
    fn gram_layout_counts() {
        let (_, v) = vars(&["x", "y"]);
        let l = gram_parameterize(&PolynomialVariable::sos("s", &v[..1], 2));
        assert_eq!((l.basis.len(), l.gram_size, l.num_scalars), (2, 2, 3));
        let l = gram_parameterize(&PolynomialVariable::free("f", &v, 1));
        assert_eq!(l.num_scalars, 3);
        let l = gram_parameterize(&PolynomialVariable::sos("s", &v, 4));
        assert_eq!(l.gram_size, 6);
    }

    #[test]
    fn completing_the_square() {
        let (mut t, v) = vars(&["x"]);
        for (text, expect) in [("x^2", 0.0), ("x^2 - 2*x", 1.0)] {
            let mut p = SosProgram::new();
            let c = p.add_scalar("c", ScalarSign::Free).unwrap();
            let e = SosExpr::known(Polynomial::parse(text, &mut t).unwrap()).add(c);
            p.add_sos_constraint("square", e, &v);
            p.minimize(&[("c", 1.0)]);
            let s = solve(&p, &SosSettings::default()).unwrap();
            assert!((s.scalars["c"] - expect).abs() <= 1e-4, "{text}: {}", s.scalars["c"]);
        }
    }

    #[test]
    fn bilinear_products_are_rejected() {
        let a = SosExpr::unknown("a");
        let b = SosExpr::unknown("b");
        assert!(matches!(a.mul(b), Err(SosError::Bilinear(_))));
    }

    #[test]
    fn odd_sos_degree_is_rejected() {
        let mut p = SosProgram::new();
        assert!(p.add_unknown(PolynomialVariable::sos("s", &[0], 3)).is_err());
    }

    #[test]
    fn rank_one_gram_expands_to_square() {
        let (mut t, v) = vars(&["x"]);
        let g = GramCertificate {
            basis: monomial_basis(&v, 1),
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]),
        };
        assert_eq!(g.expand(), Polynomial::parse("1 - 2*x + x^2", &mut t).unwrap());
    }

    #[test]
    fn perfect_square_reconstructs() {
        let (mut t, v) = vars(&["x"]);
        let mut p = SosProgram::new();
        let c = p.add_scalar("c", ScalarSign::Free).unwrap();
        p.add_sos_constraint("c0", SosExpr::known(Polynomial::parse("x^2", &mut t).unwrap()).add(c), &v);
        p.minimize(&[("c", 1.0)]);
        let s = solve(&p, &SosSettings::default()).unwrap();
        let g = s.constraint_grams["c0"].expand();
        assert!(g.max_abs_diff(&Polynomial::parse("x^2", &mut t).unwrap()) <= 1e-6);
    }

    #[test]
    fn motzkin_is_not_sos() {
        let (mut t, v) = vars(&["x", "y"]);
        let m = Polynomial::parse("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1", &mut t).unwrap();
        let mut p = SosProgram::new();
        p.add_sos_constraint("motzkin", SosExpr::known(m), &v);
        let err = solve(&p, &SosSettings::default()).unwrap_err();
        assert!(err.is_infeasibility(), "{err}");
    }

    #[test]
    fn sos_unknown_with_lie_derivative() {
        // ẋ = −x: find h free quadratic with L_F h + h − x² ∈ Σ, h(0) = 1.
        let (_, v) = vars(&["x"]);
        let mut p = SosProgram::new();
        let h = p.add_unknown(PolynomialVariable::free("h", &v, 2)).unwrap();
        let field = Field { vars: v.clone(), rates: vec![Polynomial::var(v[0]).scale(-1.0)] };
        let e = h.clone().lie(&field).unwrap().add(h.clone());
        p.add_sos_constraint("cbf", e, &v);
        p.add_point_constraint("norm", h, BTreeMap::new(), 1.0);
        let s = solve(&p, &SosSettings::default()).unwrap();
        assert!((s.polys["h"].eval_dense(&[0.0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bisection_finds_largest_feasible_shift() {
        // x² + 1 − δ ∈ Σ[x] iff δ ≤ 1.
        let (mut t, v) = vars(&["x"]);
        let base = Polynomial::parse("x^2 + 1", &mut t).unwrap();
        let oracle = |d: f64| {
            let mut p = SosProgram::new();
            p.add_sos_constraint("c", SosExpr::known(base.sub(&Polynomial::constant(d))), &v);
            solve(&p, &SosSettings::default()).ok()
        };
        let r = bisect(oracle, BisectDirection::MaximizeFindLargestFeasible, 0.0, 2.0, 1e-3).unwrap();
        assert!((r.value - 1.0).abs() <= 1e-3, "{}", r.value);
        assert_eq!(r.iterations, bisection_iterations(0.0, 2.0, 1e-3));
    }

    #[test]
    fn stored_evidence_rechecks_and_detects_tampering() {
        let (mut t, v) = vars(&["x"]);
        let mut p = SosProgram::new();
        let s = p.add_unknown(PolynomialVariable::sos("s", &v, 2)).unwrap();
        let g = Polynomial::parse("1 - x^2", &mut t).unwrap();
        p.add_sos_constraint(
            "c",
            SosExpr::known(Polynomial::parse("2 - x^2", &mut t).unwrap()).sub(s.mul_known(&g)),
            &v,
        );
        let sol = solve(&p, &SosSettings::default()).unwrap();
        let mut ev = SosEvidence::from(&sol);
        assert!(check_evidence(&p, &ev, &SosSettings::default()).is_ok());
        ev.grams.get_mut("c").unwrap().matrix[(0, 0)] += 1e-2;
        assert!(matches!(check_evidence(&p, &ev, &SosSettings::default()), Err(SosError::Residual { .. })));
    }

    #[test]
    fn bisection_edge_cases() {
        let r = bisect(|_| Some(()), BisectDirection::MinimizeFindSmallestFeasible, 0.5, 0.5, 1e-3).unwrap();
        assert_eq!(r.value, 0.5);
        let e = bisect(|x| (x < 0.5).then_some(()), BisectDirection::MinimizeFindSmallestFeasible, 0.0, 1.0, 1e-3);
        assert!(matches!(e, Err(BisectError::NonMonotone { .. })));
        let e = bisect(|_| None::<()>, BisectDirection::MinimizeFindSmallestFeasible, 0.0, 1.0, 1e-3);
        assert!(matches!(e, Err(BisectError::Infeasible { endpoint }) if endpoint == 1.0));
        let r =
            bisect(|x| (x >= 0.3).then_some(x), BisectDirection::MinimizeFindSmallestFeasible, 0.0, 1.0, 1e-4).unwrap();
        assert!(r.value >= 0.3 && r.value - 0.3 <= 1e-4);
        assert_eq!(r.witness, r.value);
    }
}
