//! # Sparse multivariate polynomials
//!
//! Polynomials over named real variables with `f64` coefficients, stored in a
//! canonical sparse form: a sorted map from [`Monomial`] to coefficient with no
//! zero coefficients and no zero exponents. Every SOS construction in the crate
//! (dynamics, set definitions, barrier candidates, multipliers) is expressed in
//! this type.
//!
//! ## Canonical order
//!
//! Monomials are ordered graded-lexicographically by variable id: lower total
//! degree first; within one degree, the monomial with the larger exponent on
//! the lowest-numbered variable comes first. For variables `(x, y)` this gives
//! the familiar basis order `1, x, y, x², xy, y²`. The same order drives Gram
//! indexing and serialization, so printing is deterministic.
//!
//! ## Variables
//!
//! Variable names are interned per model in a [`VarTable`], which maps names
//! matching `[a-zA-Z][a-zA-Z0-9_]*` to dense integer ids. Polynomials store ids
//! only; printing and parsing go through the table.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

/// Dense integer identifier of an interned variable.
pub type VarId = usize;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by polynomial operations and the text parser.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    /// A point or substitution did not assign a variable the polynomial uses.
    #[error("no value assigned to variable `{0}`")]
    MissingVariable(String),
    /// The textual polynomial could not be parsed.
    #[error("parse error at column {column}: {message}")]
    Parse {
        /// 1-based column of the offending character.
        column: usize,
        /// Human readable description.
        message: String,
    },
}

// ---------------------------------------------------------------------------
// Variable table
// ---------------------------------------------------------------------------

/// Interning table mapping variable names to dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VarTable {
    names: Vec<String>,
    index: HashMap<String, VarId>,
}

impl VarTable {
    /// Empty table.
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `name`, interning it if unseen.
    pub fn intern(&mut self, name: &str) -> VarId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Looks up an existing name.
    pub fn get(&self, name: &str) -> Option<VarId> {
        self.index.get(name).copied()
    }

    /// Name of an id; ids not in the table print as `_<id>`.
    pub fn name(&self, id: VarId) -> String {
        self.names.get(id).cloned().unwrap_or_else(|| format!("_{id}"))
    }

    /// Number of interned variables.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// True when no variable is interned.
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// All names in id order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// True if `name` is a syntactically valid variable name.
    pub fn is_valid_name(name: &str) -> bool {
        let mut chars = name.chars();
        match chars.next() {
            Some(c) if c.is_ascii_alphabetic() => {}
            _ => return false,
        }
        chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    }
}

// ---------------------------------------------------------------------------
// Monomial
// ---------------------------------------------------------------------------

/// A monomial `∏ x_v^{e_v}` stored as `(variable, exponent)` pairs sorted by
/// variable id with every exponent positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    exps: Vec<(VarId, u32)>,
}

impl Monomial {
    /// The constant monomial `1`.
    pub fn one() -> Self {
        Self { exps: Vec::new() }
    }

    /// The monomial `x_v`.
    pub fn var(v: VarId) -> Self {
        Self { exps: vec![(v, 1)] }
    }

    /// Builds a monomial from arbitrary `(variable, exponent)` pairs, merging
    /// repeated variables and dropping zero exponents.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (VarId, u32)>) -> Self {
        let mut map: BTreeMap<VarId, u32> = BTreeMap::new();
        for (v, e) in pairs {
            *map.entry(v).or_insert(0) += e;
        }
        Self { exps: map.into_iter().filter(|&(_, e)| e > 0).collect() }
    }

    /// Sorted `(variable, exponent)` pairs.
    pub fn exponents(&self) -> &[(VarId, u32)] {
        &self.exps
    }

    /// Exponent of variable `v` (zero if absent).
    pub fn exponent(&self, v: VarId) -> u32 {
        self.exps.binary_search_by_key(&v, |&(id, _)| id).map(|i| self.exps[i].1).unwrap_or(0)
    }

    /// Total degree.
    pub fn degree(&self) -> u32 {
        self.exps.iter().map(|&(_, e)| e).sum()
    }

    /// True for the constant monomial.
    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }

    /// Product of two monomials.
    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = Vec::with_capacity(self.exps.len() + other.exps.len());
        let (mut i, mut j) = (0, 0);
        while i < self.exps.len() && j < other.exps.len() {
            let (a, b) = (self.exps[i], other.exps[j]);
            match a.0.cmp(&b.0) {
                Ordering::Less => {
                    out.push(a);
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b);
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((a.0, a.1 + b.1));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.exps[i..]);
        out.extend_from_slice(&other.exps[j..]);
        Monomial { exps: out }
    }

    /// Variables with positive exponent.
    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.exps.iter().map(|&(v, _)| v)
    }

    /// Evaluates the monomial with `value(v)` supplying variable values.
    pub fn eval_with(&self, value: &impl Fn(VarId) -> f64) -> f64 {
        self.exps.iter().map(|&(v, e)| value(v).powi(e as i32)).product()
    }

    /// Renames variables through `map` (variables absent from the map keep
    /// their id).
    pub fn rename(&self, map: &HashMap<VarId, VarId>) -> Monomial {
        Monomial::from_pairs(self.exps.iter().map(|&(v, e)| (*map.get(&v).unwrap_or(&v), e)))
    }

    /// Renders the monomial as `x^2*y` (empty string for the constant).
    pub fn to_text(&self, vars: &VarTable) -> String {
        let mut s = String::new();
        for (k, &(v, e)) in self.exps.iter().enumerate() {
            if k > 0 {
                s.push('*');
            }
            s.push_str(&vars.name(v));
            if e > 1 {
                let _ = write!(s, "^{e}");
            }
        }
        s
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        // Same degree: walk variables in id order; a larger exponent on the
        // first differing (lowest) variable sorts first.
        let (mut i, mut j) = (0, 0);
        loop {
            match (self.exps.get(i), other.exps.get(j)) {
                (None, None) => return Ordering::Equal,
                (Some(_), None) => return Ordering::Less,
                (None, Some(_)) => return Ordering::Greater,
                (Some(&(va, ea)), Some(&(vb, eb))) => match va.cmp(&vb) {
                    Ordering::Less => return Ordering::Less,
                    Ordering::Greater => return Ordering::Greater,
                    Ordering::Equal => match ea.cmp(&eb) {
                        Ordering::Equal => {
                            i += 1;
                            j += 1;
                        }
                        Ordering::Greater => return Ordering::Less,
                        Ordering::Less => return Ordering::Greater,
                    },
                },
            }
        }
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `vars` of total degree `≤ max_degree`, in canonical
/// graded-lexicographic order. The count is `C(n + d, d)`.
pub fn monomial_basis(vars: &[VarId], max_degree: u32) -> Vec<Monomial> {
    let mut sorted: Vec<VarId> = vars.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    for deg in 0..=max_degree {
        let mut current = Vec::new();
        push_degree(&sorted, deg, 0, &mut current, &mut out);
    }
    out.sort();
    out
}

fn push_degree(vars: &[VarId], remaining: u32, start: usize, current: &mut Vec<(VarId, u32)>, out: &mut Vec<Monomial>) {
    if remaining == 0 {
        out.push(Monomial::from_pairs(current.iter().copied()));
        return;
    }
    if start >= vars.len() {
        return;
    }
    for e in (0..=remaining).rev() {
        if e > 0 {
            current.push((vars[start], e));
        }
        push_degree(vars, remaining - e, start + 1, current, out);
        if e > 0 {
            current.pop();
        }
    }
}

// ---------------------------------------------------------------------------
// Polynomial
// ---------------------------------------------------------------------------

/// Sparse polynomial in canonical form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    /// The zero polynomial.
    pub fn zero() -> Self {
        Self::default()
    }

    /// A constant polynomial.
    pub fn constant(c: f64) -> Self {
        Self::term(c, Monomial::one())
    }

    /// The polynomial `x_v`.
    pub fn var(v: VarId) -> Self {
        Self::term(1.0, Monomial::var(v))
    }

    /// A single term `c·m`.
    pub fn term(c: f64, m: Monomial) -> Self {
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert(m, c);
        }
        Self { terms }
    }

    /// Builds a polynomial from `(monomial, coefficient)` pairs, summing
    /// duplicates and dropping zeros.
    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Self::zero();
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    /// Adds `c·m` in place.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = *o.get() + c;
                if s == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    /// Terms in canonical (ascending graded-lex) order.
    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    /// Coefficient of `m` (zero if absent).
    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Number of stored (non-zero) terms.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    /// True for the zero polynomial.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree (`0` for constants and for the zero polynomial).
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Degree in the variables `vars` only.
    pub fn degree_in(&self, vars: &[VarId]) -> u32 {
        self.terms
            .keys()
            .map(|m| m.exponents().iter().filter(|(v, _)| vars.contains(v)).map(|&(_, e)| e).sum())
            .max()
            .unwrap_or(0)
    }

    /// Ordered set of variables appearing with positive exponent.
    pub fn variables(&self) -> BTreeSet<VarId> {
        self.terms.keys().flat_map(|m| m.vars()).collect()
    }

    /// Largest absolute coefficient (`0` for the zero polynomial).
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, &c| a.max(c.abs()))
    }

    /// Coefficient-wise sum.
    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        out
    }

    /// Coefficient-wise difference.
    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), -c);
        }
        out
    }

    /// Multiplication by a scalar.
    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero();
        }
        Polynomial {
            terms: self
                .terms
                .iter()
                .filter_map(|(m, &c)| {
                    let v = c * s;
                    (v != 0.0).then(|| (m.clone(), v))
                })
                .collect(),
        }
    }

    /// Negation.
    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    /// Distributive product.
    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    /// Non-negative integer power.
    pub fn pow(&self, e: u32) -> Polynomial {
        let mut out = Polynomial::constant(1.0);
        let mut base = self.clone();
        let mut k = e;
        while k > 0 {
            if k & 1 == 1 {
                out = out.mul(&base);
            }
            k >>= 1;
            if k > 0 {
                base = base.mul(&base);
            }
        }
        out
    }

    /// Evaluates at `point`; every variable of `self` must be assigned.
    pub fn evaluate(&self, point: &HashMap<VarId, f64>, vars: &VarTable) -> Result<f64, PolyError> {
        for v in self.variables() {
            if !point.contains_key(&v) {
                return Err(PolyError::MissingVariable(vars.name(v)));
            }
        }
        Ok(self.eval_with(&|v| point[&v]))
    }

    /// Evaluates with a value callback; the caller guarantees every variable
    /// is covered.
    pub fn eval_with(&self, value: &impl Fn(VarId) -> f64) -> f64 {
        self.terms.iter().map(|(m, &c)| c * m.eval_with(value)).sum()
    }

    /// Evaluates with a dense slice indexed by variable id (ids beyond the
    /// slice evaluate as zero).
    pub fn eval_dense(&self, x: &[f64]) -> f64 {
        self.eval_with(&|v| x.get(v).copied().unwrap_or(0.0))
    }

    /// Partial derivative with respect to `v`.
    pub fn derivative(&self, v: VarId) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, &c) in &self.terms {
            let e = m.exponent(v);
            if e == 0 {
                continue;
            }
            let reduced =
                Monomial::from_pairs(m.exponents().iter().map(|&(w, k)| if w == v { (w, k - 1) } else { (w, k) }));
            out.add_term(reduced, c * e as f64);
        }
        out
    }

    /// Gradient over `vars` (entries for absent variables are zero).
    pub fn gradient(&self, vars: &[VarId]) -> PolynomialVector {
        PolynomialVector::new(vars.iter().map(|&v| self.derivative(v)).collect())
    }

    /// Lie derivative `∇p · field` where `field[i]` is the rate of `vars[i]`.
    pub fn lie_derivative(&self, vars: &[VarId], field: &[Polynomial]) -> Polynomial {
        let mut out = Polynomial::zero();
        for (v, f) in vars.iter().zip(field) {
            let d = self.derivative(*v);
            if !d.is_zero() {
                out = out.add(&d.mul(f));
            }
        }
        out
    }

    /// Substitutes every variable by a polynomial. Every variable of `self`
    /// must be in `subst`.
    pub fn compose(&self, subst: &BTreeMap<VarId, Polynomial>, vars: &VarTable) -> Result<Polynomial, PolyError> {
        for v in self.variables() {
            if !subst.contains_key(&v) {
                return Err(PolyError::MissingVariable(vars.name(v)));
            }
        }
        Ok(self.compose_partial(subst))
    }

    /// Substitutes the variables present in `subst`, leaving others unchanged.
    pub fn compose_partial(&self, subst: &BTreeMap<VarId, Polynomial>) -> Polynomial {
        let mut powers: HashMap<(VarId, u32), Polynomial> = HashMap::new();
        let mut out = Polynomial::zero();
        for (m, &c) in &self.terms {
            let mut t = Polynomial::constant(c);
            for &(v, e) in m.exponents() {
                match subst.get(&v) {
                    Some(img) => {
                        let pw = powers.entry((v, e)).or_insert_with(|| img.pow(e));
                        t = t.mul(pw);
                    }
                    None => t = t.mul(&Polynomial::term(1.0, Monomial::from_pairs([(v, e)]))),
                }
                if t.is_zero() {
                    break;
                }
            }
            out = out.add(&t);
        }
        out
    }

    /// Shifts variables: substitutes `x_v ↦ x_v + offset_v`.
    pub fn shift(&self, offsets: &BTreeMap<VarId, f64>) -> Polynomial {
        let subst: BTreeMap<VarId, Polynomial> = offsets
            .iter()
            .filter(|(_, &o)| o != 0.0)
            .map(|(&v, &o)| (v, Polynomial::var(v).add(&Polynomial::constant(o))))
            .collect();
        if subst.is_empty() {
            return self.clone();
        }
        self.compose_partial(&subst)
    }

    /// Renames variables (ids absent from `map` are kept).
    pub fn rename(&self, map: &HashMap<VarId, VarId>) -> Polynomial {
        Polynomial::from_terms(self.terms.iter().map(|(m, &c)| (m.rename(map), c)))
    }

    /// Drops terms with `|c| ≤ tol`.
    pub fn prune(&self, tol: f64) -> Polynomial {
        Polynomial { terms: self.terms.iter().filter(|(_, c)| c.abs() > tol).map(|(m, &c)| (m.clone(), c)).collect() }
    }

    /// ℓ∞ distance between coefficient vectors.
    pub fn max_abs_diff(&self, other: &Polynomial) -> f64 {
        self.sub(other).max_abs_coeff()
    }

    /// Canonical text: terms in descending graded-lex order, coefficients in
    /// shortest round-trip form, e.g. `3.5*x1^2*v2 - 0.8`.
    pub fn to_text(&self, vars: &VarTable) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        // Highest degree first; within a degree, monomial order.
        let mut terms: Vec<(&Monomial, &f64)> = self.terms.iter().collect();
        terms.sort_by(|a, b| b.0.degree().cmp(&a.0.degree()).then_with(|| a.0.cmp(b.0)));
        let mut s = String::new();
        for (k, (m, &c)) in terms.into_iter().enumerate() {
            let (neg, mag) = if c < 0.0 { (true, -c) } else { (false, c) };
            if k == 0 {
                if neg {
                    s.push('-');
                }
            } else {
                s.push_str(if neg { " - " } else { " + " });
            }
            let mono = m.to_text(vars);
            if mono.is_empty() {
                s.push_str(&format_coeff(mag));
            } else if mag == 1.0 {
                s.push_str(&mono);
            } else {
                s.push_str(&format_coeff(mag));
                s.push('*');
                s.push_str(&mono);
            }
        }
        s
    }

    /// Parses the textual syntax, interning new variable names.
    pub fn parse(text: &str, vars: &mut VarTable) -> Result<Polynomial, PolyError> {
        Parser::new(text, vars).parse_all()
    }
}

/// Shortest round-trip decimal (or exponent) rendering of a non-negative
/// coefficient.
fn format_coeff(c: f64) -> String {
    let s = format!("{c:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

// ---------------------------------------------------------------------------
// Polynomial vectors
// ---------------------------------------------------------------------------

/// Non-empty ordered list of polynomials over one variable universe (vector
/// valued set definitions `g(x) ≥ 0` componentwise).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolynomialVector {
    entries: Vec<Polynomial>,
}

impl PolynomialVector {
    /// Wraps a list of entries.
    pub fn new(entries: Vec<Polynomial>) -> Self {
        Self { entries }
    }

    /// Entries in order.
    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when empty.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest entry degree.
    pub fn degree(&self) -> u32 {
        self.entries.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    /// Union of entry variables.
    pub fn variables(&self) -> BTreeSet<VarId> {
        self.entries.iter().flat_map(|p| p.variables()).collect()
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(&Polynomial) -> Polynomial) -> PolynomialVector {
        PolynomialVector::new(self.entries.iter().map(f).collect())
    }

    /// Subtracts `c` from every entry (the uniform tightening `g − c·1`).
    pub fn tighten(&self, c: f64) -> PolynomialVector {
        self.map(|p| p.sub(&Polynomial::constant(c)))
    }

    /// Componentwise minimum of entry values (the "depth" of a point inside
    /// `{g ≥ 0}`); `+∞` for an empty vector.
    pub fn min_value(&self, value: &impl Fn(VarId) -> f64) -> f64 {
        self.entries.iter().map(|p| p.eval_with(value)).fold(f64::INFINITY, f64::min)
    }

    /// Texts of all entries.
    pub fn to_texts(&self, vars: &VarTable) -> Vec<String> {
        self.entries.iter().map(|p| p.to_text(vars)).collect()
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    vars: &'a mut VarTable,
}

impl<'a> Parser<'a> {
    fn new(text: &str, vars: &'a mut VarTable) -> Self {
        Self { chars: text.chars().collect(), pos: 0, vars }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, PolyError> {
        Err(PolyError::Parse { column: self.pos + 1, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn parse_all(mut self) -> Result<Polynomial, PolyError> {
        if self.peek().is_none() {
            return self.err("empty polynomial");
        }
        let p = self.expr()?;
        match self.peek() {
            None => Ok(p),
            Some('/') => self.err("division is not allowed in polynomials"),
            Some(c) => self.err(format!("unexpected character `{c}`")),
        }
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                Some('-') => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                    acc = acc.mul(&self.factor()?);
                }
                Some('/') => return self.err("division is not allowed in polynomials"),
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(self.factor()?.neg())
            }
            Some('+') => {
                self.pos += 1;
                self.factor()
            }
            _ => {
                let base = self.primary()?;
                if self.peek() == Some('^') {
                    self.pos += 1;
                    let e = self.exponent()?;
                    Ok(base.pow(e))
                } else {
                    Ok(base)
                }
            }
        }
    }

    fn exponent(&mut self) -> Result<u32, PolyError> {
        self.skip_ws();
        let start = self.pos;
        if self.chars.get(self.pos) == Some(&'-') {
            return self.err("negative exponents are not allowed");
        }
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected a non-negative integer exponent");
        }
        if matches!(self.chars.get(self.pos), Some('.') | Some('e') | Some('E')) {
            return self.err("fractional exponents are not allowed");
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        match s.parse::<u32>() {
            Ok(e) => Ok(e),
            Err(_) => self.err("exponent too large"),
        }
    }

    fn primary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let p = self.expr()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(p)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == '_')
                {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                Ok(Polynomial::var(self.vars.intern(&name)))
            }
            Some('/') => self.err("division is not allowed in polynomials"),
            Some(c) => self.err(format!("unexpected character `{c}`")),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.chars.len() && p.chars[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.chars.get(self.pos) == Some(&'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.chars.get(self.pos), Some('e') | Some('E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.chars.get(self.pos), Some('+') | Some('-')) {
                self.pos += 1;
            }
            if self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                digits(self);
            } else {
                // Not an exponent; leave `e` for the variable lexer.
                self.pos = save;
            }
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Polynomial::constant(v)),
            _ => {
                self.pos = start;
                self.err(format!("invalid number `{s}`"))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str, t: &mut VarTable) -> Polynomial {
        Polynomial::parse(s, t).unwrap()
    }

    #[test]
    fn add_examples() {
        let mut t = VarTable::new();
        assert_eq!(p("x^2 + 1", &mut t).add(&p("2*x^2", &mut t)), p("3*x^2 + 1", &mut t));
        let q = p("x^2*y - y", &mut t);
        assert_eq!(q.add(&Polynomial::zero()), q);
        assert!(q.add(&p("y - x^2*y", &mut t)).is_zero());
    }

    #[test]
    fn mul_examples() {
        let mut t = VarTable::new();
        assert_eq!(p("x + y", &mut t).mul(&p("x - y", &mut t)), p("x^2 - y^2", &mut t));
        let q = p("3*x*y + 2", &mut t);
        assert_eq!(q.mul(&Polynomial::constant(1.0)), q);
        assert_eq!(p("(x+1)^2", &mut t), p("x^2 + 2*x + 1", &mut t));
    }

    #[test]
    fn degree_of_product_adds() {
        let mut t = VarTable::new();
        let a = p("x^3*y + x", &mut t);
        let b = p("y^2 - 4", &mut t);
        assert_eq!(a.mul(&b).degree(), a.degree() + b.degree());
    }

    #[test]
    fn evaluate_examples() {
        let mut t = VarTable::new();
        let q = p("x^2 + y", &mut t);
        let (x, y) = (t.get("x").unwrap(), t.get("y").unwrap());
        let pt: HashMap<_, _> = [(x, 2.0), (y, 1.0)].into();
        assert_eq!(q.evaluate(&pt, &t).unwrap(), 5.0);
        let zero: HashMap<_, _> = [(x, 0.0), (y, 0.0)].into();
        assert_eq!(p("3*x*y + 7 - y", &mut t).evaluate(&zero, &t).unwrap(), 7.0);
        let motzkin = p("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1", &mut t);
        let ones: HashMap<_, _> = [(x, 1.0), (y, 1.0)].into();
        assert_eq!(motzkin.evaluate(&ones, &t).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_missing_variable_errors() {
        let mut t = VarTable::new();
        let q = p("x + z", &mut t);
        let pt: HashMap<_, _> = [(t.get("x").unwrap(), 1.0)].into();
        assert_eq!(q.evaluate(&pt, &t), Err(PolyError::MissingVariable("z".into())));
    }

    #[test]
    fn gradient_examples() {
        let mut t = VarTable::new();
        let q = p("x^2 + 3*x*y", &mut t);
        let vs = [t.get("x").unwrap(), t.get("y").unwrap()];
        let g = q.gradient(&vs);
        assert_eq!(g.entries()[0], p("2*x + 3*y", &mut t));
        assert_eq!(g.entries()[1], p("3*x", &mut t));
        let c = Polynomial::constant(4.0).gradient(&vs);
        assert!(c.entries().iter().all(Polynomial::is_zero));
    }

    #[test]
    fn compose_examples() {
        let mut t = VarTable::new();
        let q = p("y^2", &mut t);
        let (x, y) = (t.intern("x"), t.get("y").unwrap());
        let s: BTreeMap<_, _> = [(y, p("x + 1", &mut t))].into();
        assert_eq!(q.compose(&s, &t).unwrap(), p("x^2 + 2*x + 1", &mut t));
        let ident: BTreeMap<_, _> = [(x, Polynomial::var(x)), (y, Polynomial::var(y))].into();
        let r = p("x*y^3 - 2", &mut t);
        assert_eq!(r.compose(&ident, &t).unwrap(), r);
        let d = p("2.439 - v^2", &mut t);
        let v = t.get("v").unwrap();
        let out: BTreeMap<_, _> = [(v, Polynomial::var(v))].into();
        assert_eq!(d.compose(&out, &t).unwrap(), d);
        let missing: BTreeMap<VarId, Polynomial> = BTreeMap::new();
        assert!(d.compose(&missing, &t).is_err());
    }

    #[test]
    fn basis_examples() {
        let mut t = VarTable::new();
        let (x, y) = (t.intern("x"), t.intern("y"));
        let b: Vec<String> = monomial_basis(&[x], 2).iter().map(|m| m.to_text(&t)).collect();
        assert_eq!(b, ["", "x", "x^2"]);
        let b: Vec<String> = monomial_basis(&[x, y], 1).iter().map(|m| m.to_text(&t)).collect();
        assert_eq!(b, ["", "x", "y"]);
        let b: Vec<String> = monomial_basis(&[x, y], 2).iter().map(|m| m.to_text(&t)).collect();
        assert_eq!(b, ["", "x", "y", "x^2", "x*y", "y^2"]);
    }

    #[test]
    fn basis_count_is_binomial() {
        let vars: Vec<VarId> = (0..4).collect();
        for d in 0..5u32 {
            let n = monomial_basis(&vars, d).len();
            let expect = (1..=d as usize).fold(1usize, |a, k| a * (4 + k) / k);
            assert_eq!(n, expect);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut t = VarTable::new();
        let q = p("3.5*x1^2*v2 - 0.8 + 1e-20*x1 - v2", &mut t);
        let s = q.to_text(&t);
        assert_eq!(s, "3.5*x1^2*v2 + 1e-20*x1 - v2 - 0.8");
        assert_eq!(Polynomial::parse(&s, &mut t).unwrap().to_text(&t), s);
        assert_eq!(Polynomial::zero().to_text(&t), "0");
        assert_eq!(p("-x", &mut t).to_text(&t), "-x");
    }

    #[test]
    fn parser_rejects_non_polynomials() {
        let mut t = VarTable::new();
        for bad in ["x/y", "1/x", "x^1.5", "x^-1", "x^", "2*", "(x+1", "x $ y", ""] {
            assert!(Polynomial::parse(bad, &mut t).is_err(), "{bad}");
        }
        match Polynomial::parse("x + 2/y", &mut t) {
            Err(PolyError::Parse { column, .. }) => assert_eq!(column, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parser_handles_exponent_numbers_and_e_variables() {
        let mut t = VarTable::new();
        assert_eq!(p("2e3", &mut t), Polynomial::constant(2000.0));
        let q = p("2*e + e^2", &mut t);
        let e = t.get("e").unwrap();
        assert_eq!(q.coeff(&Monomial::var(e)), 2.0);
    }

    #[test]
    fn shift_matches_compose() {
        let mut t = VarTable::new();
        let q = p("-x^2 + 50*x - 600", &mut t);
        let x = t.get("x").unwrap();
        let shifted = q.shift(&[(x, 25.0)].into());
        assert_eq!(shifted, p("25 - x^2", &mut t));
    }
}
