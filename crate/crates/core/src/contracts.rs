//! # Subsystems, interconnections and contracts
//!
//! A [`Subsystem`] is a closed-loop polynomial system `ẋ = F(x, w)` with an
//! output map `y = o(x)`, an initial set `{b⁰ ≥ 0}`, a safe region `{q ≥ 0}`
//! and, per input port, a bound `{d(w) ≥ 0}` on the internal input it
//! receives. An [`Interconnection`] wires subsystems together through parent →
//! child edges; the child's port variables are the parent's output
//! variables.
//!
//! A [`Contract`] is the pair of scalar tightenings `(δ, ζ)` together with the
//! barrier polynomial `h` certifying that, while the inputs stay in
//! `{d ≥ δ}`, trajectories from the initial set stay in `{h ≥ 0} ⊆ {q ≥ ζ}`.
//! Contracts of a parent and child are compatible when the parent's invariant
//! set maps into the child's assumption; [`check_compatibility`] establishes
//! this with a one-multiplier S-procedure SOS program.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::poly::{Polynomial, PolynomialVector, VarId, VarTable};
use crate::sos::{self, PolynomialVariable, SosError, SosEvidence, SosExpr, SosProgram, SosSettings};

/// Subsystem identifier (ascending order is the deterministic processing
/// order).
pub type SubsystemId = u32;

/// Coordinate shift `x ↦ x + c` used when building SOS programs.
pub type Shift = BTreeMap<VarId, f64>;

// ---------------------------------------------------------------------------
// Subsystems
// ---------------------------------------------------------------------------

/// Where an input port's signal comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Output of another subsystem.
    Subsystem(SubsystemId),
    /// A signal from outside the network, known to lie in `{set ≥ 0}`.
    Exogenous {
        /// Name of the exogenous signal.
        name: String,
        /// Set the signal is known to lie in.
        set: PolynomialVector,
    },
}

/// One internal input of a subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPort {
    /// Signal source.
    pub source: InputSource,
    /// Variables carrying the signal (equal to the parent's output variables).
    pub vars: Vec<VarId>,
    /// Assumed bound `{d(vars) ≥ 0}` before tightening.
    pub bound: PolynomialVector,
}

/// A closed-loop polynomial subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    /// Identifier.
    pub id: SubsystemId,
    /// State variables.
    pub states: Vec<VarId>,
    /// Closed-loop vector field over states and input variables.
    pub dynamics: Vec<Polynomial>,
    /// Output variable names seen by children.
    pub output_vars: Vec<VarId>,
    /// Output map over states.
    pub output_map: PolynomialVector,
    /// Initial set `{b⁰ ≥ 0}`.
    pub initial_set: PolynomialVector,
    /// Safe region `{q ≥ 0}`.
    pub safe_region: PolynomialVector,
    /// Input ports in declaration order.
    pub inputs: Vec<InputPort>,
    /// Per-subsystem class-K gain override.
    pub gain_a: Option<f64>,
}

impl Subsystem {
    /// All input variables in port order.
    pub fn input_vars(&self) -> Vec<VarId> {
        self.inputs.iter().flat_map(|p| p.vars.iter().copied()).collect()
    }

    /// Parent subsystems (exogenous sources excluded), in port order.
    pub fn parents(&self) -> Vec<SubsystemId> {
        self.inputs
            .iter()
            .filter_map(|p| match p.source {
                InputSource::Subsystem(j) => Some(j),
                InputSource::Exogenous { .. } => None,
            })
            .collect()
    }

    /// Port receiving the output of `parent`.
    pub fn port_from(&self, parent: SubsystemId) -> Option<&InputPort> {
        self.inputs.iter().find(|p| p.source == InputSource::Subsystem(parent))
    }

    /// Substitution `output var ↦ o(x)`.
    pub fn output_substitution(&self) -> BTreeMap<VarId, Polynomial> {
        self.output_vars.iter().copied().zip(self.output_map.entries().iter().cloned()).collect()
    }
}

/// A network of subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct Interconnection {
    /// Variable names.
    pub vars: VarTable,
    /// Subsystems by id.
    pub subsystems: BTreeMap<SubsystemId, Subsystem>,
    /// Edges `(parent, child)`.
    pub edges: BTreeSet<(SubsystemId, SubsystemId)>,
}

impl Interconnection {
    /// Parents of `i` (ascending).
    pub fn parents(&self, i: SubsystemId) -> Vec<SubsystemId> {
        self.edges.iter().filter(|(_, c)| *c == i).map(|(p, _)| *p).collect()
    }

    /// Children of `i` (ascending).
    pub fn children(&self, i: SubsystemId) -> Vec<SubsystemId> {
        self.edges.iter().filter(|(p, _)| *p == i).map(|(_, c)| *c).collect()
    }

    /// Subsystem ids (ascending).
    pub fn ids(&self) -> Vec<SubsystemId> {
        self.subsystems.keys().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A structural problem with an interconnection.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Edge endpoint is not a declared subsystem.
    UnknownSubsystem {
        /// Offending edge.
        edge: (SubsystemId, SubsystemId),
    },
    /// Edge without a matching input port on the child.
    EdgeWithoutPort {
        /// Offending edge.
        edge: (SubsystemId, SubsystemId),
    },
    /// Input port whose parent is not connected by an edge.
    PortWithoutEdge {
        /// Child.
        child: SubsystemId,
        /// Declared parent.
        parent: SubsystemId,
    },
    /// Port variables differ from the parent's output variables.
    PortMismatch {
        /// Child.
        child: SubsystemId,
        /// Parent.
        parent: SubsystemId,
    },
    /// Vector sizes disagree.
    Dimension {
        /// Subsystem.
        subsystem: SubsystemId,
        /// Description.
        what: String,
    },
    /// A polynomial uses a variable outside its universe.
    ForeignVariable {
        /// Subsystem.
        subsystem: SubsystemId,
        /// Which polynomial.
        what: String,
        /// Variable name.
        var: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownSubsystem { edge } => {
                write!(f, "edge {} -> {} references an unknown subsystem", edge.0, edge.1)
            }
            Violation::EdgeWithoutPort { edge } => {
                write!(f, "edge {} -> {} has no input port on the child", edge.0, edge.1)
            }
            Violation::PortWithoutEdge { child, parent } => {
                write!(f, "subsystem {child} has an input from {parent} but no such edge")
            }
            Violation::PortMismatch { child, parent } => {
                write!(f, "subsystem {child}: input variables from {parent} differ from {parent}'s output variables")
            }
            Violation::Dimension { subsystem, what } => write!(f, "subsystem {subsystem}: {what}"),
            Violation::ForeignVariable { subsystem, what, var } => {
                write!(f, "subsystem {subsystem}: {what} uses variable `{var}` outside its universe")
            }
        }
    }
}

/// Lists every structural violation (empty when the interconnection is valid).
pub fn validate_interconnection(sys: &Interconnection) -> Vec<Violation> {
    let mut out = Vec::new();
    for &(p, c) in &sys.edges {
        if !sys.subsystems.contains_key(&p) || !sys.subsystems.contains_key(&c) {
            out.push(Violation::UnknownSubsystem { edge: (p, c) });
            continue;
        }
        if sys.subsystems[&c].port_from(p).is_none() {
            out.push(Violation::EdgeWithoutPort { edge: (p, c) });
        }
    }
    for (&id, s) in &sys.subsystems {
        let foreign = |what: &str, polys: &[Polynomial], allowed: &BTreeSet<VarId>, out: &mut Vec<Violation>| {
            for p in polys {
                if let Some(v) = p.variables().into_iter().find(|v| !allowed.contains(v)) {
                    out.push(Violation::ForeignVariable {
                        subsystem: id,
                        what: what.to_string(),
                        var: sys.vars.name(v),
                    });
                    return;
                }
            }
        };
        let states: BTreeSet<VarId> = s.states.iter().copied().collect();
        let mut state_inputs = states.clone();
        state_inputs.extend(s.input_vars());
        if s.dynamics.len() != s.states.len() {
            out.push(Violation::Dimension { subsystem: id, what: "dynamics length differs from state count".into() });
        }
        if s.output_map.len() != s.output_vars.len() {
            out.push(Violation::Dimension {
                subsystem: id,
                what: "output map length differs from output variables".into(),
            });
        }
        if s.initial_set.is_empty() || s.safe_region.is_empty() {
            out.push(Violation::Dimension {
                subsystem: id,
                what: "initial set and safe region must be nonempty".into(),
            });
        }
        foreign("dynamics", &s.dynamics, &state_inputs, &mut out);
        foreign("output map", s.output_map.entries(), &states, &mut out);
        foreign("initial set", s.initial_set.entries(), &states, &mut out);
        foreign("safe region", s.safe_region.entries(), &states, &mut out);
        for port in &s.inputs {
            let pv: BTreeSet<VarId> = port.vars.iter().copied().collect();
            if port.bound.is_empty() {
                out.push(Violation::Dimension { subsystem: id, what: "input bound must be nonempty".into() });
            }
            foreign("input bound", port.bound.entries(), &pv, &mut out);
            match &port.source {
                InputSource::Subsystem(j) => {
                    if !sys.edges.contains(&(*j, id)) {
                        out.push(Violation::PortWithoutEdge { child: id, parent: *j });
                    }
                    if let Some(parent) = sys.subsystems.get(j) {
                        if parent.output_vars != port.vars {
                            out.push(Violation::PortMismatch { child: id, parent: *j });
                        }
                    }
                }
                InputSource::Exogenous { set, .. } => foreign("exogenous set", set.entries(), &pv, &mut out),
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Structural class of an interconnection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphClass {
    /// No directed cycle.
    Acyclic,
    /// Cyclic, with structurally identical subsystems.
    Homogeneous,
    /// Anything else.
    General,
}

/// True when the edge relation has a directed cycle.
pub fn has_cycle(sys: &Interconnection) -> bool {
    let mut indeg: BTreeMap<SubsystemId, usize> = sys.subsystems.keys().map(|&k| (k, 0)).collect();
    for &(_, c) in &sys.edges {
        *indeg.entry(c).or_insert(0) += 1;
    }
    let mut queue: Vec<SubsystemId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut seen = 0;
    while let Some(n) = queue.pop() {
        seen += 1;
        for c in sys.children(n) {
            let d = indeg.get_mut(&c).expect("validated edge");
            *d -= 1;
            if *d == 0 {
                queue.push(c);
            }
        }
    }
    seen < indeg.len()
}

/// Canonical, name-independent form of a subsystem under a given order of its
/// input ports.
#[derive(Debug, Clone, PartialEq)]
struct CanonicalForm {
    dims: (usize, usize, Vec<usize>),
    dynamics: Vec<Polynomial>,
    output_map: Vec<Polynomial>,
    initial: Vec<Polynomial>,
    safe: Vec<Polynomial>,
    ports: Vec<(Option<Vec<Polynomial>>, Vec<Polynomial>)>,
    gain: Option<u64>,
}

const CANON_BASE: VarId = usize::MAX / 2;

fn canonical(s: &Subsystem, order: &[usize]) -> CanonicalForm {
    let mut map: HashMap<VarId, VarId> = HashMap::new();
    for (k, &v) in s.states.iter().enumerate() {
        map.insert(v, CANON_BASE + k);
    }
    let mut next = CANON_BASE + s.states.len();
    for &p in order {
        for &v in &s.inputs[p].vars {
            map.insert(v, next);
            next += 1;
        }
    }
    let ren = |ps: &[Polynomial]| -> Vec<Polynomial> { ps.iter().map(|p| p.rename(&map)).collect() };
    CanonicalForm {
        dims: (s.states.len(), s.output_vars.len(), order.iter().map(|&p| s.inputs[p].vars.len()).collect()),
        dynamics: ren(&s.dynamics),
        output_map: ren(s.output_map.entries()),
        initial: ren(s.initial_set.entries()),
        safe: ren(s.safe_region.entries()),
        ports: order
            .iter()
            .map(|&p| {
                let port = &s.inputs[p];
                let exo = match &port.source {
                    InputSource::Subsystem(_) => None,
                    InputSource::Exogenous { set, .. } => Some(ren(set.entries())),
                };
                (exo, ren(port.bound.entries()))
            })
            .collect(),
        gain: s.gain_a.map(f64::to_bits),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// True when `b` equals `a` after renaming variables and reordering input
/// ports.
pub fn structurally_equal(a: &Subsystem, b: &Subsystem) -> bool {
    structural_correspondence(a, b).is_some()
}

/// Variable renaming `a → b` and port correspondence (`a`'s port `k` is
/// `b`'s port `perm[k]`) under which `b` equals `a`, if any.
pub fn structural_correspondence(a: &Subsystem, b: &Subsystem) -> Option<(HashMap<VarId, VarId>, Vec<usize>)> {
    if a.inputs.len() != b.inputs.len() || a.inputs.len() > 8 || a.states.len() != b.states.len() {
        return None;
    }
    let ident: Vec<usize> = (0..a.inputs.len()).collect();
    let ca = canonical(a, &ident);
    let perm = permutations(b.inputs.len()).into_iter().find(|perm| canonical(b, perm) == ca)?;
    let mut map: HashMap<VarId, VarId> = a.states.iter().copied().zip(b.states.iter().copied()).collect();
    for (k, &pb) in perm.iter().enumerate() {
        map.extend(a.inputs[k].vars.iter().copied().zip(b.inputs[pb].vars.iter().copied()));
    }
    Some((map, perm))
}

/// Classifies an interconnection; acyclic takes precedence over homogeneous.
pub fn classify(sys: &Interconnection) -> GraphClass {
    if !has_cycle(sys) {
        return GraphClass::Acyclic;
    }
    let mut it = sys.subsystems.values();
    let Some(first) = it.next() else { return GraphClass::Acyclic };
    let n_parents = sys.parents(first.id).len();
    let homogeneous =
        sys.subsystems.values().all(|s| sys.parents(s.id).len() == n_parents && structurally_equal(first, s));
    if homogeneous {
        GraphClass::Homogeneous
    } else {
        GraphClass::General
    }
}

// ---------------------------------------------------------------------------
// Contracts and evidence
// ---------------------------------------------------------------------------

/// An assume-guarantee contract with its certifying evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    /// Subsystem.
    pub subsystem: SubsystemId,
    /// Assumption tightening: inputs lie in `{d ≥ δ}`.
    pub delta: f64,
    /// Guarantee tightening: `{h ≥ 0} ⊆ {q ≥ ζ}`.
    pub zeta: f64,
    /// Working safe-region tightening the barrier condition is localized to.
    pub zeta_working: f64,
    /// Class-K gain used.
    pub gain_a: f64,
    /// Barrier polynomial in the model's coordinates.
    pub barrier: Polynomial,
    /// Shift of the coordinates the evidence was computed in.
    pub shift: Shift,
    /// Unknowns and Gram matrices of the certifying program (shifted
    /// coordinates).
    pub evidence: SosEvidence,
}

impl Contract {
    /// Assumption set `{d − δ ≥ 0}` on the port from `parent`.
    pub fn assumption_set(&self, sub: &Subsystem, parent: SubsystemId) -> Option<PolynomialVector> {
        project_assumption(sub, parent, self.delta)
    }
}

/// `d^child_parent − δ·1`, or `None` when `parent` is not a neighbour.
pub fn project_assumption(child: &Subsystem, parent: SubsystemId, delta: f64) -> Option<PolynomialVector> {
    child.port_from(parent).map(|p| p.bound.tighten(delta))
}

/// Evidence that the parent's guarantee implies the child's assumption
/// (or, for exogenous sources, that the known signal set does).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEvidence {
    /// Source of the signal.
    pub source: EdgeSource,
    /// Child subsystem.
    pub child: SubsystemId,
    /// Child's assumption tightening.
    pub delta: f64,
    /// Coordinate shift used.
    pub shift: Shift,
    /// Certifying unknowns and Gram matrices.
    pub evidence: SosEvidence,
}

/// Parent side of an [`EdgeEvidence`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeSource {
    /// Another subsystem.
    Subsystem(SubsystemId),
    /// Exogenous signal by name.
    Exogenous(String),
}

impl fmt::Display for EdgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeSource::Subsystem(j) => write!(f, "{j}"),
            EdgeSource::Exogenous(n) => write!(f, "{n}"),
        }
    }
}

/// Rounds a degree up to the next even number.
pub fn even_up(d: u32) -> u32 {
    d + d % 2
}

/// SOS program establishing `{guard ≥ 0} ⇒ d∘o − δ ≥ 0` componentwise:
/// `(d_c∘o − δ) − σ_c·guard ∈ Σ[vars]` with `σ_c ∈ Σ[vars]` of degree
/// `multiplier_degree`.
///
/// `target` is `d∘o` (already composed and shifted); `guard` the shifted
/// guarantee polynomials (one multiplier each, summed).
pub fn containment_program(
    target: &PolynomialVector,
    delta: f64,
    guard: &[Polynomial],
    vars: &[VarId],
    multiplier_degree: &dyn Fn(&Polynomial, &Polynomial) -> u32,
) -> SosProgram {
    let mut program = SosProgram::new();
    for (c, d) in target.entries().iter().enumerate() {
        let mut expr = SosExpr::known(d.sub(&Polynomial::constant(delta)));
        for (g, gp) in guard.iter().enumerate() {
            let name = format!("sigma_{c}_{g}");
            let sigma = program
                .add_unknown(PolynomialVariable::sos(&name, vars, even_up(multiplier_degree(d, gp))))
                .expect("fresh multiplier name");
            expr = expr.sub(sigma.mul_known(gp));
        }
        program.add_sos_constraint(&format!("contain_{c}"), expr, vars);
    }
    program
}

/// Compatibility program for edge `parent → child` in the parent's shifted
/// coordinates: `d∘o_j − δ − σ·h_j ∈ Σ[x_j]`, `deg σ = deg h`.
pub fn compatibility_program(
    parent: &Subsystem,
    parent_contract: &Contract,
    child: &Subsystem,
    child_delta: f64,
) -> Option<SosProgram> {
    let port = child.port_from(parent.id)?;
    let subst: BTreeMap<VarId, Polynomial> = port
        .vars
        .iter()
        .copied()
        .zip(parent.output_map.entries().iter().map(|o| o.shift(&parent_contract.shift)))
        .collect();
    let target = port.bound.map(|d| d.compose_partial(&subst));
    let h = parent_contract.barrier.shift(&parent_contract.shift);
    let hdeg = h.degree();
    Some(containment_program(&target, child_delta, &[h], &parent.states, &|_, _| hdeg))
}

/// Checks that `parent_contract`'s guarantee implies `child`'s assumption at
/// tightening `child_delta`.
pub fn check_compatibility(
    parent: &Subsystem,
    parent_contract: &Contract,
    child: &Subsystem,
    child_delta: f64,
    settings: &SosSettings,
) -> Result<EdgeEvidence, SosError> {
    let program = compatibility_program(parent, parent_contract, child, child_delta)
        .ok_or_else(|| SosError::Undeclared(format!("port from {} on {}", parent.id, child.id)))?;
    let sol = sos::solve(&program, settings)?;
    Ok(EdgeEvidence {
        source: EdgeSource::Subsystem(parent.id),
        child: child.id,
        delta: child_delta,
        shift: parent_contract.shift.clone(),
        evidence: SosEvidence::from(&sol),
    })
}

/// Program establishing that an exogenous signal set lies inside the child's
/// assumption: `d − δ − σ·e ∈ Σ[y]`, shifted by `shift`.
pub fn exogenous_program(port: &InputPort, delta: f64, shift: &Shift) -> Option<SosProgram> {
    let InputSource::Exogenous { set, .. } = &port.source else { return None };
    let target = port.bound.map(|d| d.shift(shift));
    let guard: Vec<Polynomial> = set.entries().iter().map(|e| e.shift(shift)).collect();
    Some(containment_program(&target, delta, &guard, &port.vars, &|d, g| d.degree().saturating_sub(g.degree())))
}

/// Checks an exogenous input's known set against the child's assumption.
pub fn check_exogenous(
    child: &Subsystem,
    port: &InputPort,
    delta: f64,
    shift: &Shift,
    settings: &SosSettings,
) -> Result<EdgeEvidence, SosError> {
    let program = exogenous_program(port, delta, shift).ok_or_else(|| SosError::Undeclared("exogenous port".into()))?;
    let sol = sos::solve(&program, settings)?;
    let name = match &port.source {
        InputSource::Exogenous { name, .. } => name.clone(),
        InputSource::Subsystem(j) => j.to_string(),
    };
    Ok(EdgeEvidence {
        source: EdgeSource::Exogenous(name),
        child: child.id,
        delta,
        shift: shift.clone(),
        evidence: SosEvidence::from(&sol),
    })
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draws up to `count` points of the box `bounds` satisfying `accept`, using
/// a seeded generator (at most `100·count` draws).
pub fn sample_in_box(bounds: &[(f64, f64)], count: usize, seed: u64, accept: impl Fn(&[f64]) -> bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..count * 100 {
        if out.len() == count {
            break;
        }
        let p: Vec<f64> = bounds.iter().map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect();
        if accept(&p) {
            out.push(p);
        }
    }
    out
}

/// Evaluates a polynomial at a dense point over the given variable order.
pub fn eval_at(p: &Polynomial, vars: &[VarId], point: &[f64]) -> f64 {
    p.eval_with(&|v| vars.iter().position(|&u| u == v).map(|k| point[k]).unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Certificate
// ---------------------------------------------------------------------------

/// Final verdict of a negotiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Every contract certified and every edge compatible.
    True,
    /// Not certified (see the failure reason).
    False,
}

/// Machine-readable reason for a `False` verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureReason {
    /// Node where negotiation stopped.
    pub node: Option<SubsystemId>,
    /// Program that failed.
    pub program: String,
    /// Bracket endpoint or parameter value involved.
    pub endpoint: Option<f64>,
    /// Human-readable detail.
    pub detail: String,
}

/// One negotiation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Sequence number.
    pub step: usize,
    /// Node (if node-specific).
    pub node: Option<SubsystemId>,
    /// Operation name.
    pub operation: String,
    /// Scalar results.
    pub results: BTreeMap<String, f64>,
    /// Status string.
    pub status: String,
}

/// Outcome of the premise check for the homogeneous algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct PremiseCheck {
    /// Smallest level `a` found with `{q ≥ a} ⊆ X⁰`, if any.
    pub level: Option<f64>,
    /// Whether the premise was verified.
    pub holds: bool,
}

/// Full verification artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Verdict.
    pub verdict: Verdict,
    /// Algorithm that produced it.
    pub algorithm: String,
    /// Negotiation rounds (1 for acyclic).
    pub iterations: usize,
    /// Contracts by subsystem.
    pub contracts: BTreeMap<SubsystemId, Contract>,
    /// Compatibility evidence per edge, including exogenous inputs.
    pub edges: Vec<EdgeEvidence>,
    /// Failure reason for `False` verdicts.
    pub reason: Option<FailureReason>,
    /// Homogeneous-algorithm premise outcome.
    pub premise: Option<PremiseCheck>,
    /// Ordered log of negotiation steps.
    pub trace: Vec<TraceRecord>,
}

impl Certificate {
    /// Structural check of the hypotheses behind a `True` verdict: every
    /// subsystem has a contract and every edge (and exogenous input) has
    /// evidence.
    pub fn structural_problems(&self, sys: &Interconnection) -> Vec<String> {
        let mut out = Vec::new();
        if self.verdict != Verdict::True {
            return out;
        }
        for id in sys.subsystems.keys() {
            if !self.contracts.contains_key(id) {
                out.push(format!("subsystem {id} has no contract"));
            }
        }
        for &(p, c) in &sys.edges {
            if !self.edges.iter().any(|e| e.source == EdgeSource::Subsystem(p) && e.child == c) {
                out.push(format!("edge {p} -> {c} has no compatibility evidence"));
            }
        }
        for s in sys.subsystems.values() {
            for port in &s.inputs {
                if let InputSource::Exogenous { name, .. } = &port.source {
                    if !self.edges.iter().any(|e| e.source == EdgeSource::Exogenous(name.clone()) && e.child == s.id) {
                        out.push(format!("exogenous input {name} of {} has no evidence", s.id));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(texts: &[&str], t: &mut VarTable) -> PolynomialVector {
        PolynomialVector::new(texts.iter().map(|s| Polynomial::parse(s, t).unwrap()).collect())
    }

    /// Scalar ring of `n` identical subsystems `ẋᵢ = −xᵢ + 0.1(x_{i−1} + x_{i+1})`.
    fn ring(n: u32, perturb: bool) -> Interconnection {
        let mut t = VarTable::new();
        let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        for nm in &names {
            t.intern(nm);
        }
        let mut subsystems = BTreeMap::new();
        let mut edges = BTreeSet::new();
        for i in 1..=n {
            let prev = if i == 1 { n } else { i - 1 };
            let next = if i == n { 1 } else { i + 1 };
            let me = &names[(i - 1) as usize];
            let a = &names[(prev - 1) as usize];
            let b = &names[(next - 1) as usize];
            let k = if perturb && i == 2 { "0.2" } else { "0.1" };
            let dynamics = vec![Polynomial::parse(&format!("-{me} + {k}*{a} + {k}*{b}"), &mut t).unwrap()];
            let port = |src: u32, v: &str, t: &mut VarTable| InputPort {
                source: InputSource::Subsystem(src),
                vars: vec![t.get(v).unwrap()],
                bound: pv(&[&format!("1 - {v}^2")], t),
            };
            let inputs = vec![port(prev, a, &mut t), port(next, b, &mut t)];
            let s = Subsystem {
                id: i,
                states: vec![t.get(me).unwrap()],
                dynamics,
                output_vars: vec![t.get(me).unwrap()],
                output_map: pv(&[me], &mut t),
                initial_set: pv(&[&format!("0.25 - {me}^2")], &mut t),
                safe_region: pv(&[&format!("1 - {me}^2")], &mut t),
                inputs,
                gain_a: None,
            };
            subsystems.insert(i, s);
            edges.insert((prev, i));
            edges.insert((next, i));
        }
        Interconnection { vars: t, subsystems, edges }
    }

    fn chain() -> Interconnection {
        let mut sys = ring(3, false);
        // Drop the wrap-around edges and ports to get 1 → 2 → 3 (plus back edges removed).
        sys.edges = [(1, 2), (2, 3)].into_iter().collect();
        for s in sys.subsystems.values_mut() {
            s.inputs.retain(|p| matches!(p.source, InputSource::Subsystem(j) if sys.edges.contains(&(j, s.id))));
            let me = Polynomial::var(s.states[0]).scale(-1.0);
            s.dynamics = vec![match s.inputs.first() {
                Some(p) => me.add(&Polynomial::var(p.vars[0]).scale(0.1)),
                None => me,
            }];
        }
        sys
    }

    #[test]
    fn ring_is_valid_and_homogeneous() {
        let sys = ring(4, false);
        assert!(validate_interconnection(&sys).is_empty(), "{:?}", validate_interconnection(&sys));
        assert_eq!(classify(&sys), GraphClass::Homogeneous);
    }

    #[test]
    fn perturbed_ring_is_general() {
        assert_eq!(classify(&ring(4, true)), GraphClass::General);
    }

    #[test]
    fn chain_is_acyclic() {
        let sys = chain();
        assert!(validate_interconnection(&sys).is_empty(), "{:?}", validate_interconnection(&sys));
        assert_eq!(classify(&sys), GraphClass::Acyclic);
    }

    #[test]
    fn unknown_edge_endpoint_is_a_violation() {
        let mut sys = chain();
        sys.edges.insert((3, 9));
        assert!(validate_interconnection(&sys).contains(&Violation::UnknownSubsystem { edge: (3, 9) }));
    }

    #[test]
    fn projection_folds_in_delta() {
        let sys = chain();
        let child = &sys.subsystems[&2];
        let w = project_assumption(child, 1, 0.25).unwrap();
        assert_eq!(w.to_texts(&sys.vars), vec!["-x1^2 + 0.75".to_string()]);
        assert_eq!(project_assumption(child, 1, 0.0).unwrap(), child.inputs[0].bound);
        assert!(project_assumption(child, 3, 0.0).is_none());
    }

    #[test]
    fn classification_is_invariant_under_reindexing() {
        let sys = ring(4, false);
        let shift = |i: u32| (i % 4) + 10;
        let mut re = sys.clone();
        re.subsystems = sys
            .subsystems
            .values()
            .map(|s| {
                let mut s = s.clone();
                s.id = shift(s.id);
                for p in &mut s.inputs {
                    if let InputSource::Subsystem(j) = p.source {
                        p.source = InputSource::Subsystem(shift(j));
                    }
                }
                (s.id, s)
            })
            .collect();
        re.edges = sys.edges.iter().map(|&(a, b)| (shift(a), shift(b))).collect();
        assert_eq!(classify(&re), classify(&sys));
    }

    #[test]
    fn trivial_compatibility_holds_with_zero_delta() {
        // Parent guarantee {h ≥ 0}, child bound d = 1 + w² (globally ≥ 0).
        let mut t = VarTable::new();
        let x = t.intern("x");
        let mut sys = chain();
        let parent = sys.subsystems.get_mut(&1).unwrap();
        let _ = x;
        let h = Polynomial::parse("0.5 - x1^2", &mut sys.vars).unwrap();
        let contract = Contract {
            subsystem: 1,
            delta: 0.0,
            zeta: 0.0,
            zeta_working: 0.0,
            gain_a: 1.0,
            barrier: h,
            shift: Shift::new(),
            evidence: SosEvidence::default(),
        };
        let parent = parent.clone();
        let child = &sys.subsystems[&2];
        let ev = check_compatibility(&parent, &contract, child, 0.0, &SosSettings::default()).unwrap();
        assert_eq!(ev.source, EdgeSource::Subsystem(1));
        // Sampled implication: h ≥ 0 ⇒ d∘o − δ ≥ −1e-6.
        let d = &child.inputs[0].bound.entries()[0];
        let pts = sample_in_box(&[(-2.0, 2.0)], 1000, 1, |p| eval_at(&contract.barrier, &parent.states, p) >= 0.0);
        assert!(pts.len() == 1000);
        for p in pts {
            assert!(eval_at(d, &parent.output_vars, &p) >= -1e-6);
        }
        // A tightening beyond what the guarantee supports is not established.
        assert!(check_compatibility(&parent, &contract, child, 0.6, &SosSettings::default()).is_err());
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(0).len(), 1);
    }
}
