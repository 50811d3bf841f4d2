//! # Contract negotiation
//!
//! Turns local contract synthesis into a verdict for the whole
//! interconnection:
//!
//! * **Acyclic** graphs are processed leaves first. Each subsystem tightens
//!   its working safe region until its outputs satisfy every child's
//!   assumption, then computes its largest tolerable input set (δ*) and its
//!   smallest guaranteed region (ζ*), which its own parents must respect.
//! * **Homogeneous** cyclic graphs (structurally identical subsystems) solve
//!   one representative, broadcast the contract by renaming, and tighten the
//!   shared working region until every edge is compatible.
//! * **General** graphs run the acyclic procedure on the part that cannot
//!   reach a cycle, then iterate the cyclic part jointly, tightening the
//!   working regions after each failed round.
//!
//! Every `True` verdict carries per-edge evidence that can be re-checked
//! without solving anything via [`check_certificate`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::contracts::{
    check_compatibility, check_exogenous, classify, compatibility_program, exogenous_program,
    structural_correspondence, validate_interconnection, Certificate, Contract, EdgeEvidence, EdgeSource,
    FailureReason, GraphClass, InputSource, Interconnection, PremiseCheck, SubsystemId, TraceRecord, Verdict,
};
use crate::sos::{self, SosEvidence};
use crate::synthesis::{
    barrier_program, maximal_internal_input_set, minimal_safe_region, premise_level, prepare, sample_margins,
    update_safe_region, BarrierParams, ChildAssumption, LocalContext, SynthesisConfig, SynthesisFailure, BARRIER,
    SAMPLE_MARGIN,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Negotiation procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Pick from the graph class.
    Auto,
    /// Leaves-first negotiation (acyclic graphs only).
    Acyclic,
    /// Representative-and-broadcast (homogeneous cyclic graphs only).
    Homogeneous,
    /// Joint iteration on the cyclic part (any graph).
    General,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Auto => "auto",
            Algorithm::Acyclic => "acyclic",
            Algorithm::Homogeneous => "homogeneous",
            Algorithm::General => "general",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Algorithm::Auto),
            "acyclic" => Ok(Algorithm::Acyclic),
            "homogeneous" => Ok(Algorithm::Homogeneous),
            "general" => Ok(Algorithm::General),
            other => Err(format!("unknown algorithm '{other}' (expected auto, acyclic, homogeneous or general)")),
        }
    }
}

/// Negotiation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationConfig {
    /// Local program settings.
    pub synthesis: SynthesisConfig,
    /// Procedure to run.
    pub algorithm: Algorithm,
    /// Iteration cap for the cyclic procedures.
    pub max_iterations: usize,
    /// Tighten only the parents of failed edges (general procedure).
    pub selective_tightening: bool,
    /// Sample count per condition in certificate checks.
    pub sample_count: usize,
    /// Seed for sampling checks.
    pub seed: u64,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        Self {
            synthesis: SynthesisConfig::default(),
            algorithm: Algorithm::Auto,
            max_iterations: 50,
            selective_tightening: false,
            sample_count: 1000,
            seed: 0,
        }
    }
}

/// Errors that prevent negotiation from starting.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NegotiationError {
    /// The interconnection is malformed.
    #[error("invalid interconnection: {0}")]
    Invalid(String),
    /// The requested procedure does not apply to the graph.
    #[error("algorithm {requested} does not apply to a {class:?} interconnection")]
    Mismatch {
        /// Requested procedure.
        requested: Algorithm,
        /// Detected class.
        class: GraphClass,
    },
    /// Invalid settings.
    #[error("invalid configuration: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct Trace(Vec<TraceRecord>);

impl Trace {
    fn push(&mut self, node: Option<SubsystemId>, operation: &str, results: &[(&str, f64)], status: &str) {
        let step = self.0.len();
        self.0.push(TraceRecord {
            step,
            node,
            operation: operation.to_string(),
            results: results.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            status: status.to_string(),
        });
    }

    fn fail(&mut self, f: &SynthesisFailure) -> FailureReason {
        self.push(Some(f.node), &f.program, &f.endpoint.map(|e| vec![("endpoint", e)]).unwrap_or_default(), "failed");
        to_reason(f)
    }
}

fn to_reason(f: &SynthesisFailure) -> FailureReason {
    FailureReason { node: Some(f.node), program: f.program.clone(), endpoint: f.endpoint, detail: f.detail.clone() }
}

// ---------------------------------------------------------------------------
// Shared steps
// ---------------------------------------------------------------------------

/// Moves the processed `ready` nodes to `done` and returns the new
/// `(done, ready)`: nodes not yet done whose children are all done.
pub fn update_index_sets(
    sys: &Interconnection,
    done: &BTreeSet<SubsystemId>,
    ready: &BTreeSet<SubsystemId>,
) -> (BTreeSet<SubsystemId>, BTreeSet<SubsystemId>) {
    let done: BTreeSet<SubsystemId> = done.union(ready).copied().collect();
    let ready = sys
        .subsystems
        .keys()
        .copied()
        .filter(|n| !done.contains(n) && sys.children(*n).iter().all(|c| done.contains(c)))
        .collect();
    (done, ready)
}

/// Assumptions the children of `id` place on its outputs, at the children's
/// current tightenings.
fn child_assumptions(
    sys: &Interconnection,
    id: SubsystemId,
    delta: &BTreeMap<SubsystemId, f64>,
) -> Vec<ChildAssumption> {
    sys.children(id)
        .into_iter()
        .filter_map(|c| {
            let port = sys.subsystems[&c].port_from(id)?;
            Some(ChildAssumption {
                child: c,
                vars: port.vars.clone(),
                bound: port.bound.clone(),
                delta: *delta.get(&c)?,
            })
        })
        .collect()
}

/// δ* then ζ* at working tightening `zeta_w`.
fn local_contract(
    sys: &Interconnection,
    ctx: &LocalContext,
    zeta_w: f64,
    cfg: &SynthesisConfig,
) -> Result<Contract, SynthesisFailure> {
    let sub = &sys.subsystems[&ctx.node];
    let (delta, _) = maximal_internal_input_set(sub, ctx, zeta_w, cfg)?;
    let (_, contract) = minimal_safe_region(sub, ctx, delta, zeta_w, cfg)?;
    Ok(contract)
}

fn record_contract(trace: &mut Trace, c: &Contract) {
    trace.push(Some(c.subsystem), "maximal input set", &[("delta", c.delta), ("zeta_working", c.zeta_working)], "ok");
    trace.push(Some(c.subsystem), "minimal safe region", &[("zeta", c.zeta)], "ok");
}

/// A failed compatibility or exogenous check.
#[derive(Debug, Clone, PartialEq)]
struct EdgeFailure {
    source: EdgeSource,
    child: SubsystemId,
    delta: f64,
    detail: String,
}

impl EdgeFailure {
    fn reason(&self) -> FailureReason {
        let program = match &self.source {
            EdgeSource::Subsystem(p) => format!("compatibility {p} -> {}", self.child),
            EdgeSource::Exogenous(n) => format!("exogenous {n} -> {}", self.child),
        };
        FailureReason { node: Some(self.child), program, endpoint: Some(self.delta), detail: self.detail.clone() }
    }
}

/// Checks every edge and exogenous input against the current contracts.
fn check_edges(
    sys: &Interconnection,
    contracts: &BTreeMap<SubsystemId, Contract>,
    cfg: &SynthesisConfig,
) -> (Vec<EdgeEvidence>, Vec<EdgeFailure>) {
    enum Job<'a> {
        Edge(SubsystemId, SubsystemId),
        Exo(SubsystemId, &'a crate::contracts::InputPort),
    }
    let mut jobs: Vec<Job> = sys.edges.iter().map(|&(p, c)| Job::Edge(p, c)).collect();
    for s in sys.subsystems.values() {
        for port in &s.inputs {
            if matches!(port.source, InputSource::Exogenous { .. }) {
                jobs.push(Job::Exo(s.id, port));
            }
        }
    }
    let results: Vec<Result<EdgeEvidence, EdgeFailure>> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Edge(p, c) => {
                let delta = contracts[&c].delta;
                check_compatibility(&sys.subsystems[&p], &contracts[&p], &sys.subsystems[&c], delta, &cfg.sos).map_err(
                    |e| EdgeFailure { source: EdgeSource::Subsystem(p), child: c, delta, detail: e.to_string() },
                )
            }
            Job::Exo(c, port) => {
                let contract = &contracts[&c];
                check_exogenous(&sys.subsystems[&c], port, contract.delta, &contract.shift, &cfg.sos).map_err(|e| {
                    let InputSource::Exogenous { name, .. } = &port.source else { unreachable!() };
                    EdgeFailure {
                        source: EdgeSource::Exogenous(name.clone()),
                        child: c,
                        delta: contract.delta,
                        detail: e.to_string(),
                    }
                })
            }
        })
        .collect();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(e) => ok.push(e),
            Err(f) => bad.push(f),
        }
    }
    (ok, bad)
}

fn record_edges(trace: &mut Trace, ok: &[EdgeEvidence], bad: &[EdgeFailure]) {
    for e in ok {
        trace.push(Some(e.child), &format!("compatibility {} -> {}", e.source, e.child), &[("delta", e.delta)], "ok");
    }
    for f in bad {
        trace.push(Some(f.child), &f.reason().program, &[("delta", f.delta)], "failed");
    }
}

fn prepare_all(
    sys: &Interconnection,
    cfg: &SynthesisConfig,
) -> Result<BTreeMap<SubsystemId, LocalContext>, SynthesisFailure> {
    let ids = sys.ids();
    let ctxs: Vec<Result<LocalContext, SynthesisFailure>> = ids.par_iter().map(|&i| prepare(sys, i, cfg)).collect();
    ctxs.into_iter().map(|r| r.map(|c| (c.node, c))).collect()
}

/// State of a negotiation in progress.
struct Run<'a> {
    sys: &'a Interconnection,
    cfg: &'a NegotiationConfig,
    algorithm: &'static str,
    contracts: BTreeMap<SubsystemId, Contract>,
    trace: Trace,
    premise: Option<PremiseCheck>,
}

impl<'a> Run<'a> {
    fn new(sys: &'a Interconnection, cfg: &'a NegotiationConfig, algorithm: &'static str) -> Self {
        Self { sys, cfg, algorithm, contracts: BTreeMap::new(), trace: Trace::default(), premise: None }
    }

    fn finish(
        self,
        verdict: Verdict,
        iterations: usize,
        edges: Vec<EdgeEvidence>,
        reason: Option<FailureReason>,
    ) -> Certificate {
        Certificate {
            verdict,
            algorithm: self.algorithm.to_string(),
            iterations,
            contracts: self.contracts,
            edges,
            reason,
            premise: self.premise,
            trace: self.trace.0,
        }
    }

    fn fail(mut self, iterations: usize, f: &SynthesisFailure) -> Certificate {
        let reason = self.trace.fail(f);
        self.finish(Verdict::False, iterations, Vec::new(), Some(reason))
    }

    /// Leaves-first pass over every node whose descendants are acyclic.
    /// Returns the processed nodes.
    fn acyclic_pass(
        &mut self,
        ctxs: &BTreeMap<SubsystemId, LocalContext>,
    ) -> Result<BTreeSet<SubsystemId>, SynthesisFailure> {
        let (mut done, mut ready) = update_index_sets(self.sys, &BTreeSet::new(), &BTreeSet::new());
        while !ready.is_empty() {
            let deltas: BTreeMap<SubsystemId, f64> = self.contracts.iter().map(|(&k, c)| (k, c.delta)).collect();
            let layer: Vec<SubsystemId> = ready.iter().copied().collect();
            let results: Vec<Result<(f64, Contract), SynthesisFailure>> = layer
                .par_iter()
                .map(|&id| {
                    let sub = &self.sys.subsystems[&id];
                    let zw = update_safe_region(
                        sub,
                        &ctxs[&id],
                        &child_assumptions(self.sys, id, &deltas),
                        0.0,
                        &self.cfg.synthesis,
                    )?;
                    Ok((zw, local_contract(self.sys, &ctxs[&id], zw, &self.cfg.synthesis)?))
                })
                .collect();
            for (id, r) in layer.iter().zip(results) {
                let (zw, c) = r?;
                self.trace.push(Some(*id), "safe region update", &[("zeta_working", zw)], "ok");
                record_contract(&mut self.trace, &c);
                self.contracts.insert(*id, c);
            }
            (done, ready) = update_index_sets(self.sys, &done, &ready);
        }
        Ok(done)
    }
}

// ---------------------------------------------------------------------------
// Procedures
// ---------------------------------------------------------------------------

/// Leaves-first negotiation for acyclic interconnections.
pub fn negotiate_acyclic(sys: &Interconnection, cfg: &NegotiationConfig) -> Certificate {
    let mut run = Run::new(sys, cfg, "acyclic");
    let ctxs = match prepare_all(sys, &cfg.synthesis) {
        Ok(c) => c,
        Err(f) => return run.fail(0, &f),
    };
    if let Err(f) = run.acyclic_pass(&ctxs) {
        return run.fail(1, &f);
    }
    let (ok, bad) = check_edges(sys, &run.contracts, &cfg.synthesis);
    record_edges(&mut run.trace, &ok, &bad);
    match bad.first() {
        None => run.finish(Verdict::True, 1, ok, None),
        Some(f) => run.finish(Verdict::False, 1, Vec::new(), Some(f.reason())),
    }
}

/// Renames the representative's contract onto a structurally identical node.
fn broadcast(sys: &Interconnection, rep: &Contract, target: SubsystemId) -> Option<Contract> {
    let (map, perm) = structural_correspondence(&sys.subsystems[&rep.subsystem], &sys.subsystems[&target])?;
    let names = |n: &str| -> String {
        if let Some(rest) = n.strip_prefix("sigma_in_") {
            if let Some((k, c)) = rest.split_once('_') {
                if let Ok(k) = k.parse::<usize>() {
                    return format!("sigma_in_{}_{c}", perm[k]);
                }
            }
        }
        n.to_string()
    };
    let map: HashMap<_, _> = map;
    Some(Contract {
        subsystem: target,
        barrier: rep.barrier.rename(&map),
        shift: rep.shift.iter().map(|(v, &c)| (*map.get(v).unwrap_or(v), c)).collect(),
        evidence: rep.evidence.renamed(&map, names),
        ..rep.clone()
    })
}

/// Representative-and-broadcast negotiation for homogeneous interconnections.
pub fn negotiate_homogeneous(sys: &Interconnection, cfg: &NegotiationConfig) -> Certificate {
    let mut run = Run::new(sys, cfg, "homogeneous");
    let Some(&rep) = sys.subsystems.keys().next() else {
        return run.finish(Verdict::True, 0, Vec::new(), None);
    };
    let ctx = match prepare(sys, rep, &cfg.synthesis) {
        Ok(c) => c,
        Err(f) => return run.fail(0, &f),
    };
    let rep_sub = &sys.subsystems[&rep];
    let level = premise_level(rep_sub, &ctx, &cfg.synthesis);
    run.trace.push(
        Some(rep),
        "premise",
        &level.map(|l| vec![("level", l)]).unwrap_or_default(),
        if level.is_some() { "ok" } else { "failed" },
    );
    run.premise = Some(PremiseCheck { level, holds: level.is_some() });

    let tol = cfg.synthesis.bisection_tol;
    let mut zeta_w = 0.0;
    for iter in 1..=cfg.max_iterations {
        run.trace.push(None, "round", &[("iteration", iter as f64), ("zeta_working", zeta_w)], "started");
        let c = match local_contract(sys, &ctx, zeta_w, &cfg.synthesis) {
            Ok(c) => c,
            Err(f) => return run.fail(iter, &f),
        };
        record_contract(&mut run.trace, &c);
        run.contracts.clear();
        for id in sys.ids() {
            let renamed = if id == rep { Some(c.clone()) } else { broadcast(sys, &c, id) };
            match renamed {
                Some(r) => {
                    run.contracts.insert(id, r);
                }
                None => {
                    let f = SynthesisFailure {
                        node: id,
                        program: "broadcast".into(),
                        endpoint: None,
                        detail: "subsystem is not structurally identical to the representative".into(),
                    };
                    return run.fail(iter, &f);
                }
            }
        }
        let (ok, bad) = check_edges(sys, &run.contracts, &cfg.synthesis);
        record_edges(&mut run.trace, &ok, &bad);
        if bad.is_empty() {
            return run.finish(Verdict::True, iter, ok, None);
        }
        if let Some(f) = bad.iter().find(|f| matches!(f.source, EdgeSource::Exogenous(_))) {
            return run.finish(Verdict::False, iter, Vec::new(), Some(f.reason()));
        }
        let deltas: BTreeMap<SubsystemId, f64> = run.contracts.iter().map(|(&k, c)| (k, c.delta)).collect();
        let next =
            match update_safe_region(rep_sub, &ctx, &child_assumptions(sys, rep, &deltas), zeta_w, &cfg.synthesis) {
                Ok(z) => z,
                Err(f) => return run.fail(iter, &f),
            };
        run.trace.push(Some(rep), "safe region update", &[("zeta_working", next)], "ok");
        if next <= zeta_w + tol {
            let reason =
                FailureReason { detail: format!("working safe region stalled at {zeta_w}"), ..bad[0].reason() };
            return run.finish(Verdict::False, iter, Vec::new(), Some(reason));
        }
        zeta_w = next;
    }
    let reason = FailureReason {
        node: None,
        program: "negotiation".into(),
        endpoint: None,
        detail: format!("no agreement within {} iterations", cfg.max_iterations),
    };
    run.finish(Verdict::False, cfg.max_iterations, Vec::new(), Some(reason))
}

/// Joint negotiation for general interconnections.
pub fn negotiate_general(sys: &Interconnection, cfg: &NegotiationConfig) -> Certificate {
    let mut run = Run::new(sys, cfg, "general");
    let ctxs = match prepare_all(sys, &cfg.synthesis) {
        Ok(c) => c,
        Err(f) => return run.fail(0, &f),
    };
    let done = match run.acyclic_pass(&ctxs) {
        Ok(d) => d,
        Err(f) => return run.fail(0, &f),
    };
    let cyclic: Vec<SubsystemId> = sys.ids().into_iter().filter(|i| !done.contains(i)).collect();
    let tol = cfg.synthesis.bisection_tol;
    let mut zeta_w: BTreeMap<SubsystemId, f64> = cyclic.iter().map(|&i| (i, 0.0)).collect();

    for iter in 1..=cfg.max_iterations.max(1) {
        run.trace.push(None, "round", &[("iteration", iter as f64)], "started");
        let results: Vec<Result<Contract, SynthesisFailure>> =
            cyclic.par_iter().map(|&i| local_contract(sys, &ctxs[&i], zeta_w[&i], &cfg.synthesis)).collect();
        for r in results {
            match r {
                Ok(c) => {
                    record_contract(&mut run.trace, &c);
                    run.contracts.insert(c.subsystem, c);
                }
                Err(f) => return run.fail(iter, &f),
            }
        }
        let (ok, bad) = check_edges(sys, &run.contracts, &cfg.synthesis);
        record_edges(&mut run.trace, &ok, &bad);
        if bad.is_empty() {
            return run.finish(Verdict::True, iter, ok, None);
        }
        let fixable: BTreeSet<SubsystemId> = bad
            .iter()
            .filter_map(|f| match f.source {
                EdgeSource::Subsystem(p) if zeta_w.contains_key(&p) => Some(p),
                _ => None,
            })
            .collect();
        if let Some(f) = bad.iter().find(|f| match f.source {
            EdgeSource::Subsystem(p) => !zeta_w.contains_key(&p),
            EdgeSource::Exogenous(_) => true,
        }) {
            return run.finish(Verdict::False, iter, Vec::new(), Some(f.reason()));
        }
        let targets: Vec<SubsystemId> =
            if cfg.selective_tightening { fixable.into_iter().collect() } else { cyclic.clone() };
        let deltas: BTreeMap<SubsystemId, f64> = run.contracts.iter().map(|(&k, c)| (k, c.delta)).collect();
        let updates: Vec<Result<f64, SynthesisFailure>> = targets
            .par_iter()
            .map(|&i| {
                update_safe_region(
                    &sys.subsystems[&i],
                    &ctxs[&i],
                    &child_assumptions(sys, i, &deltas),
                    zeta_w[&i],
                    &cfg.synthesis,
                )
            })
            .collect();
        let mut progressed = false;
        for (&i, r) in targets.iter().zip(updates) {
            match r {
                Ok(z) => {
                    run.trace.push(Some(i), "safe region update", &[("zeta_working", z)], "ok");
                    if z > zeta_w[&i] + tol {
                        progressed = true;
                    }
                    zeta_w.insert(i, z);
                }
                Err(f) => return run.fail(iter, &f),
            }
        }
        if !progressed {
            let reason = FailureReason { detail: "working safe regions stalled".into(), ..bad[0].reason() };
            return run.finish(Verdict::False, iter, Vec::new(), Some(reason));
        }
    }
    let reason = FailureReason {
        node: None,
        program: "negotiation".into(),
        endpoint: None,
        detail: format!("no agreement within {} iterations", cfg.max_iterations),
    };
    run.finish(Verdict::False, cfg.max_iterations, Vec::new(), Some(reason))
}

/// Validates the interconnection, picks (or checks) the procedure and runs it.
pub fn run(sys: &Interconnection, cfg: &NegotiationConfig) -> Result<Certificate, NegotiationError> {
    let problems = validate_interconnection(sys);
    if !problems.is_empty() {
        let text: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(NegotiationError::Invalid(text.join("; ")));
    }
    cfg.synthesis.validate().map_err(NegotiationError::Config)?;
    let class = classify(sys);
    let algorithm = match (cfg.algorithm, class) {
        (Algorithm::Auto, GraphClass::Acyclic) => Algorithm::Acyclic,
        (Algorithm::Auto, GraphClass::Homogeneous) => Algorithm::Homogeneous,
        (Algorithm::Auto, GraphClass::General) => Algorithm::General,
        (Algorithm::Acyclic, c) if c != GraphClass::Acyclic => {
            return Err(NegotiationError::Mismatch { requested: Algorithm::Acyclic, class: c })
        }
        (Algorithm::Homogeneous, c) if c != GraphClass::Homogeneous => {
            return Err(NegotiationError::Mismatch { requested: Algorithm::Homogeneous, class: c })
        }
        (a, _) => a,
    };
    Ok(match algorithm {
        Algorithm::Acyclic => negotiate_acyclic(sys, cfg),
        Algorithm::Homogeneous => negotiate_homogeneous(sys, cfg),
        _ => negotiate_general(sys, cfg),
    })
}

// ---------------------------------------------------------------------------
// Certificate checking
// ---------------------------------------------------------------------------

/// Summary of a successful certificate check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Contracts re-validated.
    pub contracts_checked: usize,
    /// Edge / exogenous evidence re-validated.
    pub edges_checked: usize,
    /// Largest identity residual seen.
    pub max_residual: f64,
    /// Smallest sampled condition margin seen.
    pub min_sample_margin: f64,
}

/// Why a certificate did not check.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckFailure {
    /// Missing contracts or evidence, or inconsistent fields.
    #[error("structural problem: {0}")]
    Structural(String),
    /// A contract's evidence does not certify its programs.
    #[error("contract of subsystem {node}: {detail}")]
    Contract {
        /// Subsystem.
        node: SubsystemId,
        /// Detail.
        detail: String,
    },
    /// Edge evidence does not certify compatibility.
    #[error("edge {parent} -> {child}: {detail}")]
    Edge {
        /// Parent side.
        parent: EdgeSource,
        /// Child.
        child: SubsystemId,
        /// Detail.
        detail: String,
    },
    /// A sampled barrier condition is violated.
    #[error("subsystem {node}: sampled {condition} condition violated (margin {margin:e})")]
    Sample {
        /// Subsystem.
        node: SubsystemId,
        /// Condition name.
        condition: &'static str,
        /// Smallest margin found.
        margin: f64,
    },
}

/// Re-validates a certificate against the interconnection without solving
/// any optimization problem: every stored Gram matrix must be PSD and every
/// SOS identity must hold within tolerance, and the barrier conditions must
/// hold at sampled points.
pub fn check_certificate(
    sys: &Interconnection,
    cert: &Certificate,
    cfg: &NegotiationConfig,
) -> Result<CheckReport, CheckFailure> {
    let mut report =
        CheckReport { contracts_checked: 0, edges_checked: 0, max_residual: 0.0, min_sample_margin: f64::INFINITY };
    if cert.verdict == Verdict::False {
        return match &cert.reason {
            Some(_) => Ok(report),
            None => Err(CheckFailure::Structural("false verdict without a failure reason".into())),
        };
    }
    if let Some(p) = cert.structural_problems(sys).into_iter().next() {
        return Err(CheckFailure::Structural(p));
    }
    let scfg = &cfg.synthesis;
    let wide = scfg.wide_multipliers.unwrap_or(false);
    for (&id, c) in &cert.contracts {
        let sub = sys
            .subsystems
            .get(&id)
            .ok_or_else(|| CheckFailure::Structural(format!("contract for unknown subsystem {id}")))?;
        if c.subsystem != id {
            return Err(CheckFailure::Structural(format!("contract keyed {id} names subsystem {}", c.subsystem)));
        }
        let bad = |detail: String| CheckFailure::Contract { node: id, detail };
        let mut local = scfg.clone();
        local.gain_a = c.gain_a;
        let mut sub_a = sub.clone();
        sub_a.gain_a = Some(c.gain_a);
        let params = BarrierParams { delta: c.delta, zeta: c.zeta, zeta_working: c.zeta_working, wide };
        let program = barrier_program(&sub_a, &c.shift, params, &local);
        let r = sos::check_evidence(&program, &c.evidence, &scfg.sos).map_err(|e| bad(e.to_string()))?;
        report.max_residual = report.max_residual.max(r);
        let h = c.evidence.polys.get(BARRIER).ok_or_else(|| bad("evidence has no barrier".into()))?;
        let diff = c.barrier.shift(&c.shift).max_abs_diff(h);
        if !(diff <= 1e-6 * h.max_abs_coeff().max(1.0)) {
            return Err(bad(format!("barrier does not match its evidence (difference {diff:e})")));
        }
        let ctx = prepare(sys, id, scfg).map_err(|f| bad(f.to_string()))?;
        let (a, b, d) = sample_margins(&sub_a, &ctx, c, cfg.sample_count, cfg.seed.wrapping_add(id as u64));
        for (condition, margin) in [("initial-set", a), ("safe-region", b), ("barrier", d)] {
            report.min_sample_margin = report.min_sample_margin.min(margin);
            if margin < SAMPLE_MARGIN {
                return Err(CheckFailure::Sample { node: id, condition, margin });
            }
        }
        report.contracts_checked += 1;
    }
    for e in &cert.edges {
        let bad = |detail: String| CheckFailure::Edge { parent: e.source.clone(), child: e.child, detail };
        let child = sys.subsystems.get(&e.child).ok_or_else(|| bad("unknown child".into()))?;
        let cc = &cert.contracts[&e.child];
        if e.delta != cc.delta {
            return Err(bad(format!("evidence tightening {} differs from the contract's {}", e.delta, cc.delta)));
        }
        let program = match &e.source {
            EdgeSource::Subsystem(p) => {
                let parent = sys.subsystems.get(p).ok_or_else(|| bad("unknown parent".into()))?;
                compatibility_program(parent, &cert.contracts[p], child, e.delta)
            }
            EdgeSource::Exogenous(name) => child
                .inputs
                .iter()
                .find(|port| matches!(&port.source, InputSource::Exogenous { name: n, .. } if n == name))
                .and_then(|port| exogenous_program(port, e.delta, &e.shift)),
        }
        .ok_or_else(|| bad("no such port".into()))?;
        let r = sos::check_evidence(&program, &e.evidence, &scfg.sos).map_err(|err| bad(err.to_string()))?;
        report.max_residual = report.max_residual.max(r);
        report.edges_checked += 1;
    }
    Ok(report)
}

/// Evidence accessor used by tamper tests and tooling.
pub fn evidence_mut(cert: &mut Certificate, id: SubsystemId) -> Option<&mut SosEvidence> {
    cert.contracts.get_mut(&id).map(|c| &mut c.evidence)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{InputPort, Subsystem};
    use crate::poly::{Polynomial, PolynomialVector, VarTable};

    fn skeleton(n: u32, edges: &[(u32, u32)]) -> Interconnection {
        let mut t = VarTable::new();
        let mut subsystems = BTreeMap::new();
        for i in 1..=n {
            let x = t.intern(&format!("x{i}"));
            subsystems.insert(
                i,
                Subsystem {
                    id: i,
                    states: vec![x],
                    dynamics: vec![Polynomial::var(x).neg()],
                    output_vars: vec![x],
                    output_map: PolynomialVector::new(vec![Polynomial::var(x)]),
                    initial_set: PolynomialVector::new(vec![]),
                    safe_region: PolynomialVector::new(vec![]),
                    inputs: Vec::new(),
                    gain_a: None,
                },
            );
        }
        for &(p, c) in edges {
            let v = subsystems[&p].states[0];
            subsystems.get_mut(&c).unwrap().inputs.push(InputPort {
                source: InputSource::Subsystem(p),
                vars: vec![v],
                bound: PolynomialVector::new(vec![]),
            });
        }
        Interconnection { vars: t, subsystems, edges: edges.iter().copied().collect() }
    }

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn chain_is_processed_leaf_first() {
        let sys = skeleton(3, &[(1, 2), (2, 3)]);
        let (d, r) = update_index_sets(&sys, &set(&[]), &set(&[]));
        assert_eq!((d, r.clone()), (set(&[]), set(&[3])));
        let (d, r) = update_index_sets(&sys, &set(&[]), &r);
        assert_eq!((d.clone(), r.clone()), (set(&[3]), set(&[2])));
        let (d, r) = update_index_sets(&sys, &d, &r);
        assert_eq!((d.clone(), r.clone()), (set(&[2, 3]), set(&[1])));
        let (d, r) = update_index_sets(&sys, &d, &r);
        assert_eq!((d, r), (set(&[1, 2, 3]), set(&[])));
    }

    #[test]
    fn diamond_waits_for_both_children() {
        let sys = skeleton(4, &[(1, 2), (1, 3), (2, 4), (3, 4)]);
        let (d, r) = update_index_sets(&sys, &set(&[]), &set(&[4]));
        assert_eq!((d.clone(), r.clone()), (set(&[4]), set(&[2, 3])));
        let (d, r) = update_index_sets(&sys, &d, &set(&[2]));
        assert_eq!(r, set(&[3]), "1 must wait for 3");
        let (_, r) = update_index_sets(&sys, &d, &set(&[3]));
        assert_eq!(r, set(&[1]));
    }

    #[test]
    fn cycle_nodes_never_become_ready() {
        let sys = skeleton(4, &[(1, 2), (2, 1), (1, 3), (4, 1)]);
        let (d, r) = update_index_sets(&sys, &set(&[]), &set(&[]));
        assert_eq!(r, set(&[3]));
        let (_, r) = update_index_sets(&sys, &d, &r);
        assert_eq!(r, set(&[]), "1, 2 are on a cycle and 4 is its ancestor");
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Auto, Algorithm::Acyclic, Algorithm::Homogeneous, Algorithm::General] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fancy".parse::<Algorithm>().is_err());
    }
}
