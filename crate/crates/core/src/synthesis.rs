//! # Local contract synthesis
//!
//! For one subsystem with closed-loop field `F`, initial set `{b⁰ ≥ 0}`,
//! safe region `{q ≥ 0}` and input bounds `{d_k ≥ 0}`, a barrier `h` is
//! searched through the SOS conditions
//!
//! ```text
//!   h − Σ σ_init·b⁰                                   ∈ Σ[x]        (initial set inside)
//!   −h + Σ σ_safe·(q − ζ)                             ∈ Σ[x]        (barrier inside safe region)
//!   ∇h·F + a·h − Σ σ_k·(d_k − δ) − Σ σ_q·(q − ζ_w) − ε ∈ Σ[x, y]     (barrier condition)
//! ```
//!
//! with `h(x_c) = 1` at the centre `x_c` of the initial set. The last term
//! localizes the barrier condition to the working safe region `{q ≥ ζ_w}`;
//! this is sound because the second condition already places `{h ≥ 0}` inside
//! `{q ≥ ζ} ⊆ {q ≥ ζ_w}`, and it is needed whenever `∇h·F` has odd leading
//! degree. It can be switched off.
//!
//! All programs are compiled in coordinates centred on the initial-set centre
//! (states) and the input-bound centres (inputs); barriers are shifted back
//! before being returned.
//!
//! On top of the feasibility program sit the two bisections: the smallest
//! assumption tightening δ* (largest tolerable input set) and the largest
//! guarantee tightening ζ* (smallest safe region), plus the safe-region
//! update that makes a parent's region map into its children's assumptions.

use std::collections::BTreeMap;
use std::fmt;

use crate::contracts::{eval_at, even_up, sample_in_box, Contract, Interconnection, Shift, Subsystem, SubsystemId};
use crate::poly::{Polynomial, PolynomialVector, VarId};
use crate::sos::{
    self, bisect, BisectDirection, BisectError, Field, PolynomialVariable, ScalarSign, SosEvidence, SosExpr,
    SosProgram, SosSettings,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Tunables of the local programs.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    /// Strict margin ε in the barrier condition.
    pub epsilon: f64,
    /// Default class-K gain `a` (subsystems may override).
    pub gain_a: f64,
    /// Barrier degree (default: degree of the safe-region polynomial).
    pub h_degree: Option<u32>,
    /// Multiplier degree (default: degree difference rounded up to even).
    pub sigma_degree: Option<u32>,
    /// Bisection tolerance on δ and ζ.
    pub bisection_tol: f64,
    /// Upper end of the δ bracket (default: twice the sampled maximum of d).
    pub delta_max: Option<f64>,
    /// Upper end of the ζ bracket (default: sampled maximum of q over the
    /// initial set).
    pub zeta_max: Option<f64>,
    /// Input multipliers over states and inputs (`true`) or inputs only
    /// (`false`). Default: wide for plain feasibility, narrow inside the
    /// δ*/ζ* programs.
    pub wide_multipliers: Option<bool>,
    /// Localize the barrier condition to the working safe region.
    pub localize: bool,
    /// Impose `h(x_c) = 1`.
    pub normalize: bool,
    /// SOS / SDP settings.
    pub sos: SosSettings,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            gain_a: 1.0,
            h_degree: None,
            sigma_degree: None,
            bisection_tol: 1e-3,
            delta_max: None,
            zeta_max: None,
            wide_multipliers: None,
            localize: true,
            normalize: true,
            sos: SosSettings::default(),
        }
    }
}

impl SynthesisConfig {
    /// Checks the invariants (ε > 0, a > 0, even multiplier degree, tol > 0).
    pub fn validate(&self) -> Result<(), String> {
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gain_a > 0.0) {
            return Err(format!("gain_a must be positive, got {}", self.gain_a));
        }
        if let Some(d) = self.sigma_degree {
            if d % 2 == 1 {
                return Err(format!("sigma_degree must be even, got {d}"));
            }
        }
        if !(self.bisection_tol > 0.0) {
            return Err(format!("bisection_tol must be positive, got {}", self.bisection_tol));
        }
        Ok(())
    }

    fn gain(&self, sub: &Subsystem) -> f64 {
        sub.gain_a.unwrap_or(self.gain_a)
    }
}

// ---------------------------------------------------------------------------
// Failures
// ---------------------------------------------------------------------------

/// A local program that could not be certified.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisFailure {
    /// Subsystem.
    pub node: SubsystemId,
    /// Program name.
    pub program: String,
    /// Bracket endpoint or parameter value at which it failed.
    pub endpoint: Option<f64>,
    /// Detail.
    pub detail: String,
}

impl fmt::Display for SynthesisFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subsystem {}: {} failed", self.node, self.program)?;
        if let Some(e) = self.endpoint {
            write!(f, " at {e}")?;
        }
        write!(f, " ({})", self.detail)
    }
}

impl SynthesisFailure {
    fn new(node: SubsystemId, program: &str, endpoint: Option<f64>, detail: impl Into<String>) -> Self {
        Self { node, program: program.to_string(), endpoint, detail: detail.into() }
    }

    fn from_bisect(node: SubsystemId, program: &str, e: BisectError) -> Self {
        let endpoint = match e {
            BisectError::Infeasible { endpoint } => Some(endpoint),
            BisectError::NonMonotone { infeasible, .. } => Some(infeasible),
            BisectError::InvalidBracket { hi, .. } => Some(hi),
        };
        Self::new(node, program, endpoint, e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Set geometry
// ---------------------------------------------------------------------------

/// Bounding box of `{g ≥ 0}` over `vars` by SOS (`t ∓ xᵢ − Σσ·g ∈ Σ`,
/// minimizing `t`). `None` if any side is not certified.
pub fn bounding_box(set: &PolynomialVector, vars: &[VarId], settings: &SosSettings) -> Option<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for &v in vars {
        let mut ends = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut p = SosProgram::new();
            let t = p.add_scalar("t", ScalarSign::Free).ok()?;
            let mut expr = t.sub(SosExpr::known(Polynomial::var(v).scale(sign)));
            for (i, g) in set.entries().iter().enumerate() {
                let s = p
                    .add_unknown(PolynomialVariable::sos(
                        &format!("s{i}"),
                        vars,
                        even_up(1u32.saturating_sub(g.degree())),
                    ))
                    .ok()?;
                expr = expr.sub(s.mul_known(g));
            }
            p.add_sos_constraint("box", expr, vars);
            p.minimize(&[("t", 1.0)]);
            let sol = sos::solve(&p, settings).ok()?;
            ends[k] = sign * sol.scalars["t"];
        }
        let (hi, lo) = (ends[0], ends[1]);
        if !(lo <= hi) {
            return None;
        }
        out.push((lo, hi));
    }
    Some(out)
}

/// Grid points of a box with about `budget` points in total.
fn grid(bounds: &[(f64, f64)], budget: usize) -> Vec<Vec<f64>> {
    let n = bounds.len();
    if n == 0 {
        return vec![Vec::new()];
    }
    let per = ((budget as f64).powf(1.0 / n as f64).floor() as usize).max(3);
    let mut pts = vec![Vec::new()];
    for &(lo, hi) in bounds {
        let mut next = Vec::with_capacity(pts.len() * per);
        for p in &pts {
            for k in 0..per {
                let mut q = p.clone();
                q.push(lo + (hi - lo) * k as f64 / (per - 1) as f64);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Maximizer of `min_i g_i` over the box: grid search refined by compass
/// search. Returns the point and the value.
pub fn deepest_point(set: &PolynomialVector, vars: &[VarId], bounds: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let depth = |p: &[f64]| set.entries().iter().map(|g| eval_at(g, vars, p)).fold(f64::INFINITY, f64::min);
    let mut best = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect::<Vec<_>>();
    let mut val = depth(&best);
    for p in grid(bounds, 4096) {
        let d = depth(&p);
        if d > val {
            val = d;
            best = p;
        }
    }
    let width = bounds.iter().map(|(lo, hi)| hi - lo).fold(0.0f64, f64::max).max(1e-12);
    let mut step = width / 16.0;
    while step > 1e-12 * width {
        let mut improved = false;
        for k in 0..vars.len() {
            for s in [step, -step] {
                let mut p = best.clone();
                p[k] += s;
                let d = depth(&p);
                if d > val {
                    val = d;
                    best = p;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (best, val)
}

/// Per-subsystem geometry shared by all local programs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    /// Subsystem.
    pub node: SubsystemId,
    /// Centring shift for states (initial-set centre) and inputs (bound
    /// centres).
    pub shift: Shift,
    /// Bounding box of the safe region (state order).
    pub state_box: Vec<(f64, f64)>,
    /// Bounding box of each input bound (input-variable order).
    pub input_box: Vec<(f64, f64)>,
    /// Default upper end of the δ bracket.
    pub delta_top: f64,
    /// Default upper end of the ζ bracket.
    pub zeta_top: f64,
    /// Maximum of `min q` (top of the safe-region update bracket).
    pub q_max: f64,
}

/// Computes set centres, sampling boxes and bracket ends for a subsystem.
pub fn prepare(
    sys: &Interconnection,
    id: SubsystemId,
    cfg: &SynthesisConfig,
) -> Result<LocalContext, SynthesisFailure> {
    let sub = &sys.subsystems[&id];
    let fail =
        |what: &str| SynthesisFailure::new(id, "set geometry", None, format!("{what} is not certifiably bounded"));
    let init_box = bounding_box(&sub.initial_set, &sub.states, &cfg.sos).ok_or_else(|| fail("initial set"))?;
    let (center, depth0) = deepest_point(&sub.initial_set, &sub.states, &init_box);
    if depth0 < 0.0 {
        return Err(SynthesisFailure::new(id, "set geometry", None, "initial set is empty"));
    }
    let state_box = bounding_box(&sub.safe_region, &sub.states, &cfg.sos).ok_or_else(|| fail("safe region"))?;
    let (_, q_max) = deepest_point(&sub.safe_region, &sub.states, &state_box);
    // ζ bracket: beyond the largest value of min q over the initial set the
    // tightened region cannot contain it.
    let zeta_top = grid(&init_box, 4096)
        .into_iter()
        .chain(std::iter::once(center.clone()))
        .filter(|p| sub.initial_set.entries().iter().all(|b| eval_at(b, &sub.states, p) >= 0.0))
        .map(|p| sub.safe_region.entries().iter().map(|q| eval_at(q, &sub.states, &p)).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);

    let mut shift: Shift = sub.states.iter().copied().zip(center.iter().copied()).collect();
    let mut input_box = Vec::new();
    let mut delta_top: f64 = 0.0;
    for port in &sub.inputs {
        let b = bounding_box(&port.bound, &port.vars, &cfg.sos).ok_or_else(|| fail("input bound"))?;
        let (c, dmax) = deepest_point(&port.bound, &port.vars, &b);
        if dmax < 0.0 {
            return Err(SynthesisFailure::new(id, "set geometry", None, "input bound is empty"));
        }
        shift.extend(port.vars.iter().copied().zip(c));
        input_box.extend(b);
        delta_top = delta_top.max(2.0 * dmax);
    }
    Ok(LocalContext { node: id, shift, state_box, input_box, delta_top, zeta_top, q_max })
}

// ---------------------------------------------------------------------------
// Programs
// ---------------------------------------------------------------------------

fn shifted(v: &PolynomialVector, shift: &Shift) -> Vec<Polynomial> {
    v.entries().iter().map(|p| p.shift(shift)).collect()
}

/// Name of the barrier unknown in [`barrier_program`].
pub const BARRIER: &str = "h";

/// Scalar parameters of one barrier program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierParams {
    /// Assumption tightening δ.
    pub delta: f64,
    /// Guarantee tightening ζ.
    pub zeta: f64,
    /// Working safe-region tightening for localization.
    pub zeta_working: f64,
    /// Input multipliers over states and inputs.
    pub wide: bool,
}

/// Builds the barrier SOS program of a subsystem in shifted coordinates.
pub fn barrier_program(sub: &Subsystem, shift: &Shift, params: BarrierParams, cfg: &SynthesisConfig) -> SosProgram {
    let xs = &sub.states;
    let mut all = xs.clone();
    all.extend(sub.input_vars());
    let b0 = shifted(&sub.initial_set, shift);
    let q = shifted(&sub.safe_region, shift);
    let rates: Vec<Polynomial> = sub.dynamics.iter().map(|f| f.shift(shift)).collect();
    let hdeg = cfg.h_degree.unwrap_or_else(|| q.iter().map(Polynomial::degree).max().unwrap_or(2));
    let mdeg =
        |target: u32, g: &Polynomial| cfg.sigma_degree.unwrap_or_else(|| even_up(target.saturating_sub(g.degree())));

    let mut p = SosProgram::new();
    let h = p.add_unknown(PolynomialVariable::free(BARRIER, xs, hdeg)).expect("fresh");

    let mut init = h.clone();
    for (i, b) in b0.iter().enumerate() {
        let s = p.add_unknown(PolynomialVariable::sos(&format!("sigma_init_{i}"), xs, mdeg(hdeg, b))).expect("fresh");
        init = init.sub(s.mul_known(b));
    }
    p.add_sos_constraint("initial", init, xs);

    let mut safe = h.clone().scale(-1.0);
    for (i, qi) in q.iter().enumerate() {
        let s = p.add_unknown(PolynomialVariable::sos(&format!("sigma_safe_{i}"), xs, mdeg(hdeg, qi))).expect("fresh");
        safe = safe.add(s.mul_known(&qi.sub(&Polynomial::constant(params.zeta))));
    }
    p.add_sos_constraint("safe", safe, xs);

    let field = Field { vars: xs.clone(), rates: rates.clone() };
    let fdeg = rates.iter().map(Polynomial::degree).max().unwrap_or(0);
    let cdeg = (hdeg.saturating_sub(1) + fdeg).max(hdeg);
    let mut cbf = h
        .clone()
        .lie(&field)
        .expect("single Lie derivative")
        .add(h.scale(cfg.gain(sub)))
        .add_known(&Polynomial::constant(-cfg.epsilon));
    for (k, port) in sub.inputs.iter().enumerate() {
        let mut svars = port.vars.clone();
        if params.wide {
            svars = xs.iter().copied().chain(port.vars.iter().copied()).collect();
        }
        for (c, d) in shifted(&port.bound, shift).iter().enumerate() {
            let s = p
                .add_unknown(PolynomialVariable::sos(&format!("sigma_in_{k}_{c}"), &svars, mdeg(cdeg, d)))
                .expect("fresh");
            cbf = cbf.sub(s.mul_known(&d.sub(&Polynomial::constant(params.delta))));
        }
    }
    if cfg.localize {
        for (i, qi) in q.iter().enumerate() {
            let s =
                p.add_unknown(PolynomialVariable::sos(&format!("sigma_loc_{i}"), xs, mdeg(cdeg, qi))).expect("fresh");
            cbf = cbf.sub(s.mul_known(&qi.sub(&Polynomial::constant(params.zeta_working))));
        }
    }
    p.add_sos_constraint("barrier", cbf, &all);
    if cfg.normalize {
        p.add_point_constraint("normalize", SosExpr::unknown(BARRIER), BTreeMap::new(), 1.0);
    }
    p
}

/// Certifies a contract at fixed `(δ, ζ)` with localization to `ζ_w`.
pub fn local_feasibility_with(
    sub: &Subsystem,
    ctx: &LocalContext,
    params: BarrierParams,
    cfg: &SynthesisConfig,
) -> Result<Contract, SynthesisFailure> {
    let program = barrier_program(sub, &ctx.shift, params, cfg);
    let sol = sos::solve(&program, &cfg.sos)
        .map_err(|e| SynthesisFailure::new(sub.id, "local feasibility", Some(params.delta), e.to_string()))?;
    let evidence = SosEvidence::from(&sol);
    let back: Shift = ctx.shift.iter().map(|(&v, &c)| (v, -c)).collect();
    Ok(Contract {
        subsystem: sub.id,
        delta: params.delta,
        zeta: params.zeta,
        zeta_working: params.zeta_working,
        gain_a: cfg.gain(sub),
        barrier: evidence.polys[BARRIER].shift(&back),
        shift: ctx.shift.clone(),
        evidence,
    })
}

/// Local certificate at `(δ, ζ)` on the unmodified safe region.
pub fn local_feasibility(
    sys: &Interconnection,
    id: SubsystemId,
    delta: f64,
    zeta: f64,
    cfg: &SynthesisConfig,
) -> Result<Contract, SynthesisFailure> {
    let ctx = prepare(sys, id, cfg)?;
    let params = BarrierParams { delta, zeta, zeta_working: 0.0, wide: cfg.wide_multipliers.unwrap_or(true) };
    local_feasibility_with(&sys.subsystems[&id], &ctx, params, cfg)
}

/// Smallest assumption tightening δ* (largest tolerable input set) at
/// working safe-region tightening `zeta_w`.
pub fn maximal_internal_input_set(
    sub: &Subsystem,
    ctx: &LocalContext,
    zeta_w: f64,
    cfg: &SynthesisConfig,
) -> Result<(f64, Contract), SynthesisFailure> {
    let wide = cfg.wide_multipliers.unwrap_or(false);
    let params = |delta| BarrierParams { delta, zeta: zeta_w, zeta_working: zeta_w, wide };
    if sub.inputs.is_empty() {
        let c = local_feasibility_with(sub, ctx, params(0.0), cfg)
            .map_err(|f| SynthesisFailure { program: "maximal input set".into(), ..f })?;
        return Ok((0.0, c));
    }
    let hi = cfg.delta_max.unwrap_or(ctx.delta_top);
    let r = bisect(
        |d| local_feasibility_with(sub, ctx, params(d), cfg).ok(),
        BisectDirection::MinimizeFindSmallestFeasible,
        0.0,
        hi,
        cfg.bisection_tol,
    )
    .map_err(|e| SynthesisFailure::from_bisect(sub.id, "maximal input set", e))?;
    Ok((r.value, r.witness))
}

/// Largest guarantee tightening ζ* ≥ `zeta_w` at assumption tightening `delta`.
pub fn minimal_safe_region(
    sub: &Subsystem,
    ctx: &LocalContext,
    delta: f64,
    zeta_w: f64,
    cfg: &SynthesisConfig,
) -> Result<(f64, Contract), SynthesisFailure> {
    let wide = cfg.wide_multipliers.unwrap_or(false);
    let hi = cfg.zeta_max.unwrap_or(ctx.zeta_top).max(zeta_w);
    let r = bisect(
        |z| local_feasibility_with(sub, ctx, BarrierParams { delta, zeta: z, zeta_working: zeta_w, wide }, cfg).ok(),
        BisectDirection::MaximizeFindLargestFeasible,
        zeta_w,
        hi,
        cfg.bisection_tol,
    )
    .map_err(|e| {
        let mut f = SynthesisFailure::from_bisect(sub.id, "minimal safe region", e);
        f.detail.push_str("; the assumption tightening is below its minimum");
        f
    })?;
    Ok((r.value, r.witness))
}

/// A child's assumption on this subsystem's output: its bound polynomials
/// over the port variables and its tightening δ.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildAssumption {
    /// Child id (for diagnostics).
    pub child: SubsystemId,
    /// Port variables (this subsystem's output variables).
    pub vars: Vec<VarId>,
    /// Bound polynomials.
    pub bound: PolynomialVector,
    /// Tightening.
    pub delta: f64,
}

/// Program certifying `{q ≥ ζ} ⊆ ∩_k {d_k∘o ≥ δ_k}` in shifted coordinates.
pub fn safe_region_program(
    sub: &Subsystem,
    shift: &Shift,
    children: &[ChildAssumption],
    zeta: f64,
    cfg: &SynthesisConfig,
) -> SosProgram {
    let xs = &sub.states;
    let q = shifted(&sub.safe_region, shift);
    let outputs = shifted(&sub.output_map, shift);
    let mut p = SosProgram::new();
    for (k, ch) in children.iter().enumerate() {
        let subst: BTreeMap<VarId, Polynomial> = ch.vars.iter().copied().zip(outputs.iter().cloned()).collect();
        for (c, d) in ch.bound.entries().iter().enumerate() {
            let target = d.compose_partial(&subst);
            let mut expr = SosExpr::known(target.sub(&Polynomial::constant(ch.delta)));
            for (i, qi) in q.iter().enumerate() {
                let deg = cfg.sigma_degree.unwrap_or_else(|| even_up(target.degree().saturating_sub(qi.degree())));
                let s = p.add_unknown(PolynomialVariable::sos(&format!("sigma_{k}_{c}_{i}"), xs, deg)).expect("fresh");
                expr = expr.sub(s.mul_known(&qi.sub(&Polynomial::constant(zeta))));
            }
            p.add_sos_constraint(&format!("region_{k}_{c}"), expr, xs);
        }
    }
    p
}

/// Safe-region update: the smallest working tightening ζ′ ≥ `zeta_w` whose
/// region maps into every child's assumption. Leaves return `zeta_w`.
pub fn update_safe_region(
    sub: &Subsystem,
    ctx: &LocalContext,
    children: &[ChildAssumption],
    zeta_w: f64,
    cfg: &SynthesisConfig,
) -> Result<f64, SynthesisFailure> {
    if children.is_empty() {
        return Ok(zeta_w);
    }
    let hi = ctx.q_max.max(zeta_w);
    let r = bisect(
        |z| sos::solve(&safe_region_program(sub, &ctx.shift, children, z, cfg), &cfg.sos).ok(),
        BisectDirection::MinimizeFindSmallestFeasible,
        zeta_w,
        hi,
        cfg.bisection_tol,
    )
    .map_err(|e| SynthesisFailure::from_bisect(sub.id, "safe region update", e))?;
    Ok(r.value)
}

/// Smallest level `a` with `{q ≥ a} ⊆ X⁰` (checked by SOS containment).
pub fn premise_level(sub: &Subsystem, ctx: &LocalContext, cfg: &SynthesisConfig) -> Option<f64> {
    let xs = &sub.states;
    let q = shifted(&sub.safe_region, &ctx.shift);
    let b0 = shifted(&sub.initial_set, &ctx.shift);
    let oracle = |a: f64| {
        let mut p = SosProgram::new();
        for (c, b) in b0.iter().enumerate() {
            let mut expr = SosExpr::known(b.clone());
            for (i, qi) in q.iter().enumerate() {
                let deg = even_up(b.degree().saturating_sub(qi.degree()));
                let s = p.add_unknown(PolynomialVariable::sos(&format!("s_{c}_{i}"), xs, deg)).ok()?;
                expr = expr.sub(s.mul_known(&qi.sub(&Polynomial::constant(a))));
            }
            p.add_sos_constraint(&format!("premise_{c}"), expr, xs);
        }
        sos::solve(&p, &cfg.sos).ok()
    };
    bisect(oracle, BisectDirection::MinimizeFindSmallestFeasible, 0.0, ctx.q_max, cfg.bisection_tol)
        .ok()
        .map(|r| r.value)
}

// ---------------------------------------------------------------------------
// Sampling validation
// ---------------------------------------------------------------------------

/// Margin below which a sampled condition counts as violated.
pub const SAMPLE_MARGIN: f64 = -1e-6;

/// Samples the three barrier conditions of a contract at `count` points each
/// and returns the smallest margins `(initial, safe, barrier)`.
pub fn sample_margins(
    sub: &Subsystem,
    ctx: &LocalContext,
    contract: &Contract,
    count: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let xs = &sub.states;
    let h = &contract.barrier;
    let inside = |set: &PolynomialVector, vars: &[VarId], p: &[f64], lvl: f64| {
        set.entries().iter().all(|g| eval_at(g, vars, p) >= lvl)
    };
    let mut m_init = f64::INFINITY;
    for p in sample_in_box(&ctx.state_box, count, seed, |p| inside(&sub.initial_set, xs, p, 0.0)) {
        m_init = m_init.min(eval_at(h, xs, &p));
    }
    let mut m_safe = f64::INFINITY;
    for p in sample_in_box(&ctx.state_box, count, seed ^ 1, |p| eval_at(h, xs, p) >= 0.0) {
        let qmin = sub.safe_region.entries().iter().map(|q| eval_at(q, xs, &p)).fold(f64::INFINITY, f64::min);
        m_safe = m_safe.min(qmin - contract.zeta);
    }
    let mut all = xs.clone();
    all.extend(sub.input_vars());
    let lie = h.lie_derivative(xs, &sub.dynamics).add(&h.scale(contract.gain_a));
    let mut boxes = ctx.state_box.clone();
    boxes.extend(ctx.input_box.iter().copied());
    let nx = xs.len();
    let accept = |p: &[f64]| {
        let (x, _) = p.split_at(nx);
        let in_region = sub.safe_region.entries().iter().all(|q| eval_at(q, xs, x) >= contract.zeta_working);
        let in_inputs =
            sub.inputs.iter().all(|port| port.bound.entries().iter().all(|d| eval_at(d, &all, p) >= contract.delta));
        in_region && in_inputs
    };
    let mut m_cbf = f64::INFINITY;
    for p in sample_in_box(&boxes, count, seed ^ 2, accept) {
        m_cbf = m_cbf.min(eval_at(&lie, &all, &p));
    }
    (m_init, m_safe, m_cbf)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::Interconnection;
    use crate::poly::VarTable;
    use std::collections::BTreeSet;

    fn scalar(q: &str) -> Interconnection {
        let mut t = VarTable::new();
        let x = t.intern("x");
        let sub = Subsystem {
            id: 1,
            states: vec![x],
            dynamics: vec![Polynomial::parse("-x", &mut t).unwrap()],
            output_vars: vec![x],
            output_map: PolynomialVector::new(vec![Polynomial::var(x)]),
            initial_set: PolynomialVector::new(vec![Polynomial::parse("0.25 - x^2", &mut t).unwrap()]),
            safe_region: PolynomialVector::new(vec![Polynomial::parse(q, &mut t).unwrap()]),
            inputs: Vec::new(),
            gain_a: None,
        };
        Interconnection { vars: t, subsystems: [(1, sub)].into_iter().collect(), edges: BTreeSet::new() }
    }

    #[test]
    fn stable_scalar_system_is_certified() {
        let sys = scalar("1 - x^2");
        let c = local_feasibility(&sys, 1, 0.0, 0.0, &SynthesisConfig::default()).unwrap();
        // h(0) = 1 by normalization; the barrier is positive on X⁰ and
        // vanishes before the safe-region boundary.
        assert!((eval_at(&c.barrier, &[0], &[0.0]) - 1.0).abs() < 1e-6);
        assert!(eval_at(&c.barrier, &[0], &[0.5]) >= -1e-6);
        assert!(eval_at(&c.barrier, &[0], &[1.0]) <= 1e-6);
        let ctx = prepare(&sys, 1, &SynthesisConfig::default()).unwrap();
        let (a, b, d) = sample_margins(&sys.subsystems[&1], &ctx, &c, 1000, 5);
        assert!(a >= SAMPLE_MARGIN && b >= SAMPLE_MARGIN && d >= SAMPLE_MARGIN, "{a} {b} {d}");
    }

    #[test]
    fn empty_safe_region_is_infeasible() {
        let sys = scalar("-1 - x^2");
        assert!(local_feasibility(&sys, 1, 0.0, 0.0, &SynthesisConfig::default()).is_err());
    }

    #[test]
    fn leaf_update_is_identity() {
        let sys = scalar("1 - x^2");
        let ctx = prepare(&sys, 1, &SynthesisConfig::default()).unwrap();
        assert_eq!(update_safe_region(&sys.subsystems[&1], &ctx, &[], 0.0, &SynthesisConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn no_input_delta_is_zero() {
        let sys = scalar("1 - x^2");
        let cfg = SynthesisConfig::default();
        let ctx = prepare(&sys, 1, &cfg).unwrap();
        let (d, _) = maximal_internal_input_set(&sys.subsystems[&1], &ctx, 0.0, &cfg).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn geometry_of_scalar_sets() {
        let sys = scalar("1 - x^2");
        let ctx = prepare(&sys, 1, &SynthesisConfig::default()).unwrap();
        assert!(ctx.shift[&0].abs() < 1e-9);
        assert!((ctx.state_box[0].0 + 1.0).abs() < 1e-4 && (ctx.state_box[0].1 - 1.0).abs() < 1e-4);
        assert!((ctx.q_max - 1.0).abs() < 1e-9);
        assert!((ctx.zeta_top - 1.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = SynthesisConfig::default();
        assert!(c.validate().is_ok());
        c.sigma_degree = Some(3);
        assert!(c.validate().is_err());
        c.sigma_degree = None;
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }
}
