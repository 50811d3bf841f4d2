//! # Closed-loop simulation
//!
//! Integrates the full interconnection (every subsystem's closed-loop field,
//! with inputs wired to the parents' outputs) from random initial states in
//! the initial sets, and records the safe-region and barrier margins along
//! each trajectory. Simulation is a falsification aid only; it never affects
//! a verdict.
//!
//! Integration uses the adaptive Dormand–Prince 5(4) pair; a step is accepted
//! only when the embedded error estimate satisfies
//! `|err_i| ≤ tol·(1 + |x_i|)` for every component. Exogenous signals are held
//! at the deepest point of their known set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::contracts::{InputSource, Interconnection, SubsystemId};
use crate::poly::{Polynomial, VarId};
use crate::sos::SosSettings;
use crate::synthesis::{bounding_box, deepest_point};

/// Maximum rejection-sampling draws per initial state.
pub const MAX_DRAWS: usize = 100_000;

/// Simulation errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    /// An initial set could not be sampled.
    #[error("subsystem {0}: no initial state found after {MAX_DRAWS} draws (initial set has empty interior?)")]
    Sampling(SubsystemId),
    /// An initial or exogenous set is not bounded.
    #[error("subsystem {0}: {1} is not certifiably bounded")]
    Unbounded(SubsystemId, &'static str),
    /// Invalid arguments.
    #[error("{0}")]
    Invalid(String),
}

/// Simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Number of trajectories.
    pub samples: usize,
    /// Final time.
    pub horizon: f64,
    /// Seed for initial states.
    pub seed: u64,
    /// Local error tolerance.
    pub tol: f64,
    /// Settings for the bounding-box programs used by the sampler.
    pub sos: SosSettings,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { samples: 100, horizon: 20.0, seed: 0, tol: 1e-8, sos: SosSettings::default() }
    }
}

/// One integrated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Initial state (all subsystems, state order of [`StateLayout`]).
    pub initial: Vec<f64>,
    /// Accepted time points.
    pub times: Vec<f64>,
    /// State at each time point.
    pub states: Vec<Vec<f64>>,
    /// `min q_i` per subsystem at each time point.
    pub safe_margins: Vec<Vec<f64>>,
    /// `h_i` per subsystem with a barrier at each time point.
    pub barrier_values: Vec<Vec<f64>>,
    /// Minimum over time of `min q_i` per subsystem.
    pub min_safe_margin: BTreeMap<SubsystemId, f64>,
    /// Minimum over time of `h_i` per subsystem (when barriers are given).
    pub min_barrier: BTreeMap<SubsystemId, f64>,
    /// Whether some subsystem left its safe region.
    pub violated: bool,
    /// Whether integration stopped early (step-size underflow or blow-up).
    pub aborted: bool,
}

/// Ordering of the global state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    /// `(subsystem, state variable)` in global order.
    pub slots: Vec<(SubsystemId, VarId)>,
}

/// Result of a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    /// Global state ordering.
    pub layout: StateLayout,
    /// Variable names of the slots.
    pub names: Vec<String>,
    /// Subsystems in id order.
    pub subsystems: Vec<SubsystemId>,
    /// Trajectories in sample order.
    pub trajectories: Vec<Trajectory>,
}

impl SimulationReport {
    /// Number of trajectories that left a safe region.
    pub fn violations(&self) -> usize {
        self.trajectories.iter().filter(|t| t.violated).count()
    }

    /// Smallest safe-region margin over all trajectories.
    pub fn min_safe_margin(&self) -> f64 {
        self.trajectories.iter().flat_map(|t| t.min_safe_margin.values().copied()).fold(f64::INFINITY, f64::min)
    }

    /// Smallest barrier value over all trajectories.
    pub fn min_barrier(&self) -> f64 {
        self.trajectories.iter().flat_map(|t| t.min_barrier.values().copied()).fold(f64::INFINITY, f64::min)
    }

    /// Plot data per accepted step:
    /// `trajectory,time,<states...>,q_<i>...,h_<i>...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory,time");
        for n in &self.names {
            let _ = write!(s, ",{n}");
        }
        for i in &self.subsystems {
            let _ = write!(s, ",q_{i}");
        }
        for i in self.barrier_ids() {
            let _ = write!(s, ",h_{i}");
        }
        s.push('\n');
        for (k, t) in self.trajectories.iter().enumerate() {
            for (step, time) in t.times.iter().enumerate() {
                let _ = write!(s, "{k},{time:e}");
                let row = t.states[step].iter().chain(&t.safe_margins[step]).chain(&t.barrier_values[step]);
                for v in row {
                    let _ = write!(s, ",{v:e}");
                }
                s.push('\n');
            }
        }
        s
    }

    fn barrier_ids(&self) -> Vec<SubsystemId> {
        self.trajectories.first().map(|t| t.min_barrier.keys().copied().collect()).unwrap_or_default()
    }

    /// Per-trajectory summary: `trajectory,violated,aborted,min_q_<i>...,min_h_<i>...`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("trajectory,violated,aborted");
        for i in &self.subsystems {
            let _ = write!(s, ",min_q_{i}");
        }
        let hs = self.barrier_ids();
        for i in &hs {
            let _ = write!(s, ",min_h_{i}");
        }
        s.push('\n');
        for (k, t) in self.trajectories.iter().enumerate() {
            let _ = write!(s, "{k},{},{}", t.violated, t.aborted);
            for i in &self.subsystems {
                let _ = write!(s, ",{:e}", t.min_safe_margin[i]);
            }
            for i in &hs {
                let _ = write!(s, ",{:e}", t.min_barrier[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Compiled closed loop: fields and output maps over a dense variable array.
struct Plant<'a> {
    sys: &'a Interconnection,
    slots: Vec<VarId>,
    /// Output variable and its polynomial (over parent states).
    outputs: Vec<(VarId, &'a Polynomial)>,
    /// Held exogenous values.
    exogenous: Vec<(VarId, f64)>,
    rates: Vec<&'a Polynomial>,
}

impl Plant<'_> {
    fn fill(&self, x: &[f64], buf: &mut [f64]) {
        for (&v, &xv) in self.slots.iter().zip(x) {
            buf[v] = xv;
        }
        for &(v, c) in &self.exogenous {
            buf[v] = c;
        }
        for &(v, p) in &self.outputs {
            let val = p.eval_with(&|u| buf[u]);
            buf[v] = val;
        }
        // State variables double as outputs; re-assert them.
        for (&v, &xv) in self.slots.iter().zip(x) {
            buf[v] = xv;
        }
    }

    fn field(&self, x: &[f64], buf: &mut [f64], out: &mut [f64]) {
        self.fill(x, buf);
        for (o, f) in out.iter_mut().zip(&self.rates) {
            *o = f.eval_with(&|u| buf[u]);
        }
    }
}

// Dormand–Prince 5(4) tableau (the field is autonomous, so the nodes are
// not needed).
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Integrates `ẋ = f(x)` on `[0, horizon]` with adaptive Dormand–Prince.
/// Returns accepted `(t, x)` pairs (including the initial point) and whether
/// integration stopped early.
pub fn dormand_prince(
    f: &mut dyn FnMut(&[f64], &mut [f64]),
    x0: &[f64],
    horizon: f64,
    tol: f64,
) -> (Vec<(f64, Vec<f64>)>, bool) {
    let n = x0.len();
    let mut out = vec![(0.0, x0.to_vec())];
    if horizon <= 0.0 || n == 0 {
        return (out, false);
    }
    let mut t = 0.0;
    let mut x = x0.to_vec();
    let mut h = (horizon * 1e-3).min(1e-2);
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut steps = 0usize;
    while t < horizon {
        if steps > 1_000_000 || h < 1e-14 * horizon.max(1.0) {
            return (out, true);
        }
        h = h.min(horizon - t);
        f(&x, &mut k[0]);
        for s in 1..7 {
            let (done, rest) = k.split_at_mut(s);
            for i in 0..n {
                tmp[i] = x[i] + h * done.iter().enumerate().map(|(j, kj)| A[s][j] * kj[i]).sum::<f64>();
            }
            f(&tmp, &mut rest[0]);
        }
        let mut err: f64 = 0.0;
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..7 {
                hi += B5[s] * k[s][i];
                lo += B4[s] * k[s][i];
            }
            next[i] = x[i] + h * hi;
            let scale = tol * (1.0 + x[i].abs().max(next[i].abs()));
            err = err.max((h * (hi - lo)).abs() / scale);
        }
        if !err.is_finite() || next.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            if h < 1e-10 {
                return (out, true);
            }
            h *= 0.1;
            continue;
        }
        if err <= 1.0 {
            t += h;
            x = next;
            out.push((t, x.clone()));
            steps += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    (out, false)
}

/// Simulates the interconnection. `barriers` (per subsystem, over its states)
/// are evaluated along trajectories when given.
pub fn simulate(
    sys: &Interconnection,
    barriers: &BTreeMap<SubsystemId, Polynomial>,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SimulationError> {
    if !(cfg.horizon >= 0.0) {
        return Err(SimulationError::Invalid(format!("horizon must be non-negative, got {}", cfg.horizon)));
    }
    if !(cfg.tol > 0.0) {
        return Err(SimulationError::Invalid(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    let mut slots = Vec::new();
    let mut boxes = Vec::new();
    let mut outputs = Vec::new();
    let mut exogenous = Vec::new();
    let mut rates = Vec::new();
    for s in sys.subsystems.values() {
        for &v in &s.states {
            slots.push((s.id, v));
        }
        let b =
            bounding_box(&s.initial_set, &s.states, &cfg.sos).ok_or(SimulationError::Unbounded(s.id, "initial set"))?;
        boxes.push(b);
        outputs.extend(s.output_vars.iter().copied().zip(s.output_map.entries().iter()));
        rates.extend(s.dynamics.iter());
        for port in &s.inputs {
            if let InputSource::Exogenous { set, .. } = &port.source {
                let b =
                    bounding_box(set, &port.vars, &cfg.sos).ok_or(SimulationError::Unbounded(s.id, "exogenous set"))?;
                let (c, _) = deepest_point(set, &port.vars, &b);
                exogenous.extend(port.vars.iter().copied().zip(c));
            }
        }
    }
    let plant = Plant { sys, slots: slots.iter().map(|&(_, v)| v).collect(), outputs, exogenous, rates };
    let subsystems: Vec<SubsystemId> = sys.subsystems.keys().copied().collect();

    // Initial states are drawn sequentially for reproducibility.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut initials = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut x0 = Vec::new();
        for (s, b) in sys.subsystems.values().zip(&boxes) {
            let mut found = None;
            for _ in 0..MAX_DRAWS {
                let p: Vec<f64> =
                    b.iter().map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect();
                if s.initial_set.entries().iter().all(|g| crate::contracts::eval_at(g, &s.states, &p) >= 0.0) {
                    found = Some(p);
                    break;
                }
            }
            x0.extend(found.ok_or(SimulationError::Sampling(s.id))?);
        }
        initials.push(x0);
    }

    let nvars = sys.vars.len();
    let trajectories = initials
        .par_iter()
        .map(|x0| {
            let mut buf = vec![0.0; nvars];
            let mut field = |x: &[f64], out: &mut [f64]| plant.field(x, &mut buf, out);
            let (path, aborted) = dormand_prince(&mut field, x0, cfg.horizon, cfg.tol);
            let mut buf = vec![0.0; nvars];
            let mut min_q: BTreeMap<SubsystemId, f64> = subsystems.iter().map(|&i| (i, f64::INFINITY)).collect();
            let mut min_h: BTreeMap<SubsystemId, f64> =
                subsystems.iter().filter(|i| barriers.contains_key(i)).map(|&i| (i, f64::INFINITY)).collect();
            let mut safe_margins = Vec::with_capacity(path.len());
            let mut barrier_values = Vec::with_capacity(path.len());
            for (_, x) in &path {
                plant.fill(x, &mut buf);
                let mut qs = Vec::with_capacity(subsystems.len());
                let mut hs = Vec::new();
                for s in plant.sys.subsystems.values() {
                    let q =
                        s.safe_region.entries().iter().map(|q| q.eval_with(&|u| buf[u])).fold(f64::INFINITY, f64::min);
                    let e = min_q.get_mut(&s.id).expect("listed");
                    *e = e.min(q);
                    qs.push(q);
                    if let Some(h) = barriers.get(&s.id) {
                        let hv = h.eval_with(&|u| buf[u]);
                        let e = min_h.get_mut(&s.id).expect("listed");
                        *e = e.min(hv);
                        hs.push(hv);
                    }
                }
                safe_margins.push(qs);
                barrier_values.push(hs);
            }
            let violated = aborted || min_q.values().any(|&q| q < 0.0);
            Trajectory {
                initial: x0.clone(),
                times: path.iter().map(|(t, _)| *t).collect(),
                states: path.into_iter().map(|(_, x)| x).collect(),
                safe_margins,
                barrier_values,
                min_safe_margin: min_q,
                min_barrier: min_h,
                violated,
                aborted,
            }
        })
        .collect();
    Ok(SimulationReport {
        names: slots.iter().map(|&(_, v)| sys.vars.name(v)).collect(),
        layout: StateLayout { slots },
        subsystems,
        trajectories,
    })
}
