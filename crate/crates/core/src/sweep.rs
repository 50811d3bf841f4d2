//! # Parameter sweeps
//!
//! Re-runs the local programs of one subsystem over a grid of one parameter
//! and checks the monotone relations between input sets and safe regions:
//!
//! | parameter | per point                                  | expected trend            |
//! |-----------|--------------------------------------------|---------------------------|
//! | `zeta`    | δ*(ζ) at working tightening ζ, then ζ*(δ*) | δ* non-decreasing in ζ    |
//! | `delta`   | ζ*(δ) at working tightening 0              | ζ* non-decreasing in δ    |
//! | `gain_a`  | δ*, ζ* at gain `a`                         | none (reported only)      |
//! | `degree`  | δ*, ζ* at barrier degree `d`               | δ* non-increasing in `d`  |

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::contracts::{Interconnection, SubsystemId};
use crate::synthesis::{maximal_internal_input_set, minimal_safe_region, prepare, SynthesisConfig, SynthesisFailure};

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    /// Working safe-region tightening ζ.
    Zeta,
    /// Assumption tightening δ.
    Delta,
    /// Class-K gain.
    GainA,
    /// Barrier degree.
    Degree,
}

impl FromStr for SweepParameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeta" => Ok(Self::Zeta),
            "delta" => Ok(Self::Delta),
            "gain_a" => Ok(Self::GainA),
            "degree" => Ok(Self::Degree),
            other => Err(format!("unknown sweep parameter '{other}' (expected zeta, delta, gain_a or degree)")),
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zeta => "zeta",
            Self::Delta => "delta",
            Self::GainA => "gain_a",
            Self::Degree => "degree",
        })
    }
}

/// One grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Parameter value.
    pub parameter: f64,
    /// δ* (or the fixed δ for a `delta` sweep); `None` if infeasible.
    pub delta_star: Option<f64>,
    /// ζ*; `None` if infeasible.
    pub zeta_star: Option<f64>,
    /// Failure, if any.
    pub failure: Option<String>,
}

/// Runs the sweep on subsystem `node`. Rows are sorted by parameter.
pub fn run_sweep(
    sys: &Interconnection,
    node: SubsystemId,
    parameter: SweepParameter,
    values: &[f64],
    cfg: &SynthesisConfig,
) -> Result<Vec<SweepRow>, SynthesisFailure> {
    let sub = sys.subsystems.get(&node).ok_or_else(|| SynthesisFailure {
        node,
        program: "sweep".into(),
        endpoint: None,
        detail: "no such subsystem".into(),
    })?;
    let ctx = prepare(sys, node, cfg)?;
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let rows = values
        .par_iter()
        .map(|&p| {
            let mut c = cfg.clone();
            let mut sub = sub.clone();
            let outcome = match parameter {
                SweepParameter::Zeta => maximal_internal_input_set(&sub, &ctx, p, &c)
                    .and_then(|(d, _)| minimal_safe_region(&sub, &ctx, d, p, &c).map(|(z, _)| (d, z))),
                SweepParameter::Delta => minimal_safe_region(&sub, &ctx, p, 0.0, &c).map(|(z, _)| (p, z)),
                SweepParameter::GainA | SweepParameter::Degree => {
                    if parameter == SweepParameter::GainA {
                        sub.gain_a = Some(p);
                    } else {
                        c.h_degree = Some(p.round().max(0.0) as u32);
                    }
                    maximal_internal_input_set(&sub, &ctx, 0.0, &c)
                        .and_then(|(d, _)| minimal_safe_region(&sub, &ctx, d, 0.0, &c).map(|(z, _)| (d, z)))
                }
            };
            match outcome {
                Ok((d, z)) => SweepRow { parameter: p, delta_star: Some(d), zeta_star: Some(z), failure: None },
                Err(f) => SweepRow { parameter: p, delta_star: None, zeta_star: None, failure: Some(f.to_string()) },
            }
        })
        .collect();
    Ok(rows)
}

/// Parameter values at which the expected trend is violated by more than
/// `tol` (relative to the previous feasible point). `None` when the
/// parameter has no expected trend.
pub fn monotonicity_violations(parameter: SweepParameter, rows: &[SweepRow], tol: f64) -> Option<Vec<f64>> {
    let (series, increasing): (Vec<(f64, f64)>, bool) = match parameter {
        SweepParameter::Zeta => (rows.iter().filter_map(|r| Some((r.parameter, r.delta_star?))).collect(), true),
        SweepParameter::Delta => (rows.iter().filter_map(|r| Some((r.parameter, r.zeta_star?))).collect(), true),
        SweepParameter::Degree => (rows.iter().filter_map(|r| Some((r.parameter, r.delta_star?))).collect(), false),
        SweepParameter::GainA => return None,
    };
    Some(
        series
            .windows(2)
            .filter(|w| if increasing { w[1].1 < w[0].1 - tol } else { w[1].1 > w[0].1 + tol })
            .map(|w| w[1].0)
            .collect(),
    )
}

/// CSV `parameter,delta_star,zeta_star,verdict` followed by a summary row
/// `summary,,,<monotone | non-monotone at v1;v2 | no expected trend>`.
pub fn sweep_csv(parameter: SweepParameter, rows: &[SweepRow], tol: f64) -> String {
    let mut s = String::from("parameter,delta_star,zeta_star,verdict\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        let verdict = if r.failure.is_none() { "feasible" } else { "infeasible" };
        let _ = writeln!(s, "{},{},{},{verdict}", r.parameter, opt(r.delta_star), opt(r.zeta_star));
    }
    let summary = match monotonicity_violations(parameter, rows, tol) {
        None => "no expected trend".to_string(),
        Some(v) if v.is_empty() => "monotone".to_string(),
        Some(v) => format!("non-monotone at {}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")),
    };
    let _ = writeln!(s, "summary,,,{summary}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: f64, d: f64, z: f64) -> SweepRow {
        SweepRow { parameter: p, delta_star: Some(d), zeta_star: Some(z), failure: None }
    }

    #[test]
    fn flags_decrease_beyond_tolerance() {
        let rows = vec![row(0.0, 1.0, 0.0), row(1.0, 0.995, 0.0), row(2.0, 0.5, 0.0)];
        assert_eq!(monotonicity_violations(SweepParameter::Zeta, &rows, 0.01), Some(vec![2.0]));
        assert_eq!(monotonicity_violations(SweepParameter::GainA, &rows, 0.01), None);
        assert_eq!(monotonicity_violations(SweepParameter::Degree, &rows, 0.01), Some(vec![]));
    }

    #[test]
    fn csv_has_summary_row() {
        let rows = vec![row(0.0, 1.0, 2.0)];
        let csv = sweep_csv(SweepParameter::Zeta, &rows, 0.01);
        assert_eq!(csv, "parameter,delta_star,zeta_star,verdict\n0,1,2,feasible\nsummary,,,monotone\n");
    }

    #[test]
    fn parameter_names_round_trip() {
        for p in [SweepParameter::Zeta, SweepParameter::Delta, SweepParameter::GainA, SweepParameter::Degree] {
            assert_eq!(p.to_string().parse::<SweepParameter>().unwrap(), p);
        }
    }
}
