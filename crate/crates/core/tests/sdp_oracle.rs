//! Oracle tests for the SDP solver: diagonal SDPs are linear programs, so
//! their optimum can be checked against brute-force vertex enumeration.

use agcv_core::sdp::{from_sdpa, solve, to_sdpa, SdpBlock, SdpProblem, SdpStatus, SolverSettings};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random bounded LP in 3 variables: rows `a_k + g_kᵀ y ≥ 0` including the
/// box `|y_i| ≤ 5`, with `y = 0` strictly feasible.
struct Lp {
    cost: [f64; 3],
    rows: Vec<(f64, [f64; 3])>,
}

fn random_lp(rng: &mut ChaCha8Rng) -> Lp {
    let mut rows = Vec::new();
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        rows.push((5.0, e));
        e[i] = -1.0;
        rows.push((5.0, e));
    }
    for _ in 0..rng.random_range(2..6) {
        let g = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        rows.push((rng.random_range(0.1..3.0), g));
    }
    let cost = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    Lp { cost, rows }
}

/// Minimum over all feasible vertices (intersections of three active rows).
fn vertex_enumeration(lp: &Lp) -> f64 {
    let n = lp.rows.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let idx = [i, j, k];
                let m = Matrix3::from_fn(|r, c| lp.rows[idx[r]].1[c]);
                let rhs = Vector3::from_fn(|r, _| -lp.rows[idx[r]].0);
                let Some(inv) = m.try_inverse() else { continue };
                if m.determinant().abs() < 1e-9 {
                    continue;
                }
                let y = inv * rhs;
                let feasible = lp.rows.iter().all(|(a, g)| a + g[0] * y[0] + g[1] * y[1] + g[2] * y[2] >= -1e-9);
                if feasible {
                    let v = lp.cost[0] * y[0] + lp.cost[1] * y[1] + lp.cost[2] * y[2];
                    best = best.min(v);
                }
            }
        }
    }
    best
}

fn as_diagonal_sdp(lp: &Lp) -> SdpProblem {
    let mut p = SdpProblem::new(3);
    p.cost = lp.cost.to_vec();
    let mut b = SdpBlock::new(lp.rows.len());
    for (k, (a, g)) in lp.rows.iter().enumerate() {
        b.add_constant_entry(k, k, *a);
        for (i, &gi) in g.iter().enumerate() {
            if gi != 0.0 {
                b.add_coeff_entry(i, k, k, gi);
            }
        }
    }
    p.add_block(b);
    p
}

#[test]
fn diagonal_sdps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let lp = random_lp(&mut rng);
        let expect = vertex_enumeration(&lp);
        let sol = solve(&as_diagonal_sdp(&lp), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "trial {trial}");
        assert!((sol.objective - expect).abs() <= 1e-6, "trial {trial}: sdp {} vs lp {}", sol.objective, expect);
    }
}

#[test]
fn weak_duality_holds_along_iterates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = SolverSettings { record_history: true, ..SolverSettings::default() };
    for _ in 0..10 {
        let lp = random_lp(&mut rng);
        let sol = solve(&as_diagonal_sdp(&lp), &settings).unwrap();
        assert!(sol.objective >= sol.dual_objective - settings.gap_tol);
        for it in &sol.history {
            // Weak duality is exact for primal and dual feasible points; the
            // embedding's iterates are only near-feasible, so the check is
            // applied once the residuals are small.
            if it.primal_residual <= 1e-6 && it.dual_residual <= 1e-6 {
                assert!(it.primal_objective >= it.dual_objective - 1e-6 * (1.0 + it.primal_objective.abs()));
            }
        }
    }
}

#[test]
fn sdpa_round_trip_preserves_problem_and_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let lp = random_lp(&mut rng);
        let mut p = as_diagonal_sdp(&lp);
        // Add a dense 2×2 block and an equality to exercise every record kind.
        let mut b = SdpBlock::new(2);
        b.add_constant_entry(0, 0, 2.0);
        b.add_constant_entry(1, 1, 2.0);
        b.add_coeff_entry(0, 0, 1, 0.5);
        b.add_coeff_entry(2, 1, 1, -0.25);
        p.add_block(b);
        p.add_equality(&[(0, 1.0), (1, 1.0)], 0.5);
        let text = to_sdpa(&p);
        let back = from_sdpa(&text).unwrap();
        assert_eq!(to_sdpa(&from_sdpa(&to_sdpa(&back)).unwrap()), to_sdpa(&back));
        let a = solve(&p, &SolverSettings::default()).unwrap();
        let c = solve(&back, &SolverSettings::default()).unwrap();
        assert_eq!(a.status, SdpStatus::Optimal);
        assert_eq!(c.status, SdpStatus::Optimal);
        assert!((a.objective - c.objective).abs() <= 1e-6, "{} vs {}", a.objective, c.objective);
    }
}
