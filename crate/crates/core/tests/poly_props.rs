//! Property tests for polynomial arithmetic.

use std::collections::{BTreeMap, HashMap};

use agcv_core::poly::{Monomial, Polynomial, VarTable};
use proptest::prelude::*;

const NVARS: usize = 3;

fn table() -> VarTable {
    let mut t = VarTable::new();
    for name in ["x", "y", "z"] {
        t.intern(name);
    }
    t
}

/// Random polynomial with small integer coefficients (so that ring axioms can
/// be checked by exact structural equality) and degree ≤ `max_deg`.
fn int_poly(max_deg: u32) -> impl Strategy<Value = Polynomial> {
    let term = (prop::collection::vec(0..=max_deg, NVARS), -5i32..=5);
    prop::collection::vec(term, 0..6).prop_map(move |terms| {
        let mut p = Polynomial::zero();
        for (exps, c) in terms {
            // Clip to the degree bound by dropping trailing exponents.
            let mut budget = max_deg;
            let pairs: Vec<(usize, u32)> = exps
                .iter()
                .enumerate()
                .map(|(v, &e)| {
                    let e = e.min(budget);
                    budget -= e;
                    (v, e)
                })
                .collect();
            p.add_term(Monomial::from_pairs(pairs), f64::from(c));
        }
        p
    })
}

/// Random polynomial with real coefficients.
fn real_poly(max_deg: u32) -> impl Strategy<Value = Polynomial> {
    (int_poly(max_deg), -3.0f64..3.0).prop_map(|(p, s)| p.scale(s))
}

fn point() -> impl Strategy<Value = [f64; NVARS]> {
    prop::array::uniform3(-2.0f64..2.0)
}

proptest! {
    #[test]
    fn addition_is_commutative_and_associative(p in int_poly(3), q in int_poly(3), r in int_poly(3)) {
        prop_assert_eq!(p.add(&q), q.add(&p));
        prop_assert_eq!(p.add(&q).add(&r), p.add(&q.add(&r)));
        prop_assert!(p.sub(&p).is_zero());
    }

    #[test]
    fn multiplication_is_commutative_associative_distributive(p in int_poly(2), q in int_poly(2), r in int_poly(2)) {
        prop_assert_eq!(p.mul(&q), q.mul(&p));
        prop_assert_eq!(p.mul(&q).mul(&r), p.mul(&q.mul(&r)));
        prop_assert_eq!(p.mul(&q.add(&r)), p.mul(&q).add(&p.mul(&r)));
        prop_assert_eq!(p.mul(&Polynomial::constant(1.0)), p.clone());
    }

    #[test]
    fn evaluation_is_a_ring_homomorphism(p in real_poly(3), q in real_poly(3), x in point()) {
        let pq = p.mul(&q).eval_dense(&x);
        let expect = p.eval_dense(&x) * q.eval_dense(&x);
        prop_assert!((pq - expect).abs() <= 1e-9 * (1.0 + expect.abs()), "{pq} vs {expect}");
    }

    #[test]
    fn gradient_matches_central_differences(p in real_poly(4), x in point()) {
        let eps = 1e-5;
        let vars: Vec<usize> = (0..NVARS).collect();
        let grad = p.gradient(&vars);
        for v in 0..NVARS {
            let mut hi = x;
            let mut lo = x;
            hi[v] += eps;
            lo[v] -= eps;
            let fd = (p.eval_dense(&hi) - p.eval_dense(&lo)) / (2.0 * eps);
            let exact = grad.entries()[v].eval_dense(&x);
            prop_assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "d/d{v}: {fd} vs {exact}");
        }
    }

    #[test]
    fn compose_obeys_the_chain_rule(p in int_poly(3), s0 in int_poly(1), s1 in int_poly(1), s2 in int_poly(1)) {
        // ∇(p∘s) = Σ_j (∂p/∂y_j ∘ s)·∇s_j, with s mapping the three variables
        // to affine images so degrees stay ≤ 3 and arithmetic stays exact.
        let vars: Vec<usize> = (0..NVARS).collect();
        let subst: BTreeMap<usize, Polynomial> = [(0, s0), (1, s1), (2, s2)].into_iter().collect();
        let composed = p.compose(&subst, &table()).unwrap();
        for v in 0..NVARS {
            let lhs = composed.derivative(v);
            let mut rhs = Polynomial::zero();
            for j in &vars {
                let dp = p.derivative(*j).compose_partial(&subst);
                rhs = rhs.add(&dp.mul(&subst[j].derivative(v)));
            }
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9 * (1.0 + lhs.max_abs_coeff()));
        }
    }

    #[test]
    fn text_round_trip_is_byte_identical(p in real_poly(3)) {
        let mut t = table();
        let text = p.to_text(&t);
        let back = Polynomial::parse(&text, &mut t).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_text(&t), text);
    }

    #[test]
    fn evaluate_agrees_with_dense_evaluation(p in real_poly(3), x in point()) {
        let t = table();
        let map: HashMap<usize, f64> = (0..NVARS).map(|v| (v, x[v])).collect();
        prop_assert_eq!(p.evaluate(&map, &t).unwrap(), p.eval_dense(&x));
    }
}
