//! Round-trip and soundness properties of SOS compilation and extraction.

use agcv_core::poly::{Monomial, Polynomial, VarTable};
use agcv_core::sos::{compile, solve, PolynomialVariable, ScalarSign, SosExpr, SosProgram, SosSettings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_vars() -> (VarTable, Vec<usize>) {
    let mut t = VarTable::new();
    let v = vec![t.intern("x"), t.intern("y")];
    (t, v)
}

/// Random quadratic polynomial in (x, y) with coefficients in [−2, 2].
fn quad() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec(-2.0f64..2.0, 6).prop_map(|c| {
        let monos = [
            Monomial::one(),
            Monomial::var(0),
            Monomial::var(1),
            Monomial::from_pairs([(0, 2)]),
            Monomial::from_pairs([(0, 1), (1, 1)]),
            Monomial::from_pairs([(1, 2)]),
        ];
        Polynomial::from_terms(monos.into_iter().zip(c))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A sum of squares of random quadratics (plus a small positive constant)
    /// is certified, the identity re-expands within 1e-6, and every extracted
    /// SOS polynomial is nonnegative on random samples.
    #[test]
    fn random_sos_round_trip(a in quad(), b in quad(), c in quad(), seed in 0u64..1000) {
        let (_, v) = two_vars();
        let target = a.mul(&a).add(&b.mul(&b)).add(&c.mul(&c)).add(&Polynomial::constant(0.1));
        let mut p = SosProgram::new();
        let s = p.add_unknown(PolynomialVariable::sos("s", &v, 2)).unwrap();
        let g = Polynomial::constant(1.0).sub(&Polynomial::var(0).pow(2));
        // target − s·(1 − x²) ∈ Σ with s ∈ Σ (s = 0 works).
        p.add_sos_constraint("id", SosExpr::known(target).sub(s.mul_known(&g)), &v);
        let sol = solve(&p, &SosSettings::default()).unwrap();
        prop_assert!(sol.max_residual <= 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expanded: Vec<Polynomial> = sol
            .constraint_grams
            .values()
            .chain(sol.unknown_grams.values())
            .map(|g| g.expand())
            .collect();
        for _ in 0..1000 {
            let pt = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            for e in &expanded {
                let val = e.eval_dense(&pt);
                prop_assert!(val >= -1e-6, "{val}");
            }
        }
    }
}

#[test]
fn debug_dump_is_deterministic() {
    let (mut t, v) = two_vars();
    let build = |t: &mut VarTable| {
        let mut p = SosProgram::new();
        let h = p.add_unknown(PolynomialVariable::free("h", &v, 2)).unwrap();
        let s = p.add_unknown(PolynomialVariable::sos("s", &v, 2)).unwrap();
        let _ = p.add_scalar("c", ScalarSign::NonNeg).unwrap();
        let b = Polynomial::parse("1 - x^2 - y^2", t).unwrap();
        p.add_sos_constraint("a", h.sub(s.mul_known(&b)), &v);
        compile(&p).unwrap().dump(t)
    };
    let first = build(&mut t);
    assert_eq!(first, build(&mut t));
    assert!(
        first.contains("constraint a: basis [1, x, y, x^2, x*y, y^2], block 2 of size 6, 15 equalities"),
        "{first}"
    );
}
