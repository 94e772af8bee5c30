//! Randomized oracle suites for polynomial arithmetic, SOS certificates and uncertainty elimination.

use ddiss_core::poly::{Monomial, Polynomial};
use ddiss_core::sdp::{InteriorPoint, SdpOptions};
use ddiss_core::sos::{check_sos_numeric, extract_certificate, solve_program, AffPoly, GramPolicy, SosProgram};
use ddiss_core::verify::{check_lemma2_instance, random_contraction};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn monomials(nvars: usize, max_deg: u32) -> Vec<Monomial> {
    let mut out = vec![Monomial::one(nvars)];
    for _ in 0..max_deg {
        let mut next = out.clone();
        for m in &out {
            for i in 0..nvars {
                let p = m.mul(&Monomial::var(nvars, i));
                if !next.contains(&p) {
                    next.push(p);
                }
            }
        }
        out = next;
    }
    out
}

fn random_poly(rng: &mut ChaCha8Rng, nvars: usize, deg: u32) -> Polynomial {
    Polynomial::from_terms(nvars, monomials(nvars, deg).into_iter().map(|m| (m.exps().to_vec(), rng.gen_range(-1.0..=1.0)))).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn product_evaluates_as_product_of_evaluations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (dp, dq) = (rng.gen_range(0..=3), rng.gen_range(0..=3));
        let p = random_poly(&mut rng, 2, dp);
        let q = random_poly(&mut rng, 2, dq);
        let pq = &p * &q;
        for _ in 0..20 {
            let x = [rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)];
            assert!(rel_close(pq.eval(&x).unwrap(), p.eval(&x).unwrap() * q.eval(&x).unwrap(), 1e-12));
        }
    }
    let vars = ddiss_core::poly::VarSet::new(&["x"]).unwrap();
    let s = Polynomial::parse("x^2 - 1", &vars).unwrap();
    let sq = s.pow(2);
    for _ in 0..10 {
        let x = [rng.gen_range(-3.0..=3.0)];
        assert!(rel_close(sq.eval(&x).unwrap(), s.eval(&x).unwrap().powi(2), 1e-12));
    }
}

#[test]
fn substitution_matches_shifted_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let p = random_poly(&mut rng, 2, 3);
        let images: Vec<Polynomial> =
            (0..2).map(|i| &Polynomial::var(4, i) + &Polynomial::var(4, i + 2)).collect();
        let shifted = p.subst(&images).unwrap();
        for _ in 0..100 {
            let xe: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let xpe = [xe[0] + xe[2], xe[1] + xe[3]];
            assert!(rel_close(shifted.eval(&xe).unwrap(), p.eval(&xpe).unwrap(), 1e-12));
        }
    }
}

/// `Some(residual)` when a certificate is returned.
fn certify(p: &Polynomial) -> Option<f64> {
    let mut prog = SosProgram::new(p.nvars());
    prog.add_sos("p", AffPoly::from_poly(p)).unwrap();
    let (compiled, sol) = solve_program(&prog, GramPolicy::Trim, &InteriorPoint::new(SdpOptions::default())).ok()?;
    let cert = extract_certificate(&prog, &compiled, &sol).ok()?;
    Some(cert.certificates[0].residual)
}

fn random_sum_of_squares(rng: &mut ChaCha8Rng) -> Polynomial {
    let nvars = rng.gen_range(2..=3);
    let mut p = Polynomial::zero(nvars);
    for _ in 0..rng.gen_range(1..=3) {
        let d = rng.gen_range(1..=3);
        let q = random_poly(rng, nvars, d);
        p = &p + &(&q * &q);
    }
    p
}

#[test]
fn sums_of_squares_are_certified() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let p = random_sum_of_squares(&mut rng);
        let res = certify(&p).unwrap_or_else(|| panic!("case {case}: no certificate for {p:?}"));
        assert!(res <= 1e-8, "case {case}: residual {res:e}");
        assert!(check_sos_numeric(&p, 200, 2.0, &mut rng).passed);
    }
}

#[test]
fn polynomials_with_a_negative_value_are_never_certified() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let s = random_sum_of_squares(&mut rng);
        let x0: Vec<f64> = (0..s.nvars()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let shift = s.eval(&x0).unwrap() + rng.gen_range(0.01..=1.0);
        let p = &s - &Polynomial::constant(s.nvars(), shift);
        assert!(p.eval(&x0).unwrap() < 0.0);
        if let Some(res) = certify(&p) {
            let numeric = check_sos_numeric(&p, 2000, 1.0, &mut rng);
            assert!(res > 1e-8 || !numeric.passed, "case {case}: false certificate, residual {res:e}");
        }
    }
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..=1.0));
    &a * a.transpose()
}

#[test]
fn uncertainty_elimination_has_no_counterexamples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let k = rng.gen_range(1..=6);
        let a = rng.gen_range(1..=4);
        let b = rng.gen_range(1..=4);
        let e = DMatrix::from_fn(k, a, |_, _| rng.gen_range(-2.0..=2.0));
        let g = DMatrix::from_fn(b, k, |_, _| rng.gen_range(-2.0..=2.0));
        let f_bar = if case % 10 == 0 { DMatrix::zeros(b, b) } else { random_psd(&mut rng, b) };
        let lambda = 10f64.powf(rng.gen_range(-1.5..=1.5));
        let slack = random_psd(&mut rng, k) * rng.gen_range(0.0..=1.0) + DMatrix::identity(k, k) * 1e-6;
        let c = -(&e * e.transpose() * lambda + g.transpose() * &f_bar * &g / lambda) - slack;
        let c = (&c + c.transpose()) * 0.5;
        let rep = check_lemma2_instance(&c, &e, &g, &f_bar, lambda, 200, &mut rng);
        assert!(!rep.premise_failed, "case {case}: {rep}");
        assert!(rep.pass, "case {case}: {rep}");
    }
    // the sampler reaches the bound
    let f = random_contraction(&mut rng, 3, 2, 1.0);
    assert!((f.singular_values().max() - 1.0).abs() < 1e-12);
}
