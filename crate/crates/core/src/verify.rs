//! Numerical oracles that recompute every quantity from the polynomials and
//! matrices of a result, independently of the solver.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::consistency::ConsistencyEllipsoid;
use crate::linalg::{max_eig, op_norm, sym_sqrt, symmetrize};
use crate::poly::{PolyMatrix, Polynomial};
use crate::sos::check_sos_numeric;
use crate::synthesis::{DissipationParts, SynthesisResult};

/// Tolerance on the dissipation inequality and on the matrix condition.
pub const DISSIPATION_TOL: f64 = 1e-6;
pub const SCHUR_TOL: f64 = 1e-8;
pub const SANDWICH_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub check: String,
    pub samples: usize,
    /// Largest violation; `≤ tol` passes.
    pub worst: f64,
    pub witness: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
    /// Set when the hypotheses of the check do not hold.
    pub premise_failed: bool,
    pub note: String,
}

impl VerificationReport {
    fn new(check: &str, tol: f64) -> Self {
        Self {
            check: check.to_string(),
            samples: 0,
            worst: f64::NEG_INFINITY,
            witness: Vec::new(),
            tol,
            pass: false,
            premise_failed: false,
            note: String::new(),
        }
    }

    fn record(&mut self, value: f64, witness: impl FnOnce() -> Vec<f64>) {
        self.samples += 1;
        if value > self.worst || value.is_nan() {
            self.worst = if value.is_nan() { f64::INFINITY } else { value };
            self.witness = witness();
        }
    }

    fn finish(mut self) -> Self {
        if self.samples == 0 {
            self.worst = 0.0;
        }
        self.pass = !self.premise_failed && self.worst <= self.tol;
        self
    }
}

impl core::fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let verdict = if self.pass {
            "pass"
        } else if self.premise_failed {
            "premise-fail"
        } else {
            "FAIL"
        };
        write!(f, "{:<24} {:>5} samples  worst {:>11.3e}  tol {:.0e}  {verdict}", self.check, self.samples, self.worst, self.tol)?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

fn uniform_box<R: Rng + ?Sized>(rng: &mut R, dim: usize, bx: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-bx..=bx)).collect()
}

/// Random matrix with operator norm `scale`.
pub fn random_contraction<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0));
        let nrm = op_norm(&m);
        if nrm > 1e-12 {
            return m * (scale / nrm);
        }
    }
}

/// For `F'F ⪯ F̄` samples checks `C + EFG + G'F'E' ⪯ 0`, given the premise
/// `C + λEE' + λ⁻¹G'F̄G ⪯ 0`.
pub fn check_lemma2_instance<R: Rng + ?Sized>(
    c: &DMatrix<f64>,
    e: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f_bar: &DMatrix<f64>,
    lambda: f64,
    n_samples: usize,
    rng: &mut R,
) -> VerificationReport {
    let mut rep = VerificationReport::new("lemma2", 1e-9);
    let k = c.nrows();
    let (a, b) = (e.ncols(), f_bar.nrows());
    if c.ncols() != k || e.nrows() != k || g.nrows() != b || g.ncols() != k || f_bar.ncols() != b || !(lambda > 0.0) {
        rep.premise_failed = true;
        rep.note = "dimension or sign mismatch".into();
        return rep.finish();
    }
    let premise = symmetrize(&(c + e * e.transpose() * lambda + g.transpose() * f_bar * g / lambda));
    let pe = max_eig(&premise);
    let scale = 1.0 + c.norm();
    if pe > 1e-12 * scale {
        rep.premise_failed = true;
        rep.note = alloc::format!("premise max eigenvalue {pe:.3e}");
        return rep.finish();
    }
    let f_half = sym_sqrt(f_bar);
    for i in 0..n_samples {
        // every fifth draw on the boundary F'F = F̄ direction
        let s = if i % 5 == 0 { 1.0 } else { rng.gen_range(0.0..=1.0) };
        let u = random_contraction(rng, a, b, s);
        let f = &u * &f_half;
        let efg = e * &f * g;
        let concl = symmetrize(&(c + &efg + efg.transpose()));
        let v = max_eig(&concl);
        rep.record(v, || f.iter().copied().collect());
    }
    rep.tol = 1e-9 * scale;
    rep.finish()
}

/// One evaluation of the dissipation matrix and its Schur scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct SchurPair {
    pub point: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub scalar: f64,
}

/// Pairs at `n_samples` random `(x, e) ∈ [-bx, bx]^{2n}`.
pub fn schur_pairs<R: Rng + ?Sized>(
    res: &SynthesisResult,
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    bx: f64,
    n_samples: usize,
    rng: &mut R,
) -> Vec<SchurPair> {
    let n = res.n();
    (0..n_samples)
        .map(|_| {
            let pt = uniform_box(rng, 2 * n, bx);
            let parts = DissipationParts::eval(res, zw, &pt[..n], &pt[n..]);
            SchurPair { matrix: parts.matrix(ell), scalar: parts.schur_scalar(ell), point: pt }
        })
        .collect()
}

/// Sign agreement `matrix ⪯ 0 ⇔ scalar ≤ 0`; both values within `tol` of zero count as agreeing.
pub fn check_schur_equiv(pairs: &[SchurPair], tol: f64) -> VerificationReport {
    let mut rep = VerificationReport::new("schur-equivalence", tol);
    for p in pairs {
        let me = max_eig(&p.matrix);
        let disagree = (me <= -tol && p.scalar > tol) || (me > tol && p.scalar <= -tol);
        let v = if disagree { me.abs().min(p.scalar.abs()) } else { 0.0 };
        rep.record(v, || p.point.clone());
    }
    rep.finish()
}

/// Max eigenvalue of the dissipation matrix at random points.
pub fn check_matrix_sampled<R: Rng + ?Sized>(
    res: &SynthesisResult,
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    bx: f64,
    n_samples: usize,
    rng: &mut R,
) -> VerificationReport {
    let mut rep = VerificationReport::new("dissipation-matrix", DISSIPATION_TOL);
    let n = res.n();
    for _ in 0..n_samples {
        let pt = uniform_box(rng, 2 * n, bx);
        let m = DissipationParts::eval(res, zw, &pt[..n], &pt[n..]).matrix(ell);
        rep.record(max_eig(&m), || pt.clone());
    }
    rep.finish()
}

/// `⟨∇V(x), [A B] v(x, e)⟩ + α₃(|x|) − α₄(|e|)`.
fn dissipation_value(parts: &DissipationParts, ab: &DMatrix<f64>) -> f64 {
    let f = ab * DVector::from_column_slice(&parts.v);
    parts.alpha_diff + parts.grad_v.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<f64>()
}

/// Dissipation inequality for `[A B] = (ζ̄ + Ā^{-1/2} Υ Q̄^{1/2})'` over random
/// `(x, e)` and `‖Υ‖ ≤ 1`: `Υ = 0`, 20 boundary draws, uniform-norm draws and,
/// per point, the maximizing rank-one `Υ`. `truth` is checked on the same points.
#[allow(clippy::too_many_arguments)]
pub fn check_dissipation_sampled<R: Rng + ?Sized>(
    res: &SynthesisResult,
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    bx: f64,
    n_xe: usize,
    n_upsilon: usize,
    truth: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> VerificationReport {
    let mut rep = VerificationReport::new("robust-dissipation", DISSIPATION_TOL);
    let n = res.n();
    let p = ell.p();
    let q_half = sym_sqrt(&ell.q_bar);
    let n_boundary = 20.min(n_upsilon.saturating_sub(1));
    let mut members: Vec<DMatrix<f64>> = Vec::with_capacity(n_upsilon.max(1));
    members.push(ell.zeta_bar.transpose());
    for i in 1..n_upsilon {
        let s = if i <= n_boundary { 1.0 } else { rng.gen_range(0.0..=1.0) };
        let ups = random_contraction(rng, p, n, s);
        members.push((&ell.zeta_bar + &ell.a_bar_inv_sqrt * ups * &q_half).transpose());
    }
    let mut truth_worst = f64::NEG_INFINITY;
    for _ in 0..n_xe {
        let pt = uniform_box(rng, 2 * n, bx);
        let parts = DissipationParts::eval(res, zw, &pt[..n], &pt[n..]);
        for ab in &members {
            let v = dissipation_value(&parts, ab);
            rep.record(v, || pt.clone());
        }
        // worst case over ‖Υ‖ ≤ 1
        let av = &ell.a_bar_inv_sqrt * DVector::from_column_slice(&parts.v);
        let qg = &q_half * DVector::from_column_slice(&parts.grad_v);
        let worst = parts.m11(ell) + av.norm() * qg.norm();
        rep.record(worst, || pt.clone());
        if let Some(t) = truth {
            let v = dissipation_value(&parts, t);
            truth_worst = truth_worst.max(v);
            rep.record(v, || pt.clone());
        }
    }
    if truth.is_some() {
        rep.note = alloc::format!("ground truth worst {truth_worst:.3e}");
    }
    rep.finish()
}

/// `α₁(|x|) ≤ V(x) ≤ α₂(|x|)` on `[-bx, bx]^n`, within `1e-8 (1 + |V|)`.
pub fn check_sandwich<R: Rng + ?Sized>(res: &SynthesisResult, bx: f64, n_samples: usize, rng: &mut R) -> VerificationReport {
    let mut rep = VerificationReport::new("sandwich", SANDWICH_TOL);
    let n = res.n();
    for i in 0..n_samples {
        let x = if i == 0 { vec![0.0; n] } else { uniform_box(rng, n, bx) };
        let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let v = res.v.eval_unchecked(&x);
        let lo = res.alpha[0].eval(r) - v;
        let hi = v - res.alpha[1].eval(r);
        rep.record(lo.max(hi) / (1.0 + v.abs()), || x.clone());
    }
    rep.finish()
}

/// `k(0) = 0`, `V(0) = 0`, class-K∞ gates and `λ ≥ ε` on samples.
pub fn check_structure<R: Rng + ?Sized>(res: &SynthesisResult, bx: f64, n_samples: usize, rng: &mut R) -> VerificationReport {
    let mut rep = VerificationReport::new("structure", 1e-7);
    let n = res.n();
    let mut notes: Vec<String> = Vec::new();
    for (j, k) in res.k.iter().enumerate() {
        if k.constant_term() != 0.0 {
            notes.push(alloc::format!("k{}(0) = {:e}", j + 1, k.constant_term()));
        }
        rep.record(k.constant_term().abs(), Vec::new);
    }
    rep.record(res.v.constant_term().abs() * 10.0, Vec::new);
    for (i, a) in res.alpha.iter().enumerate() {
        let neg = a.coeffs().iter().fold(0.0f64, |m, c| m.max(-c));
        let short = res.epsilon - a.coeffs().iter().sum::<f64>();
        if neg > 0.0 || short > 0.0 {
            notes.push(alloc::format!("alpha{} fails the class-K gate", i + 1));
            rep.premise_failed = true;
        }
    }
    for _ in 0..n_samples {
        let pt = uniform_box(rng, 2 * n, bx);
        let l = res.lambda.eval_unchecked(&pt);
        rep.record(res.epsilon - l, || pt.clone());
    }
    rep.note = notes.join("; ");
    rep.finish()
}

/// Numeric nonnegativity of `V − α₁`, `α₂ − V`, `λ − ε` and the stored
/// certificate residuals.
pub fn check_certificates<R: Rng + ?Sized>(res: &SynthesisResult, bx: f64, n_samples: usize, rng: &mut R) -> VerificationReport {
    let mut rep = VerificationReport::new("sos-certificates", 1e-6);
    let n = res.n();
    let xs: Vec<usize> = (0..n).collect();
    let v = &res.v;
    let polys = [
        ("s1", v - &res.alpha[0].poly(n, &xs)),
        ("s2", &res.alpha[1].poly(n, &xs) - v),
        ("s3", &res.lambda - &Polynomial::constant(2 * n, res.epsilon)),
    ];
    let mut notes = Vec::new();
    for (name, p) in &polys {
        let r = check_sos_numeric(p, n_samples, bx, rng);
        let viol = (-r.min_value) / (1.0 + r.max_value.abs());
        rep.record(viol.max(0.0), || r.witness.clone());
        if !r.passed {
            notes.push(alloc::format!("{name} negative at sample"));
        }
    }
    for c in &res.certificates {
        rep.record(c.residual, Vec::new);
        if c.min_eig < -crate::sos::EXTRACT_EIG_TOL {
            notes.push(alloc::format!("{} Gram min eigenvalue {:.3e}", c.name, c.min_eig));
            rep.premise_failed = true;
        }
    }
    rep.note = notes.join("; ");
    rep.finish()
}

/// `|k(x)| ≤ u_max(x) + 1e-6`.
pub fn check_input_bound<R: Rng + ?Sized>(res: &SynthesisResult, u_max: &Polynomial, bx: f64, n_samples: usize, rng: &mut R) -> VerificationReport {
    let mut rep = VerificationReport::new("input-bound", 1e-6);
    let n = res.n();
    for _ in 0..n_samples {
        let x = uniform_box(rng, n, bx);
        let k2: f64 = res.k.iter().map(|k| k.eval_unchecked(&x).powi(2)).sum();
        rep.record(k2.sqrt() - u_max.eval_unchecked(&x).abs(), || x.clone());
    }
    rep.finish()
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerifyOptions {
    /// Half-width of the sampling box for `(x, e)`.
    pub bx: f64,
    pub n_xe: usize,
    pub n_upsilon: usize,
    pub n_matrix: usize,
    pub n_sandwich: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { bx: 2.0, n_xe: 1000, n_upsilon: 100, n_matrix: 1000, n_sandwich: 10_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationSuite {
    pub reports: Vec<VerificationReport>,
    pub pass: bool,
}

impl VerificationSuite {
    pub fn failures(&self) -> impl Iterator<Item = &VerificationReport> {
        self.reports.iter().filter(|r| !r.pass)
    }
}

impl core::fmt::Display for VerificationSuite {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for r in &self.reports {
            writeln!(f, "{r}")?;
        }
        write!(f, "verification {}", if self.pass { "passed" } else { "FAILED" })
    }
}

/// Every check above, deterministic in `opts.seed`.
pub fn verify_result(
    res: &SynthesisResult,
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    u_max: Option<&Polynomial>,
    truth: Option<&DMatrix<f64>>,
    opts: &VerifyOptions,
) -> VerificationSuite {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = vec![
        check_structure(res, opts.bx, opts.n_matrix, &mut rng),
        check_certificates(res, opts.bx, opts.n_matrix, &mut rng),
        check_sandwich(res, opts.bx, opts.n_sandwich, &mut rng),
        check_matrix_sampled(res, ell, zw, opts.bx, opts.n_matrix, &mut rng),
    ];
    let pairs = schur_pairs(res, ell, zw, opts.bx, opts.n_matrix, &mut rng);
    reports.push(check_schur_equiv(&pairs, SCHUR_TOL));
    reports.push(check_dissipation_sampled(res, ell, zw, opts.bx, opts.n_xe, opts.n_upsilon, truth, &mut rng));
    if let Some(u) = u_max {
        reports.push(check_input_bound(res, u, opts.bx, opts.n_sandwich, &mut rng));
    }
    let pass = reports.iter().all(|r| r.pass);
    VerificationSuite { reports, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn lemma2_scalar_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = m(1, 1, &[1.0]);
        let rep = check_lemma2_instance(&m(1, 1, &[-3.0]), &one, &one, &one, 1.0, 200, &mut rng);
        assert!(rep.pass);
        assert!(rep.worst <= -1.0 + 1e-12, "{}", rep.worst);
        assert!((rep.worst + 1.0).abs() < 1e-9);
    }

    #[test]
    fn lemma2_zero_bound_forces_zero_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = -DMatrix::identity(3, 3);
        let e = m(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let g = m(2, 3, &[0.3, 0.0, 1.0, -2.0, 1.0, 0.0]);
        let rep = check_lemma2_instance(&c, &e, &g, &DMatrix::zeros(2, 2), 1e-3, 50, &mut rng);
        // premise -I + 1e-3 EE' is still negative definite
        assert!(rep.pass);
        assert!((rep.worst + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lemma2_premise_violation_is_not_a_counterexample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = m(1, 1, &[1.0]);
        let rep = check_lemma2_instance(&m(1, 1, &[-1.0]), &one, &one, &one, 1.0, 10, &mut rng);
        assert!(rep.premise_failed && !rep.pass);
    }

    #[test]
    fn schur_flip_is_detected() {
        // [[m11, q], [q, -2λ]] with λ = 1, m11 = -1, q = 1: scalar -1 + 1/2 < 0
        let mat = m(2, 2, &[-1.0, 1.0, 1.0, -2.0]);
        let good = SchurPair { point: vec![], matrix: mat.clone(), scalar: -0.5 };
        assert!(check_schur_equiv(&[good], SCHUR_TOL).pass);
        // λ flipped in the scalar form: -1 + 1/(2·(-1)) ... with -2λ → +2 in the matrix
        let flipped = SchurPair { point: vec![], matrix: m(2, 2, &[-1.0, 1.0, 1.0, 2.0]), scalar: -1.5 };
        assert!(!check_schur_equiv(&[flipped], SCHUR_TOL).pass);
    }

    #[test]
    fn contraction_has_requested_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_contraction(&mut rng, 5, 2, 0.7);
        assert!((op_norm(&u) - 0.7).abs() < 1e-12);
    }
}
