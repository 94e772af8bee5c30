//! Controller, ISS Lyapunov function and comparison functions for every member
//! of a consistency ellipsoid, by alternating between two SOS programs: one
//! with the controller fixed, one with `V` and `λ` fixed.
//!
//! The dissipation matrix is certified on the ball `|x|² + |e|² ≤ R²` through a
//! multiplier `σ(x, e) ∈ SOS`; with quadratic `V` and polynomial regressors of
//! degree three the unrestricted condition has no solution (its Schur term
//! grows with degree six against a degree-four diagonal).

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::consistency::ConsistencyEllipsoid;
use crate::error::{Error, Result};
use crate::poly::{monomials, Monomial, PolyMatrix, Polynomial, VarSet};
use crate::verify::{verify_result, VerificationSuite, VerifyOptions};
use crate::sdp::{InteriorPoint, SdpBackend, SdpOptions, SdpStatus};
use crate::sos::{
    compile, extract_certificate, AffExpr, AffMatrix, AffPoly, Certificate, GramPolicy, PolyTemplate, Role,
    SosProgram, TemplateCoeff,
};

/// `α(r) = Σ_k c_k r^{2k}`, `k = 1..`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassKInf {
    coeffs: Vec<f64>,
}

impl ClassKInf {
    /// Requires `c_k ≥ 0` and `Σ c_k ≥ ε`.
    pub fn new(coeffs: Vec<f64>, epsilon: f64) -> Result<Self> {
        if let Some(c) = coeffs.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::ClassKInf(alloc::format!("negative coefficient {c}")));
        }
        let sum: f64 = coeffs.iter().sum();
        if !(sum >= epsilon) {
            return Err(Error::ClassKInf(alloc::format!("coefficient sum {sum:e} below {epsilon:e}")));
        }
        Ok(Self { coeffs })
    }

    /// Clips solver round-off (`c ≥ -tol`) to zero before applying the gate.
    pub fn from_solver(coeffs: &[f64], epsilon: f64, tol: f64) -> Result<Self> {
        let c: Vec<f64> = coeffs.iter().map(|&c| if c < 0.0 && c >= -tol { 0.0 } else { c }).collect();
        let sum: f64 = c.iter().sum();
        Self::new(c, epsilon.min(sum.max(epsilon - tol)))
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r2 = r * r;
        let mut p = r2;
        let mut out = 0.0;
        for c in &self.coeffs {
            out += c * p;
            p *= r2;
        }
        out
    }

    /// `α(|v|)` as a polynomial, `|v|² = Σ_{i ∈ vars} v_i²`.
    pub fn poly(&self, nvars: usize, vars: &[usize]) -> Polynomial {
        let sq = sq_norm(nvars, vars);
        let mut out = Polynomial::zero(nvars);
        for (k, c) in self.coeffs.iter().enumerate() {
            out = &out + &sq.pow(k as u32 + 1).scale(*c);
        }
        out
    }
}

/// Same as [`ClassKInf::new`].
pub fn build_class_kinf(coeffs: Vec<f64>, epsilon: f64) -> Result<ClassKInf> {
    ClassKInf::new(coeffs, epsilon)
}

pub fn sq_norm(nvars: usize, vars: &[usize]) -> Polynomial {
    let mut out = Polynomial::zero(nvars);
    for &i in vars {
        out = &out + &Polynomial::var(nvars, i).pow(2);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub deg_v: u32,
    pub deg_k: u32,
    pub deg_lambda: u32,
    /// Number of even powers in α₁..α₄.
    pub n_alpha: [usize; 4],
    pub epsilon: f64,
    pub rounds: usize,
    /// One polynomial in the state variables per input.
    pub k_init: Vec<Polynomial>,
    pub u_max: Option<Polynomial>,
    /// Certified region `|x|² + |e|² ≤ R²`; `None` asks for a global certificate.
    pub region_radius: Option<f64>,
    pub deg_sigma: u32,
    /// Upper bound on the Gram margin `t`.
    pub margin_cap: f64,
    /// Sum of the `x_i²` coefficients of `V` in the controller-fixed step.
    pub v_trace: Option<f64>,
    /// Upper bound on every comparison-function coefficient.
    pub alpha_max: f64,
    /// Bound on the magnitude of every controller coefficient in the controller step.
    pub k_coeff_max: Option<f64>,
    /// Final steps with `V`, `λ`, `k` fixed that raise `α₃/α₄`, which spaces out events.
    pub polish: bool,
    /// Solves spent searching for the largest ratio.
    pub polish_steps: usize,
    /// Margin kept by the polish step, as a fraction of the last margin.
    pub polish_margin: f64,
    pub policy: GramPolicy,
    pub refit_lambda: bool,
    pub sdp: SdpOptions,
    pub verify: VerifyOptions,
}

impl SynthesisConfig {
    pub fn new(k_init: Vec<Polynomial>) -> Self {
        let n = k_init.first().map_or(0, Polynomial::nvars);
        Self {
            deg_v: 2,
            deg_k: 3,
            deg_lambda: 4,
            n_alpha: [2; 4],
            epsilon: 1e-4,
            rounds: 3,
            k_init,
            u_max: None,
            region_radius: Some(4.0),
            deg_sigma: 4,
            margin_cap: 1e-2,
            v_trace: Some(n as f64),
            alpha_max: 1e4,
            k_coeff_max: Some(20.0),
            polish: true,
            polish_margin: 0.1,
            polish_steps: 10,
            policy: GramPolicy::Trim,
            refit_lambda: false,
            sdp: SdpOptions::default(),
            verify: VerifyOptions::default(),
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("at least one alternation round is required".into()));
        }
        if self.k_init.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: self.k_init.len() });
        }
        for k in &self.k_init {
            if k.nvars() != n {
                return Err(Error::VariableMismatch { left: n, right: k.nvars() });
            }
            if k.constant_term() != 0.0 {
                return Err(Error::InvalidConfig("initial controller must satisfy k(0) = 0".into()));
            }
        }
        if self.deg_v < 2 || self.deg_k < 1 {
            return Err(Error::InvalidConfig("deg_v must be at least 2 and deg_k at least 1".into()));
        }
        if self.n_alpha.iter().any(|&k| k == 0) {
            return Err(Error::InvalidConfig("each comparison function needs at least one coefficient".into()));
        }
        if let Some(b) = self.k_coeff_max {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig("controller coefficient bound must be positive".into()));
            }
        }
        if let Some(r) = self.region_radius {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig("region radius must be positive".into()));
            }
        }
        if let Some(u) = &self.u_max {
            if u.nvars() != n {
                return Err(Error::VariableMismatch { left: n, right: u.nvars() });
            }
        }
        Ok(())
    }
}

/// Which side of the bilinear program is held fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum Fixed {
    /// Controller (state variables only).
    K(Vec<Polynomial>),
    /// `V` in the state variables, `λ` in state and error variables.
    VLambda { v: Polynomial, lambda: Polynomial },
    /// Everything but the comparison functions and the multipliers; the
    /// margin must stay at least `min_margin` and `c₃ₖ ≥ ratio · c₄ₖ`.
    All { v: Polynomial, lambda: Polynomial, k: Vec<Polynomial>, min_margin: f64, ratio: f64 },
}

/// Constraint indices in the assembled program.
#[derive(Clone, Debug, PartialEq)]
pub struct Slots {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub s4: usize,
    pub s5: Option<usize>,
    pub sigma: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Program {
    pub prog: SosProgram,
    pub nvars: usize,
    pub alpha: [Vec<usize>; 4],
    /// Templates in the `2n` variables `(x, e)`; fixed objects use fixed coefficients.
    pub v: PolyTemplate,
    pub lambda: PolyTemplate,
    pub k: Vec<PolyTemplate>,
    pub sigma: Option<PolyTemplate>,
    pub margin: usize,
    pub slots: Slots,
}

fn fixed_template(p: &Polynomial) -> PolyTemplate {
    let (basis, coeffs) = p.terms().map(|(m, c)| (m.clone(), TemplateCoeff::Fixed(c))).unzip();
    PolyTemplate { nvars: p.nvars(), basis, coeffs }
}

fn aff_var_times(p: &Polynomial, id: usize) -> AffPoly {
    let mut out = AffPoly::zero(p.nvars());
    for (m, c) in p.terms() {
        out = out.add(&AffPoly::term(m.clone(), AffExpr::term(id, c))).expect("same variables");
    }
    out
}

/// Assembles the SOS program for one alternation step over `ell`.
pub fn assemble_theorem1(ell: &ConsistencyEllipsoid, zw: (&[Polynomial], &PolyMatrix), cfg: &SynthesisConfig, fixed: &Fixed) -> Result<Theorem1Program> {
    let (z_basis, w_basis) = zw;
    let n = ell.n();
    let p = ell.p();
    let m = w_basis.cols();
    if z_basis.len() + w_basis.rows() != p {
        return Err(Error::DimensionMismatch { expected: p, found: z_basis.len() + w_basis.rows() });
    }
    let nv = 2 * n;
    let xs: Vec<usize> = (0..n).collect();
    let es: Vec<usize> = (n..nv).collect();
    let all: Vec<usize> = (0..nv).collect();
    let mut prog = SosProgram::new(nv);

    // comparison functions
    let sx = sq_norm(nv, &xs);
    let se = sq_norm(nv, &es);
    let mut alpha: [Vec<usize>; 4] = Default::default();
    let mut alpha_aff: Vec<AffPoly> = Vec::with_capacity(4);
    for i in 0..4 {
        let sq = if i == 3 { &se } else { &sx };
        let mut a = AffPoly::zero(nv);
        let mut sum = AffExpr::constant(-cfg.epsilon);
        // alpha1 <= V: terms above deg V would be pinned to zero and empty the interior
        let terms = if i == 0 { cfg.n_alpha[0].min(cfg.deg_v as usize / 2) } else { cfg.n_alpha[i] };
        for k in 0..terms {
            let id = prog.add_var(&alloc::format!("c{}{}", i + 1, k + 1), Role::ClassK(i as u8 + 1));
            alpha[i].push(id);
            prog.add_ge(AffExpr::var(id));
            prog.add_ge(AffExpr { constant: cfg.alpha_max, terms: [(id, -1.0)].into_iter().collect() });
            sum = sum.plus(&AffExpr::var(id));
            a = a.add(&aff_var_times(&sq.pow(k as u32 + 1), id))?;
        }
        prog.add_ge(sum);
        alpha_aff.push(a);
    }

    let (v, lambda, k) = match fixed {
        Fixed::K(k) => {
            if k.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: k.len() });
            }
            let v = prog.add_template("V", monomials(nv, &xs, 2, cfg.deg_v), Role::Lyapunov);
            let lambda = prog.add_template("lambda", monomials(nv, &all, 0, cfg.deg_lambda), Role::Multiplier);
            let k = k.iter().map(|p| p.embed(nv, 0).map(|q| fixed_template(&q))).collect::<Result<Vec<_>>>()?;
            if let Some(tr) = cfg.v_trace {
                let mut e = AffExpr::constant(-tr);
                for &i in &xs {
                    let mono = Monomial::var(nv, i).mul(&Monomial::var(nv, i));
                    if let Some(pos) = v.basis.iter().position(|b| *b == mono) {
                        if let TemplateCoeff::Var(id) = v.coeffs[pos] {
                            e = e.plus(&AffExpr::var(id));
                        }
                    }
                }
                prog.add_eq(e);
            }
            (v, lambda, k)
        }
        Fixed::VLambda { v, lambda } | Fixed::All { v, lambda, .. } => {
            let v = fixed_template(&v.embed(nv, 0)?);
            let lambda = if lambda.nvars() == nv {
                fixed_template(lambda)
            } else {
                return Err(Error::VariableMismatch { left: nv, right: lambda.nvars() });
            };
            let k: Vec<PolyTemplate> = match fixed {
                Fixed::All { k, .. } => {
                    if k.len() != m {
                        return Err(Error::DimensionMismatch { expected: m, found: k.len() });
                    }
                    k.iter().map(|p| p.embed(nv, 0).map(|q| fixed_template(&q))).collect::<Result<_>>()?
                }
                _ => {
                    let ks: Vec<PolyTemplate> = (0..m)
                        .map(|j| prog.add_template(&alloc::format!("k{}", j + 1), monomials(nv, &xs, 1, cfg.deg_k), Role::Controller))
                        .collect();
                    if let Some(b) = cfg.k_coeff_max {
                        for id in ks.iter().flat_map(PolyTemplate::var_ids) {
                            prog.add_ge(AffExpr { constant: b, terms: [(id, -1.0)].into_iter().collect() });
                            prog.add_ge(AffExpr { constant: b, terms: [(id, 1.0)].into_iter().collect() });
                        }
                    }
                    ks
                }
            };
            (v, lambda, k)
        }
    };
    let v_aff = v.to_aff();
    let lambda_aff = lambda.to_aff();
    let k_aff: Vec<AffPoly> = k.iter().map(PolyTemplate::to_aff).collect();

    // (14b)
    let s1 = prog.add_sos("s1", v_aff.sub(&alpha_aff[0])?)?;
    let s2 = prog.add_sos("s2", alpha_aff[1].sub(&v_aff)?)?;
    let s3 = prog.add_sos("s3", lambda_aff.sub(&AffPoly::constant(nv, AffExpr::constant(cfg.epsilon)))?)?;

    // v(x, e) = [Z(x); W(x) k(x + e)]
    let shift: Vec<Polynomial> = (0..nv)
        .map(|i| if i < n { &Polynomial::var(nv, i) + &Polynomial::var(nv, i + n) } else { Polynomial::var(nv, i) })
        .collect();
    let k_shift: Vec<AffPoly> = k_aff.iter().map(|k| k.subst(&shift)).collect::<Result<_>>()?;
    let mut vvec: Vec<AffPoly> = Vec::with_capacity(p);
    for z in z_basis {
        vvec.push(AffPoly::from_poly(&z.embed(nv, 0)?));
    }
    for r in 0..w_basis.rows() {
        let mut acc = AffPoly::zero(nv);
        for (c, kc) in k_shift.iter().enumerate() {
            acc = acc.add(&kc.mul_poly(&w_basis.get(r, c).embed(nv, 0)?)?)?;
        }
        vvec.push(acc);
    }
    let lin = |coef: &DMatrix<f64>, row_major_t: bool, i: usize| -> Result<AffPoly> {
        // row i of coef (or of coef') applied to vvec
        let mut acc = AffPoly::zero(nv);
        for (r, vr) in vvec.iter().enumerate() {
            let w = if row_major_t { coef[(r, i)] } else { coef[(i, r)] };
            if w != 0.0 {
                acc = acc.add(&vr.scale(w))?;
            }
        }
        Ok(acc)
    };

    let grad: Vec<AffPoly> = xs.iter().map(|&i| v_aff.deriv(i)).collect();
    let dim = 1 + n + p;
    let mut mm = AffMatrix::zeros(dim, nv);
    let mut m00 = alpha_aff[2].sub(&alpha_aff[3])?;
    for i in 0..n {
        let f_i = lin(&ell.zeta_bar, true, i)?;
        m00 = m00.add(&grad[i].mul(&f_i)?)?;
    }
    let q_half = crate::linalg::sym_sqrt(&ell.q_bar);
    for i in 0..n {
        let mut e = AffPoly::zero(nv);
        for j in 0..n {
            if q_half[(i, j)] != 0.0 {
                e = e.add(&grad[j].scale(q_half[(i, j)]))?;
            }
        }
        mm.set_sym(1 + i, 0, e);
        mm.set(1 + i, 1 + i, lambda_aff.scale(-2.0));
    }
    for j in 0..p {
        let av = lin(&ell.a_bar_inv_sqrt, false, j)?;
        mm.set_sym(1 + n + j, 0, lambda_aff.mul(&av)?);
        mm.set(1 + n + j, 1 + n + j, lambda_aff.scale(-2.0));
    }

    let mut sigma_t = None;
    let mut sigma_slot = None;
    if let Some(r) = cfg.region_radius {
        let sig = prog.add_template("sigma", monomials(nv, &all, 2, cfg.deg_sigma), Role::Multiplier);
        let g = &Polynomial::constant(nv, r * r) - &(&sx + &se);
        m00 = m00.add(&sig.to_aff().mul_poly(&g)?)?;
        sigma_slot = Some(prog.add_sos("sigma", sig.to_aff())?);
        sigma_t = Some(sig);
    }
    mm.set(0, 0, m00);
    let s4 = prog.add_matrix_sos("s4", mm.scale(-1.0))?;
    let margin = prog.add_var("t", Role::Margin);
    prog.set_margin(s4, margin);
    prog.add_ge(AffExpr { constant: cfg.margin_cap, terms: [(margin, -1.0)].into_iter().collect() });
    if let Fixed::All { min_margin, ratio, .. } = fixed {
        prog.add_ge(AffExpr { constant: -min_margin, terms: [(margin, 1.0)].into_iter().collect() });
        for (i, &c4) in alpha[3].iter().enumerate() {
            let mut e = AffExpr::term(c4, -ratio);
            if let Some(&c3) = alpha[2].get(i) {
                e = e.plus(&AffExpr::var(c3));
            }
            prog.add_ge(e);
        }
    }
    prog.minimize(AffExpr::term(margin, -1.0));

    let s5 = match &cfg.u_max {
        None => None,
        Some(u) => {
            let u2 = u.embed(nv, 0)?.pow(2);
            let mut b = AffMatrix::zeros(1 + m, nv);
            b.set(0, 0, AffPoly::from_poly(&u2));
            for (j, kj) in k_aff.iter().enumerate() {
                b.set_sym(1 + j, 0, kj.scale(-1.0));
                b.set(1 + j, 1 + j, AffPoly::constant(nv, AffExpr::constant(1.0)));
            }
            Some(prog.add_matrix_sos("s5", b)?)
        }
    };

    Ok(Theorem1Program {
        prog,
        nvars: nv,
        alpha,
        v,
        lambda,
        k,
        sigma: sigma_t,
        margin,
        slots: Slots { s1, s2, s3, s4, s5, sigma: sigma_slot },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StepKind {
    /// Controller fixed; `V`, `λ` free.
    FixK,
    /// `V`, `λ` fixed; controller free.
    FixVLambda,
    /// `V`, `λ`, `k` fixed; comparison functions tightened.
    Polish,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub round: usize,
    pub step: StepKind,
    pub feasible: bool,
    /// `NaN` when the step failed.
    #[cfg_attr(feature = "serde", serde(with = "nan_as_null"))]
    pub margin: f64,
    #[cfg_attr(feature = "serde", serde(with = "nan_as_null"))]
    pub max_residual: f64,
    pub sdp_status: Option<SdpStatus>,
    pub iterations: usize,
    pub message: String,
}

#[cfg(feature = "serde")]
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub vars: VarSet,
    /// In the state variables.
    pub k: Vec<Polynomial>,
    /// In the state variables.
    pub v: Polynomial,
    pub alpha: [ClassKInf; 4],
    /// In `(x, e)`.
    pub lambda: Polynomial,
    /// Region multiplier in `(x, e)`.
    pub sigma: Option<Polynomial>,
    pub region_radius: Option<f64>,
    pub certificates: Vec<Certificate>,
    pub epsilon: f64,
    pub margin: f64,
    pub history: Vec<StepRecord>,
    pub verification: Option<VerificationSuite>,
}

impl SynthesisResult {
    pub fn n(&self) -> usize {
        self.v.nvars()
    }

    pub fn certificate(&self, name: &str) -> Option<&Certificate> {
        self.certificates.iter().find(|c| c.name == name)
    }
}

/// Decoded solution of one step.
#[derive(Clone, Debug)]
struct StepOutcome {
    v: Polynomial,
    lambda: Polynomial,
    k: Vec<Polynomial>,
    alpha: [ClassKInf; 4],
    sigma: Option<Polynomial>,
    certificates: Vec<Certificate>,
    margin: f64,
    max_residual: f64,
}

/// Residual tolerance on extracted certificates.
pub const CERT_RESIDUAL_TOL: f64 = 1e-6;

fn clean(p: &Polynomial) -> Polynomial {
    p.truncate_relative(1e-12)
}

fn run_step<B: SdpBackend + ?Sized>(
    t1: &Theorem1Program,
    cfg: &SynthesisConfig,
    backend: &B,
    n: usize,
) -> core::result::Result<(StepOutcome, SdpStatus, usize), (String, Option<SdpStatus>, usize)> {
    let compiled = compile(&t1.prog, cfg.policy).map_err(|e| (alloc::format!("{e}"), None, 0))?;
    let sol = backend.solve(&compiled.problem).map_err(|e| (alloc::format!("{e}"), None, 0))?;
    if !sol.status.is_success() {
        return Err((
            alloc::format!("solver status {:?}; program layout:\n{}", sol.status, compiled.legend()),
            Some(sol.status),
            sol.iterations,
        ));
    }
    let ex = extract_certificate(&t1.prog, &compiled, &sol).map_err(|e| (alloc::format!("{e}"), Some(sol.status), sol.iterations))?;
    let margin = ex.value(t1.margin);
    if margin < 0.0 {
        return Err((alloc::format!("negative margin {margin:.3e}: no certificate for s4"), Some(sol.status), sol.iterations));
    }
    if ex.max_residual > CERT_RESIDUAL_TOL {
        return Err((alloc::format!("certificate residual {:.3e}", ex.max_residual), Some(sol.status), sol.iterations));
    }
    let nv = 2 * n;
    let v = clean(&ex.resolve(&t1.v)).restrict(n, 0).map_err(|e| (alloc::format!("{e}"), None, 0))?;
    let lambda = clean(&ex.resolve(&t1.lambda));
    let k = t1
        .k
        .iter()
        .map(|t| clean(&ex.resolve(t)).restrict(n, 0))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| (alloc::format!("{e}"), None, 0))?;
    let mut alpha: Vec<ClassKInf> = Vec::with_capacity(4);
    for ids in &t1.alpha {
        let c: Vec<f64> = ids.iter().map(|&i| ex.value(i)).collect();
        alpha.push(ClassKInf::from_solver(&c, cfg.epsilon, 1e-9).map_err(|e| (alloc::format!("{e}"), Some(sol.status), sol.iterations))?);
    }
    let sigma = t1.sigma.as_ref().map(|s| clean(&ex.resolve(s)));
    debug_assert_eq!(lambda.nvars(), nv);
    Ok((
        StepOutcome {
            v,
            lambda,
            k,
            alpha: alpha.try_into().expect("four functions"),
            sigma,
            certificates: ex.certificates,
            margin,
            max_residual: ex.max_residual,
        },
        sol.status,
        sol.iterations,
    ))
}

/// `min_k c₃ₖ / c₄ₖ` over the terms `α₄` actually uses.
pub fn trigger_ratio(alpha: &[ClassKInf; 4]) -> f64 {
    let c3 = alpha[2].coeffs();
    alpha[3]
        .coeffs()
        .iter()
        .enumerate()
        .filter(|(_, &c4)| c4 > 0.0)
        .map(|(i, &c4)| c3.get(i).copied().unwrap_or(0.0) / c4)
        .fold(f64::INFINITY, f64::min)
}

/// Runs `cfg.rounds` × (controller-fixed step, `V`/`λ`-fixed step).
///
/// Stops early at the first infeasible step and returns the last complete
/// solution; an infeasible very first step is an error.
pub fn alternate_with<B: SdpBackend + ?Sized>(
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    cfg: &SynthesisConfig,
    backend: &B,
) -> Result<SynthesisResult> {
    let n = ell.n();
    let m = zw.1.cols();
    cfg.validate(n, m)?;
    let mut k = cfg.k_init.clone();
    let mut history = Vec::new();
    let mut best: Option<StepOutcome> = None;
    let mut fixed_vl: Option<(Polynomial, Polynomial)> = None;
    let attempt = |round: usize, step: StepKind, fixed: Fixed, history: &mut Vec<StepRecord>| -> Result<Option<StepOutcome>> {
        let t1 = assemble_theorem1(ell, zw, cfg, &fixed)?;
        Ok(match run_step(&t1, cfg, backend, n) {
            Ok((out, status, iterations)) => {
                history.push(StepRecord {
                    round,
                    step,
                    feasible: true,
                    margin: out.margin,
                    max_residual: out.max_residual,
                    sdp_status: Some(status),
                    iterations,
                    message: String::new(),
                });
                Some(out)
            }
            Err((message, sdp_status, iterations)) => {
                history.push(StepRecord {
                    round,
                    step,
                    feasible: false,
                    margin: f64::NAN,
                    max_residual: f64::NAN,
                    sdp_status,
                    iterations,
                    message,
                });
                None
            }
        })
    };
    'rounds: for round in 1..=cfg.rounds {
        for step in [StepKind::FixK, StepKind::FixVLambda] {
            let fixed = match step {
                StepKind::FixVLambda => {
                    let (v, l) = fixed_vl.clone().expect("set by the preceding step");
                    Fixed::VLambda { v, lambda: l }
                }
                _ => Fixed::K(k.clone()),
            };
            match attempt(round, step, fixed, &mut history)? {
                Some(out) => {
                    match step {
                        StepKind::FixVLambda => k = out.k.clone(),
                        _ => fixed_vl = Some((out.v.clone(), out.lambda.clone())),
                    }
                    best = Some(out);
                }
                None if best.is_none() => {
                    let msg = history.last().map(|h| h.message.clone()).unwrap_or_default();
                    return Err(Error::Infeasible(alloc::format!("first step (round {round}) failed: {msg}")));
                }
                None => break 'rounds,
            }
        }
    }
    if cfg.polish && cfg.polish_steps > 0 {
        let b = best.clone().expect("at least one feasible step");
        let round = history.last().map_or(0, |h| h.round);
        let mut lo = trigger_ratio(&b.alpha).max(1e-12);
        let mut hi: Option<f64> = None;
        for _ in 0..cfg.polish_steps {
            let ratio = match hi {
                None => lo * 4.0,
                Some(h) => (lo * h).sqrt(),
            };
            let fixed = Fixed::All {
                v: b.v.clone(),
                lambda: b.lambda.clone(),
                k: b.k.clone(),
                min_margin: cfg.polish_margin * b.margin,
                ratio,
            };
            match attempt(round, StepKind::Polish, fixed, &mut history)? {
                Some(out) => {
                    lo = ratio;
                    best = Some(out);
                }
                None => hi = Some(ratio),
            }
            if hi.is_some_and(|h| h / lo < 1.1) {
                break;
            }
        }
    }
    let out = best.expect("at least one feasible step");
    let mut res = SynthesisResult {
        vars: VarSet::states(n),
        k: out.k,
        v: out.v,
        alpha: out.alpha,
        lambda: out.lambda,
        sigma: out.sigma,
        region_radius: cfg.region_radius,
        certificates: out.certificates,
        epsilon: cfg.epsilon,
        margin: out.margin,
        history,
        verification: None,
    };
    let suite = verify_result(&res, ell, zw, cfg.u_max.as_ref(), None, &cfg.verify);
    if !suite.pass {
        return Err(Error::Verification(alloc::format!("{suite}")));
    }
    res.verification = Some(suite);
    Ok(res)
}

/// [`alternate_with`] using the built-in interior-point solver.
pub fn alternate(ell: &ConsistencyEllipsoid, zw: (&[Polynomial], &PolyMatrix), cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    alternate_with(ell, zw, cfg, &InteriorPoint::new(cfg.sdp))
}

/// The dissipation matrix at `(x, e)` for a numeric result; `⪯ 0` is required.
pub fn dissipation_matrix(
    res: &SynthesisResult,
    ell: &ConsistencyEllipsoid,
    zw: (&[Polynomial], &PolyMatrix),
    x: &[f64],
    e: &[f64],
) -> DMatrix<f64> {
    let parts = DissipationParts::eval(res, zw, x, e);
    parts.matrix(ell)
}

/// Scalar ingredients of the dissipation condition at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct DissipationParts {
    /// `α₃(|x|) − α₄(|e|)`.
    pub alpha_diff: f64,
    pub grad_v: Vec<f64>,
    /// `[Z(x); W(x) k(x + e)]`.
    pub v: Vec<f64>,
    pub lambda: f64,
}

impl DissipationParts {
    pub fn eval(res: &SynthesisResult, zw: (&[Polynomial], &PolyMatrix), x: &[f64], e: &[f64]) -> Self {
        let n = x.len();
        let xe: Vec<f64> = x.iter().chain(e).copied().collect();
        let xpe: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ne = e.iter().map(|a| a * a).sum::<f64>().sqrt();
        let grad_v = (0..n).map(|i| res.v.deriv(i).eval_unchecked(x)).collect();
        let u: Vec<f64> = res.k.iter().map(|k| k.eval_unchecked(&xpe)).collect();
        let v = crate::consistency::regressor(zw.0, zw.1, x, &u).iter().copied().collect();
        Self {
            alpha_diff: res.alpha[2].eval(nx) - res.alpha[3].eval(ne),
            grad_v,
            v,
            lambda: res.lambda.eval_unchecked(&xe),
        }
    }

    /// `α₃ − α₄ + ∇V ζ̄' v`.
    pub fn m11(&self, ell: &ConsistencyEllipsoid) -> f64 {
        let f = ell.zeta_bar.transpose() * nalgebra::DVector::from_column_slice(&self.v);
        self.alpha_diff + self.grad_v.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn matrix(&self, ell: &ConsistencyEllipsoid) -> DMatrix<f64> {
        let n = self.grad_v.len();
        let p = self.v.len();
        let dim = 1 + n + p;
        let mut mm = DMatrix::zeros(dim, dim);
        mm[(0, 0)] = self.m11(ell);
        let qg = crate::linalg::sym_sqrt(&ell.q_bar) * nalgebra::DVector::from_column_slice(&self.grad_v);
        for i in 0..n {
            mm[(1 + i, 0)] = qg[i];
            mm[(0, 1 + i)] = qg[i];
            mm[(1 + i, 1 + i)] = -2.0 * self.lambda;
        }
        let av = &ell.a_bar_inv_sqrt * nalgebra::DVector::from_column_slice(&self.v);
        for j in 0..p {
            mm[(1 + n + j, 0)] = self.lambda * av[j];
            mm[(0, 1 + n + j)] = self.lambda * av[j];
            mm[(1 + n + j, 1 + n + j)] = -2.0 * self.lambda;
        }
        mm
    }

    /// `M₁₁ + |Q̄^{1/2}∇V|²/(2λ) + (λ/2)|Ā^{-1/2} v|²`.
    pub fn schur_scalar(&self, ell: &ConsistencyEllipsoid) -> f64 {
        let qg = crate::linalg::sym_sqrt(&ell.q_bar) * nalgebra::DVector::from_column_slice(&self.grad_v);
        let av = &ell.a_bar_inv_sqrt * nalgebra::DVector::from_column_slice(&self.v);
        self.m11(ell) + qg.norm_squared() / (2.0 * self.lambda) + 0.5 * self.lambda * av.norm_squared()
    }
}
