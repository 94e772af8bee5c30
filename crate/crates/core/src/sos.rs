//! Sum-of-squares programs over polynomials whose coefficients are affine in a
//! set of scalar decision variables, compiled to [`SdpProblem`]s through Gram
//! matrices.
//!
//! A scalar constraint `p ∈ SOS` becomes `p ≡ z'Gz` with `G ⪰ 0`; an `m×m`
//! matrix constraint `M ∈ SOS` becomes `y'My ≡ (y⊗z)'G(y⊗z)`, where every row
//! of `M` may use its own monomial vector.
//!
//! With [`GramPolicy::Trim`] the monomial vector of row `j` is restricted to
//! what the diagonal entry `M_jj` can support (half its degree range, per
//! variable and in total). Coefficient-matching equations that no Gram entry
//! can reach then become linear equations on the decision variables; they are
//! eliminated through a null-space parameterization and the bases recomputed
//! until nothing changes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{null_space, symmetrize};
use crate::poly::{monomials, Monomial, Polynomial, COEFF_EPS};
use crate::sdp::{LinearForm, SdpBackend, SdpProblem, SdpSolution};

/// `constant + Σ coeff_i * var_i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffExpr {
    pub constant: f64,
    pub terms: BTreeMap<usize, f64>,
}

impl AffExpr {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: BTreeMap::new() }
    }

    pub fn var(id: usize) -> Self {
        Self::term(id, 1.0)
    }

    pub fn term(id: usize, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(id, c);
        Self { constant: 0.0, terms }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().fold(self.constant.abs(), |m, c| m.max(c.abs()))
    }

    pub fn add_scaled(&mut self, other: &AffExpr, s: f64) {
        self.constant += s * other.constant;
        for (&k, &v) in &other.terms {
            *self.terms.entry(k).or_insert(0.0) += s * v;
        }
    }

    pub fn scale(&self, s: f64) -> AffExpr {
        let mut out = AffExpr::default();
        out.add_scaled(self, s);
        out.prune(COEFF_EPS)
    }

    pub fn plus(&self, other: &AffExpr) -> AffExpr {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out.prune(COEFF_EPS)
    }

    pub fn minus(&self, other: &AffExpr) -> AffExpr {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out.prune(COEFF_EPS)
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&k, &v)| v * values[k]).sum::<f64>()
    }

    fn prune(mut self, eps: f64) -> Self {
        self.terms.retain(|_, v| v.abs() >= eps);
        if self.constant.abs() < eps {
            self.constant = 0.0;
        }
        self
    }
}

/// Polynomial with [`AffExpr`] coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct AffPoly {
    nvars: usize,
    terms: BTreeMap<Monomial, AffExpr>,
}

impl AffPoly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: AffExpr) -> Self {
        Self::term(Monomial::one(nvars), c)
    }

    pub fn term(m: Monomial, c: AffExpr) -> Self {
        let nvars = m.nvars();
        let mut out = Self::zero(nvars);
        out.add_term(m, &c, 1.0);
        out
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        Self {
            nvars: p.nvars(),
            terms: p.terms().map(|(m, c)| (m.clone(), AffExpr::constant(c))).collect(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> Option<&AffExpr> {
        self.terms.get(m)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// True when no coefficient depends on a decision variable.
    pub fn is_numeric(&self) -> bool {
        self.terms.values().all(AffExpr::is_constant)
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().fold(0.0, |m, e| m.max(e.max_abs()))
    }

    fn add_term(&mut self, m: Monomial, c: &AffExpr, s: f64) {
        let e = self.terms.entry(m.clone()).or_default();
        e.add_scaled(c, s);
        let pruned = core::mem::take(e).prune(COEFF_EPS);
        if pruned.is_zero() {
            self.terms.remove(&m);
        } else {
            *self.terms.get_mut(&m).unwrap() = pruned;
        }
    }

    fn check(&self, other: &AffPoly) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::VariableMismatch { left: self.nvars, right: other.nvars });
        }
        Ok(())
    }

    pub fn add(&self, other: &AffPoly) -> Result<AffPoly> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c, 1.0);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &AffPoly) -> Result<AffPoly> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c, -1.0);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> AffPoly {
        let mut out = AffPoly::zero(self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c, s);
        }
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> Result<AffPoly> {
        if self.nvars != p.nvars() {
            return Err(Error::VariableMismatch { left: self.nvars, right: p.nvars() });
        }
        let mut out = AffPoly::zero(self.nvars);
        for (m, c) in &self.terms {
            for (pm, pc) in p.terms() {
                out.add_term(m.mul(pm), c, pc);
            }
        }
        Ok(out)
    }

    /// Product; fails unless one factor is free of decision variables.
    pub fn mul(&self, other: &AffPoly) -> Result<AffPoly> {
        self.check(other)?;
        if self.is_numeric() {
            other.mul_poly(&self.to_numeric())
        } else if other.is_numeric() {
            self.mul_poly(&other.to_numeric())
        } else {
            Err(Error::NonAffine("product of two decision-dependent polynomials".into()))
        }
    }

    /// Constant parts only.
    fn to_numeric(&self) -> Polynomial {
        Polynomial::from_terms(self.nvars, self.terms.iter().map(|(m, c)| (m.exps().to_vec(), c.constant)))
            .expect("consistent variable count")
    }

    pub fn deriv(&self, i: usize) -> AffPoly {
        let mut out = AffPoly::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.exps()[i];
            if e == 0 {
                continue;
            }
            let mut ex = m.exps().to_vec();
            ex[i] -= 1;
            out.add_term(Monomial::new(ex), c, e as f64);
        }
        out
    }

    /// Replaces variable `i` by the numeric polynomial `images[i]`.
    pub fn subst(&self, images: &[Polynomial]) -> Result<AffPoly> {
        if images.len() != self.nvars {
            return Err(Error::DimensionMismatch { expected: self.nvars, found: images.len() });
        }
        let out_n = images.first().map_or(0, Polynomial::nvars);
        let mut out = AffPoly::zero(out_n);
        for (m, c) in &self.terms {
            let mono = Polynomial::monomial(m.clone(), 1.0);
            let expanded = mono.subst(images)?;
            for (pm, pc) in expanded.terms() {
                out.add_term(pm.clone(), c, pc);
            }
        }
        Ok(out)
    }

    pub fn embed(&self, nvars: usize, offset: usize) -> Result<AffPoly> {
        if offset + self.nvars > nvars {
            return Err(Error::DimensionMismatch { expected: nvars, found: offset + self.nvars });
        }
        let terms = self
            .terms
            .iter()
            .map(|(m, c)| {
                let mut e = vec![0; nvars];
                e[offset..offset + self.nvars].copy_from_slice(m.exps());
                (Monomial::new(e), c.clone())
            })
            .collect();
        Ok(AffPoly { nvars, terms })
    }

    /// Numeric polynomial at the given decision values.
    pub fn eval(&self, values: &[f64]) -> Polynomial {
        Polynomial::from_terms(self.nvars, self.terms.iter().map(|(m, c)| (m.exps().to_vec(), c.eval(values))))
            .expect("consistent variable count")
    }

    /// Re-expresses coefficients through `x = x0 + N w`.
    fn reduce(&self, param: &Param) -> AffPoly {
        let mut out = AffPoly::zero(self.nvars);
        for (m, c) in &self.terms {
            let r = param.reduce(c);
            if !r.is_zero() {
                out.terms.insert(m.clone(), r);
            }
        }
        out
    }
}

/// Square matrix of [`AffPoly`].
#[derive(Clone, Debug, PartialEq)]
pub struct AffMatrix {
    dim: usize,
    entries: Vec<AffPoly>,
}

impl AffMatrix {
    pub fn zeros(dim: usize, nvars: usize) -> Self {
        Self { dim, entries: vec![AffPoly::zero(nvars); dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nvars(&self) -> usize {
        self.entries.first().map_or(0, AffPoly::nvars)
    }

    pub fn get(&self, i: usize, j: usize) -> &AffPoly {
        &self.entries[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: AffPoly) {
        self.entries[i * self.dim + j] = p;
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, p: AffPoly) {
        self.set(j, i, p.clone());
        self.set(i, j, p);
    }

    pub fn scale(&self, s: f64) -> AffMatrix {
        AffMatrix { dim: self.dim, entries: self.entries.iter().map(|p| p.scale(s)).collect() }
    }

    pub fn from_numeric(rows: &[Vec<Polynomial>]) -> Result<Self> {
        let dim = rows.len();
        let nvars = rows.first().and_then(|r| r.first()).map_or(0, Polynomial::nvars);
        let mut out = Self::zeros(dim, nvars);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
            for (j, p) in row.iter().enumerate() {
                out.set(i, j, AffPoly::from_poly(p));
            }
        }
        Ok(out)
    }

    pub fn eval(&self, values: &[f64]) -> Vec<Vec<Polynomial>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j).eval(values)).collect()).collect()
    }

    /// `(M + M') / 2`, rejecting asymmetry beyond `1e-10` relative.
    fn symmetrized(&self) -> Result<AffMatrix> {
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let a = self.get(i, j);
                let b = self.get(j, i);
                let diff = a.sub(b)?;
                let scale = 1.0 + a.max_abs().max(b.max_abs());
                if diff.max_abs() > 1e-10 * scale {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "matrix SOS expression is not symmetric at ({i}, {j})"
                    )));
                }
                let s = a.add(b)?.scale(0.5);
                out.set_sym(i, j, s);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Role {
    Lyapunov,
    Controller,
    Multiplier,
    /// Coefficient of the class-K∞ function with the given index.
    ClassK(u8),
    Margin,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoeffVar {
    pub id: usize,
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateCoeff {
    Var(usize),
    Fixed(f64),
}

/// A polynomial `Σ coeff_i * basis_i` with unknown or fixed coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyTemplate {
    pub nvars: usize,
    pub basis: Vec<Monomial>,
    pub coeffs: Vec<TemplateCoeff>,
}

impl PolyTemplate {
    pub fn to_aff(&self) -> AffPoly {
        let mut out = AffPoly::zero(self.nvars);
        for (m, c) in self.basis.iter().zip(&self.coeffs) {
            let e = match c {
                TemplateCoeff::Var(id) => AffExpr::var(*id),
                TemplateCoeff::Fixed(v) => AffExpr::constant(*v),
            };
            out.add_term(m.clone(), &e, 1.0);
        }
        out
    }

    pub fn resolve(&self, values: &[f64]) -> Polynomial {
        self.to_aff().eval(values)
    }

    pub fn var_ids(&self) -> Vec<usize> {
        self.coeffs
            .iter()
            .filter_map(|c| match c {
                TemplateCoeff::Var(id) => Some(*id),
                TemplateCoeff::Fixed(_) => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosConstraint {
    pub name: String,
    pub expr: AffMatrix,
    /// Scalar variable `t`; the constraint becomes `M - t * diag(z_j'z_j) ∈ SOS`.
    pub margin: Option<usize>,
    scalar: bool,
}

/// Gram basis selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum GramPolicy {
    /// All monomials up to half the (ceiling) maximum degree, shared by every row.
    Full,
    /// Per-row degree-range trimming with elimination of unreachable terms.
    #[default]
    Trim,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SosProgram {
    nvars: usize,
    pub vars: Vec<CoeffVar>,
    pub templates: Vec<(String, PolyTemplate)>,
    pub constraints: Vec<SosConstraint>,
    pub equalities: Vec<AffExpr>,
    /// `expr >= 0`.
    pub inequalities: Vec<AffExpr>,
    /// Minimized.
    pub objective: Option<AffExpr>,
}

impl SosProgram {
    pub fn new(nvars: usize) -> Self {
        Self { nvars, ..Default::default() }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn add_var(&mut self, name: &str, role: Role) -> usize {
        let id = self.vars.len();
        self.vars.push(CoeffVar { id, name: name.into(), role });
        id
    }

    /// Template over `basis` with one fresh variable per monomial.
    pub fn add_template(&mut self, name: &str, basis: Vec<Monomial>, role: Role) -> PolyTemplate {
        let coeffs = basis
            .iter()
            .enumerate()
            .map(|(i, _)| TemplateCoeff::Var(self.add_var(&alloc::format!("{name}[{i}]"), role)))
            .collect();
        let t = PolyTemplate { nvars: basis.first().map_or(self.nvars, Monomial::nvars), basis, coeffs };
        self.templates.push((name.into(), t.clone()));
        t
    }

    pub fn template(&self, name: &str) -> Option<&PolyTemplate> {
        self.templates.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn add_sos(&mut self, name: &str, expr: AffPoly) -> Result<usize> {
        if expr.nvars() != self.nvars {
            return Err(Error::VariableMismatch { left: self.nvars, right: expr.nvars() });
        }
        let mut m = AffMatrix::zeros(1, self.nvars);
        m.set(0, 0, expr);
        self.constraints.push(SosConstraint { name: name.into(), expr: m, margin: None, scalar: true });
        Ok(self.constraints.len() - 1)
    }

    pub fn add_matrix_sos(&mut self, name: &str, expr: AffMatrix) -> Result<usize> {
        if expr.nvars() != self.nvars {
            return Err(Error::VariableMismatch { left: self.nvars, right: expr.nvars() });
        }
        let expr = expr.symmetrized()?;
        self.constraints.push(SosConstraint { name: name.into(), expr, margin: None, scalar: false });
        Ok(self.constraints.len() - 1)
    }

    pub fn set_margin(&mut self, constraint: usize, var: usize) {
        self.constraints[constraint].margin = Some(var);
    }

    pub fn add_eq(&mut self, e: AffExpr) {
        self.equalities.push(e);
    }

    pub fn add_ge(&mut self, e: AffExpr) {
        self.inequalities.push(e);
    }

    pub fn minimize(&mut self, e: AffExpr) {
        self.objective = Some(e);
    }
}

/// `x = x0 + N w`.
#[derive(Clone, Debug, PartialEq)]
struct Param {
    x0: DVector<f64>,
    n: DMatrix<f64>,
}

impl Param {
    fn identity(nx: usize) -> Self {
        Self { x0: DVector::zeros(nx), n: DMatrix::identity(nx, nx) }
    }

    fn nw(&self) -> usize {
        self.n.ncols()
    }

    fn reduce(&self, e: &AffExpr) -> AffExpr {
        let mut out = AffExpr::constant(e.constant);
        let mut dense = vec![0.0; self.nw()];
        for (&k, &v) in &e.terms {
            out.constant += v * self.x0[k];
            for (j, d) in dense.iter_mut().enumerate() {
                *d += v * self.n[(k, j)];
            }
        }
        for (j, d) in dense.into_iter().enumerate() {
            if d != 0.0 {
                out.terms.insert(j, d);
            }
        }
        out.prune(1e-15)
    }

    fn x(&self, w: &[f64]) -> Vec<f64> {
        (&self.x0 + &self.n * DVector::from_column_slice(w)).iter().copied().collect()
    }
}

/// Location of one constraint's Gram matrix in the compiled problem.
#[derive(Clone, Debug, PartialEq)]
pub struct GramLayout {
    pub name: String,
    /// `None` when every row basis is empty.
    pub block: Option<usize>,
    pub bases: Vec<Vec<Monomial>>,
    pub offsets: Vec<usize>,
}

impl GramLayout {
    pub fn size(&self) -> usize {
        self.bases.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    pub problem: SdpProblem,
    pub grams: Vec<GramLayout>,
    /// Blocks holding inequality slacks, in order.
    pub slack_blocks: Vec<usize>,
    param: Param,
    objective_constant: f64,
}

impl Compiled {
    /// Decision-variable values from a solution's free variables.
    pub fn values(&self, sol: &SdpSolution) -> Vec<f64> {
        self.param.x(&sol.free_values)
    }

    /// Number of free parameters after elimination.
    pub fn reduced_dim(&self) -> usize {
        self.param.nw()
    }

    /// Human-readable layout summary.
    pub fn legend(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} equalities, {} free, {} blocks",
            self.problem.equalities.len(),
            self.problem.free_vars,
            self.problem.psd_blocks.len()
        );
        for g in &self.grams {
            let sizes: Vec<usize> = g.bases.iter().map(Vec::len).collect();
            match g.block {
                Some(b) => {
                    let _ = writeln!(s, "block {b}: {} (size {}, rows {:?})", g.name, g.size(), sizes);
                }
                None => {
                    let _ = writeln!(s, "(empty): {}", g.name);
                }
            }
        }
        for b in &self.slack_blocks {
            let _ = writeln!(s, "block {b}: inequality slack");
        }
        s
    }
}

/// Per-variable and total degree range of a polynomial's support.
struct DegreeBox {
    tmin: u32,
    tmax: u32,
    vmin: Vec<u32>,
    vmax: Vec<u32>,
}

fn degree_box<'a>(nvars: usize, support: impl Iterator<Item = &'a Monomial>) -> Option<DegreeBox> {
    let mut b: Option<DegreeBox> = None;
    for m in support {
        let d = m.degree();
        match &mut b {
            None => {
                b = Some(DegreeBox { tmin: d, tmax: d, vmin: m.exps().to_vec(), vmax: m.exps().to_vec() })
            }
            Some(bx) => {
                bx.tmin = bx.tmin.min(d);
                bx.tmax = bx.tmax.max(d);
                for i in 0..nvars {
                    bx.vmin[i] = bx.vmin[i].min(m.exps()[i]);
                    bx.vmax[i] = bx.vmax[i].max(m.exps()[i]);
                }
            }
        }
    }
    b
}

fn row_basis(nvars: usize, diag: &AffPoly, policy: GramPolicy, full_deg: u32, tiny: f64) -> Vec<Monomial> {
    let all: Vec<usize> = (0..nvars).collect();
    match policy {
        GramPolicy::Full => monomials(nvars, &all, 0, full_deg),
        GramPolicy::Trim => {
            let Some(bx) = degree_box(nvars, diag.terms().filter(|(_, e)| e.max_abs() > tiny).map(|(m, _)| m)) else {
                return Vec::new();
            };
            let lo = bx.tmin.div_ceil(2);
            let hi = bx.tmax / 2;
            if lo > hi {
                return Vec::new();
            }
            monomials(nvars, &all, lo, hi)
                .into_iter()
                .filter(|m| {
                    m.exps()
                        .iter()
                        .enumerate()
                        .all(|(i, &e)| 2 * e >= bx.vmin[i] && 2 * e <= bx.vmax[i])
                })
                .collect()
        }
    }
}

/// Gram positions `(r, c, weight)` reaching entry `(j, k)` at each monomial.
fn reach(bases: &[Vec<Monomial>], offsets: &[usize], j: usize, k: usize) -> BTreeMap<Monomial, Vec<(usize, usize, f64)>> {
    let mut out: BTreeMap<Monomial, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (a, ma) in bases[j].iter().enumerate() {
        for (b, mb) in bases[k].iter().enumerate() {
            if j == k && b < a {
                continue;
            }
            let w = if j == k && a != b { 2.0 } else { 1.0 };
            out.entry(ma.mul(mb)).or_default().push((offsets[j] + a, offsets[k] + b, w));
        }
    }
    out
}

fn layout(c: &SosConstraint, reduced: &AffMatrix, policy: GramPolicy) -> (Vec<Vec<Monomial>>, Vec<usize>) {
    let n = reduced.nvars();
    let full_deg = (0..reduced.dim())
        .flat_map(|i| (0..reduced.dim()).map(move |j| (i, j)))
        .map(|(i, j)| reduced.get(i, j).degree())
        .max()
        .unwrap_or(0)
        .div_ceil(2);
    let _ = c;
    let tiny = NOISE * (1.0 + reduced.entries.iter().map(AffPoly::max_abs).fold(0.0, f64::max));
    let bases: Vec<Vec<Monomial>> =
        (0..reduced.dim()).map(|j| row_basis(n, reduced.get(j, j), policy, full_deg, tiny)).collect();
    let mut offsets = Vec::with_capacity(bases.len());
    let mut acc = 0;
    for b in &bases {
        offsets.push(acc);
        acc += b.len();
    }
    (bases, offsets)
}

fn reduce_matrix(m: &AffMatrix, param: &Param) -> AffMatrix {
    AffMatrix { dim: m.dim, entries: m.entries.iter().map(|p| p.reduce(param)).collect() }
}

/// Margin term `t * Σ_a z_a^2` on every diagonal entry.
fn with_margin(c: &SosConstraint, bases: &[Vec<Monomial>]) -> AffMatrix {
    let mut m = c.expr.clone();
    if let Some(t) = c.margin {
        for (j, basis) in bases.iter().enumerate() {
            let mut d = m.get(j, j).clone();
            for z in basis {
                d = d.sub(&AffPoly::term(z.mul(z), AffExpr::var(t))).expect("same variable set");
            }
            m.set(j, j, d);
        }
    }
    m
}

/// Relative size below which reduced coefficients are treated as round-off.
const NOISE: f64 = 1e-10;

/// Compiles `prog` into a standard-form SDP.
pub fn compile(prog: &SosProgram, policy: GramPolicy) -> Result<Compiled> {
    for c in &prog.constraints {
        if c.scalar {
            let d = c.expr.get(0, 0).degree();
            if d % 2 == 1 {
                return Err(Error::OddDegree { name: c.name.clone(), degree: d });
            }
        }
    }
    let nx = prog.vars.len();
    let mut param = Param::identity(nx);
    let mut pending: Vec<AffExpr> = prog.equalities.clone();

    let max_rounds = 64;
    let mut round = 0;
    loop {
        round += 1;
        let mut forced: Vec<(AffExpr, String)> =
            pending.drain(..).map(|e| (param.reduce(&e), String::from("linear equality"))).collect();
        if policy == GramPolicy::Trim {
            for c in &prog.constraints {
                let red = reduce_matrix(&c.expr, &param);
                let (bases, offsets) = layout(c, &red, policy);
                let scale = 1.0 + red.entries.iter().map(AffPoly::max_abs).fold(0.0, f64::max);
                let tiny = NOISE * scale;
                for j in 0..red.dim() {
                    for k in j..red.dim() {
                        let r = reach(&bases, &offsets, j, k);
                        for (m, e) in red.get(j, k).terms() {
                            if !r.contains_key(m) && e.max_abs() > tiny {
                                forced.push((e.clone(), c.name.clone()));
                            }
                        }
                    }
                }
            }
        }
        forced.retain(|(e, _)| !e.is_zero());
        if forced.is_empty() {
            break;
        }
        let nw = param.nw();
        let mut a = DMatrix::zeros(forced.len(), nw);
        let mut rhs = DVector::zeros(forced.len());
        for (i, (e, _)) in forced.iter().enumerate() {
            for (&k, &v) in &e.terms {
                a[(i, k)] = v;
            }
            rhs[i] = -e.constant;
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let w0 = if smax > 0.0 {
            svd.solve(&rhs, 1e-10 * smax).map_err(|e| Error::NumericalFailure(e.into()))?
        } else {
            DVector::zeros(nw)
        };
        let resid = (&a * &w0 - &rhs).norm();
        if resid > 1e-8 * (1.0 + rhs.norm()) {
            let names: Vec<&str> = forced.iter().map(|(_, n)| n.as_str()).collect();
            let mut uniq: Vec<&str> = Vec::new();
            for n in names {
                if !uniq.contains(&n) {
                    uniq.push(n);
                }
            }
            return Err(Error::Infeasible(alloc::format!(
                "coefficient matching is inconsistent (residual {resid:.3e}) in {}",
                uniq.join(", ")
            )));
        }
        let ns = null_space(&a, 1e-10);
        if ns.ncols() == nw && w0.norm() == 0.0 {
            break;
        }
        param = Param { x0: &param.x0 + &param.n * &w0, n: &param.n * ns };
        if round >= max_rounds {
            return Err(Error::NumericalFailure("Gram basis elimination did not settle".into()));
        }
    }

    build(prog, policy, param)
}

fn build(prog: &SosProgram, policy: GramPolicy, param: Param) -> Result<Compiled> {
    let mut problem = SdpProblem::new();
    let nw = param.nw();
    problem.add_free(nw);
    let mut grams = Vec::with_capacity(prog.constraints.len());
    for c in &prog.constraints {
        let red0 = reduce_matrix(&c.expr, &param);
        let (bases, offsets) = layout(c, &red0, policy);
        let red = reduce_matrix(&with_margin(c, &bases), &param);
        let tiny = NOISE * (1.0 + red0.entries.iter().map(AffPoly::max_abs).fold(0.0, f64::max));
        let size: usize = bases.iter().map(Vec::len).sum();
        let block = if size > 0 { Some(problem.add_block(size)) } else { None };
        for j in 0..red.dim() {
            for k in j..red.dim() {
                let r = reach(&bases, &offsets, j, k);
                let entry = red.get(j, k);
                let mut mons: Vec<&Monomial> = r.keys().collect();
                for (m, e) in entry.terms() {
                    if !r.contains_key(m) && e.max_abs() > tiny {
                        mons.push(m);
                    }
                }
                for m in mons {
                    let mut lhs = LinearForm::new();
                    if let (Some(b), Some(pos)) = (block, r.get(m)) {
                        for &(p, q, w) in pos {
                            lhs.add_psd(b, p, q, w);
                        }
                    }
                    let e = entry.coeff(m).cloned().unwrap_or_default();
                    for (&l, &v) in &e.terms {
                        lhs.add_free(l, -v);
                    }
                    if lhs.is_empty() {
                        if e.constant.abs() > 1e-9 * (1.0 + entry.max_abs()) {
                            return Err(Error::Infeasible(alloc::format!(
                                "`{}` requires a nonzero coefficient that no Gram entry can produce",
                                c.name
                            )));
                        }
                        continue;
                    }
                    problem.add_equality(lhs, e.constant);
                }
            }
        }
        grams.push(GramLayout { name: c.name.clone(), block, bases, offsets });
    }
    let mut slack_blocks = Vec::new();
    for e in &prog.inequalities {
        let r = param.reduce(e);
        if r.terms.is_empty() && r.constant < -1e-9 {
            return Err(Error::Infeasible(alloc::format!(
                "linear inequality reduces to {} >= 0",
                r.constant
            )));
        }
        let b = problem.add_block(1);
        slack_blocks.push(b);
        let mut lhs = LinearForm::new();
        lhs.add_psd(b, 0, 0, -1.0);
        for (&l, &v) in &r.terms {
            lhs.add_free(l, v);
        }
        problem.add_equality(lhs, -r.constant);
    }
    let mut objective_constant = 0.0;
    if let Some(obj) = &prog.objective {
        let r = param.reduce(obj);
        objective_constant = r.constant;
        for (&l, &v) in &r.terms {
            problem.objective.add_free(l, v);
        }
    }
    Ok(Compiled { problem, grams, slack_blocks, param, objective_constant })
}

/// Gram certificate for one constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub name: String,
    pub bases: Vec<Vec<Monomial>>,
    pub gram: DMatrix<f64>,
    /// `gram ≈ factor * factor'`, from the eigen-decomposition.
    pub factor: DMatrix<f64>,
    pub min_eig: f64,
    /// Max coefficient-wise `|M - (y⊗z)'G(y⊗z)|`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosSolution {
    pub values: Vec<f64>,
    pub certificates: Vec<Certificate>,
    pub max_residual: f64,
    pub objective: f64,
}

impl SosSolution {
    pub fn resolve(&self, t: &PolyTemplate) -> Polynomial {
        t.resolve(&self.values)
    }

    pub fn value(&self, var: usize) -> f64 {
        self.values[var]
    }
}

/// Gram floor below which extraction fails.
pub const EXTRACT_EIG_TOL: f64 = 1e-7;

/// Smallest Frobenius change of the symmetric `gram` making `Σ w G[a, b] = want`.
fn project_group(gram: &mut DMatrix<f64>, pos: &[(usize, usize, f64)], want: f64) {
    let cost = |a: usize, b: usize| if a == b { 1.0 } else { 2.0 };
    let have: f64 = pos.iter().map(|&(a, b, w)| w * gram[(a, b)]).sum();
    let denom: f64 = pos.iter().map(|&(a, b, w)| w * w / cost(a, b)).sum();
    if denom == 0.0 {
        return;
    }
    let step = (want - have) / denom;
    for &(a, b, w) in pos {
        let d = step * w / cost(a, b);
        gram[(a, b)] += d;
        if a != b {
            gram[(b, a)] += d;
        }
    }
}

/// Recovers decision values and per-constraint Gram certificates; each Gram
/// is first projected onto its coefficient-matching equations.
pub fn extract_certificate(prog: &SosProgram, compiled: &Compiled, sol: &SdpSolution) -> Result<SosSolution> {
    if !sol.status.is_success() {
        return Err(Error::Certificate(alloc::format!("solver status {:?}", sol.status)));
    }
    let values = compiled.values(sol);
    let mut certificates = Vec::with_capacity(prog.constraints.len());
    let mut max_residual: f64 = 0.0;
    for (c, g) in prog.constraints.iter().zip(&compiled.grams) {
        let size = g.size();
        let mut gram = match g.block {
            Some(b) => symmetrize(&sol.block_values[b]),
            None => DMatrix::zeros(0, 0),
        };
        let target = with_margin(c, &g.bases);
        let mut groups = Vec::new();
        for j in 0..target.dim() {
            for k in j..target.dim() {
                groups.push((target.get(j, k).eval(&values), reach(&g.bases, &g.offsets, j, k)));
            }
        }
        for (p, r) in &groups {
            for (m, pos) in r {
                project_group(&mut gram, pos, p.coeff(m));
            }
        }
        let (min_eig, factor) = if size == 0 {
            (0.0, DMatrix::zeros(0, 0))
        } else {
            let e = SymmetricEigen::new(gram.clone());
            let lo = e.eigenvalues.min();
            let hi = e.eigenvalues.max().max(0.0);
            let keep: Vec<usize> = (0..size).filter(|&i| e.eigenvalues[i] > 1e-12 * hi).collect();
            let mut f = DMatrix::zeros(size, keep.len());
            for (col, &i) in keep.iter().enumerate() {
                let s = num_traits::Float::sqrt(e.eigenvalues[i]);
                f.set_column(col, &(e.eigenvectors.column(i) * s));
            }
            (lo, f)
        };
        if min_eig < -EXTRACT_EIG_TOL {
            return Err(Error::Certificate(alloc::format!(
                "Gram matrix of `{}` has eigenvalue {min_eig:.3e}",
                c.name
            )));
        }
        let mut residual: f64 = 0.0;
        for (p, r) in &groups {
            let mut recon: BTreeMap<&Monomial, f64> = BTreeMap::new();
            for (m, pos) in r {
                recon.insert(m, pos.iter().map(|&(a, b, w)| w * gram[(a, b)]).sum());
            }
            for (m, v) in p.terms() {
                residual = residual.max((v - recon.get(m).copied().unwrap_or(0.0)).abs());
            }
            for (m, v) in &recon {
                residual = residual.max((v - p.coeff(m)).abs());
            }
        }
        max_residual = max_residual.max(residual);
        certificates.push(Certificate {
            name: c.name.clone(),
            bases: g.bases.clone(),
            gram,
            factor,
            min_eig,
            residual,
        });
    }
    let objective = prog.objective.as_ref().map_or(0.0, |o| o.eval(&values));
    let _ = compiled.objective_constant;
    Ok(SosSolution { values, certificates, max_residual, objective })
}

/// Compile, solve with `backend`, extract.
pub fn solve_program<B: SdpBackend + ?Sized>(
    prog: &SosProgram,
    policy: GramPolicy,
    backend: &B,
) -> Result<(Compiled, SdpSolution)> {
    let compiled = compile(prog, policy)?;
    let sol = backend.solve(&compiled.problem)?;
    Ok((compiled, sol))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericSosReport {
    pub samples: usize,
    pub min_value: f64,
    pub max_value: f64,
    pub witness: Vec<f64>,
    pub passed: bool,
}

/// Samples `p` uniformly on `[-bx, bx]^n`; passes iff `min >= -1e-6 (1 + |max|)`.
pub fn check_sos_numeric<R: Rng + ?Sized>(p: &Polynomial, n_samples: usize, bx: f64, rng: &mut R) -> NumericSosReport {
    let n = p.nvars();
    let mut min_value = f64::INFINITY;
    let mut max_value = f64::NEG_INFINITY;
    let mut witness = vec![0.0; n];
    let mut pt = vec![0.0; n];
    for _ in 0..n_samples {
        for v in pt.iter_mut() {
            *v = rng.gen_range(-bx..=bx);
        }
        let v = p.eval_unchecked(&pt);
        if v < min_value {
            min_value = v;
            witness.copy_from_slice(&pt);
        }
        max_value = max_value.max(v);
    }
    if n_samples == 0 {
        min_value = 0.0;
        max_value = 0.0;
    }
    let passed = min_value >= -1e-6 * (1.0 + max_value.abs());
    NumericSosReport { samples: n_samples, min_value, max_value, witness, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::VarSet;
    use crate::sdp::{InteriorPoint, SdpOptions, SdpStatus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ip() -> InteriorPoint {
        InteriorPoint::new(SdpOptions::default())
    }

    fn px(s: &str) -> Polynomial {
        Polynomial::parse(s, &VarSet::new(&["x"]).unwrap()).unwrap()
    }

    fn certify(p: &Polynomial, policy: GramPolicy) -> Result<(SosSolution, SdpStatus)> {
        let mut prog = SosProgram::new(p.nvars());
        prog.add_sos("p", AffPoly::from_poly(p))?;
        let (c, sol) = solve_program(&prog, policy, &ip())?;
        let st = sol.status;
        Ok((extract_certificate(&prog, &c, &sol)?, st))
    }

    #[test]
    fn square_of_quadratic_is_certified() {
        for policy in [GramPolicy::Trim, GramPolicy::Full] {
            let (s, st) = certify(&px("x^4 - 2*x^2 + 1"), policy).unwrap();
            assert!(st.is_success());
            let cert = &s.certificates[0];
            assert_eq!(cert.bases[0].len(), 3);
            assert!(cert.residual <= 1e-8, "{}", cert.residual);
            assert!(cert.min_eig >= -1e-8);
        }
    }

    #[test]
    fn negative_square_is_infeasible() {
        match certify(&px("-x^2"), GramPolicy::Trim) {
            Ok((_, st)) => panic!("certified with status {st:?}"),
            Err(Error::Infeasible(_)) | Err(Error::Certificate(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
        let mut prog = SosProgram::new(1);
        prog.add_sos("p", AffPoly::from_poly(&px("-x^2"))).unwrap();
        let c = compile(&prog, GramPolicy::Full).unwrap();
        let sol = ip().solve(&c.problem).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn zero_polynomial_has_empty_gram() {
        let (s, _) = certify(&Polynomial::zero(2), GramPolicy::Trim).unwrap();
        assert_eq!(s.certificates[0].gram.len(), 0);
        assert_eq!(s.max_residual, 0.0);
    }

    #[test]
    fn odd_degree_rejected() {
        let mut prog = SosProgram::new(1);
        prog.add_sos("cubic", AffPoly::from_poly(&px("x^3 + 1"))).unwrap();
        assert!(matches!(compile(&prog, GramPolicy::Trim), Err(Error::OddDegree { degree: 3, .. })));
    }

    #[test]
    fn rank_one_matrix_is_sos() {
        let x = |s: &str| px(s);
        let m = AffMatrix::from_numeric(&[vec![x("1"), x("x")], vec![x("x"), x("x^2")]]).unwrap();
        let mut prog = SosProgram::new(1);
        prog.add_matrix_sos("M", m).unwrap();
        let (c, sol) = solve_program(&prog, GramPolicy::Trim, &ip()).unwrap();
        assert!(sol.status.is_success());
        let s = extract_certificate(&prog, &c, &sol).unwrap();
        assert!(s.max_residual <= 1e-8);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let m = AffMatrix::from_numeric(&[vec![px("1"), px("x")], vec![px("2*x"), px("x^2")]]).unwrap();
        let mut prog = SosProgram::new(1);
        assert!(prog.add_matrix_sos("M", m).is_err());
    }

    #[test]
    fn full_basis_sizes_are_binomial() {
        // v variables, half-degree d: C(v + d, d)
        for (v, d, expect) in [(2usize, 2u32, 6usize), (3, 2, 10), (2, 3, 10), (4, 1, 5)] {
            let vars: Vec<usize> = (0..v).collect();
            let mut p = Polynomial::constant(v, 1.0);
            for i in &vars {
                p = &p + &Polynomial::var(v, *i).pow(2 * d);
            }
            let mut prog = SosProgram::new(v);
            prog.add_sos("p", AffPoly::from_poly(&p)).unwrap();
            let c = compile(&prog, GramPolicy::Full).unwrap();
            assert_eq!(c.grams[0].size(), expect);
        }
    }

    #[test]
    fn non_affine_product_rejected() {
        let mut prog = SosProgram::new(1);
        let a = prog.add_template("a", vec![Monomial::var(1, 0)], Role::Other).to_aff();
        let b = prog.add_template("b", vec![Monomial::var(1, 0)], Role::Other).to_aff();
        assert!(matches!(a.mul(&b), Err(Error::NonAffine(_))));
        assert!(a.mul(&AffPoly::from_poly(&px("x + 2"))).is_ok());
    }

    #[test]
    fn lower_bound_by_optimization() {
        // maximize g s.t. x^4 - 2x^2 + 3 - g ∈ SOS; optimum g = 2
        let mut prog = SosProgram::new(1);
        let g = prog.add_var("g", Role::Other);
        let p = AffPoly::from_poly(&px("x^4 - 2*x^2 + 3")).sub(&AffPoly::constant(1, AffExpr::var(g))).unwrap();
        prog.add_sos("p", p).unwrap();
        prog.minimize(AffExpr::term(g, -1.0));
        let (c, sol) = solve_program(&prog, GramPolicy::Trim, &ip()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let s = extract_certificate(&prog, &c, &sol).unwrap();
        assert!((s.value(g) - 2.0).abs() < 1e-6, "{}", s.value(g));
    }

    #[test]
    fn elimination_collapses_unreachable_terms() {
        // p = a*x^2 + b*x^4*y^0 ... with y-only diagonal: [[1, c*x^3], [c*x^3, 1]] forces c = 0
        let mut prog = SosProgram::new(1);
        let c = prog.add_var("c", Role::Other);
        let mut m = AffMatrix::zeros(2, 1);
        m.set(0, 0, AffPoly::from_poly(&px("1")));
        m.set(1, 1, AffPoly::from_poly(&px("1")));
        m.set_sym(0, 1, AffPoly::term(Monomial::new(vec![3]), AffExpr::var(c)));
        prog.add_matrix_sos("M", m).unwrap();
        prog.add_ge(AffExpr::var(c));
        let compiled = compile(&prog, GramPolicy::Trim).unwrap();
        assert_eq!(compiled.reduced_dim(), 0);
        let sol = ip().solve(&compiled.problem).unwrap();
        let s = extract_certificate(&prog, &compiled, &sol).unwrap();
        assert!(s.value(c).abs() < 1e-12);

        prog.add_ge(AffExpr { constant: -1.0, terms: [(c, 1.0)].into_iter().collect() });
        assert!(matches!(compile(&prog, GramPolicy::Trim), Err(Error::Infeasible(_))));
    }

    #[test]
    fn numeric_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(check_sos_numeric(&px("(x^2 - 1)^2"), 10_000, 2.0, &mut rng).passed);
        let r = check_sos_numeric(&px("x^3"), 1000, 1.0, &mut rng);
        assert!(!r.passed && r.witness[0] < 0.0);
    }
}
