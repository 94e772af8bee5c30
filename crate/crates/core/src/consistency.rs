//! Set-membership description of all dynamics `ẋ = A Z(x) + B W(x) u` consistent
//! with noisy samples, and its matrix-ellipsoid outer approximation.
//!
//! With `ζ = [A B]'` and regressor `φ = [Z(x); W(x)u]`, sample `i` admits every
//! `ζ` for which `C_i + B_i'ζ + ζ'B_i + ζ'A_iζ ⪯ 0`. The ellipsoid
//! `{ζ : (ζ - ζ̄)' Ā (ζ - ζ̄) ⪯ I}` containing the intersection is found by an
//! S-procedure LMI with a log-det objective, handled by repeated linearization.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{max_eig, min_eig, rank, sym_fn, sym_inv_sqrt, symmetrize};
use crate::poly::{PolyMatrix, Polynomial, VarSet};
use crate::sdp::{LinearForm, SdpBackend, SdpProblem};

/// Eigenvalue floor on `Ā` before inversion.
pub const A_BAR_FLOOR: f64 = 1e-10;
/// Relative singular-value threshold for the rank test.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub t: f64,
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vars: VarSet,
    pub delta: f64,
    /// `Z(x)`, N entries, no constant terms.
    pub z_basis: Vec<Polynomial>,
    /// `W(x)`, M×m.
    pub w_basis: PolyMatrix,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        vars: VarSet,
        delta: f64,
        z_basis: Vec<Polynomial>,
        w_basis: PolyMatrix,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let ds = Self { vars, delta, z_basis, w_basis, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!("noise bound must be positive, got {}", self.delta)));
        }
        for (i, z) in self.z_basis.iter().enumerate() {
            if z.nvars() != n {
                return Err(Error::VariableMismatch { left: n, right: z.nvars() });
            }
            if z.constant_term() != 0.0 {
                return Err(Error::InvalidConfig(alloc::format!("Z entry {i} has a constant term (Z(0) must be 0)")));
            }
        }
        if self.w_basis.nvars() != n && self.w_basis.rows() * self.w_basis.cols() > 0 {
            return Err(Error::VariableMismatch { left: n, right: self.w_basis.nvars() });
        }
        for s in &self.samples {
            if s.x.len() != n || s.xdot.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: s.x.len().max(s.xdot.len()) });
            }
            if s.u.len() != self.m() {
                return Err(Error::DimensionMismatch { expected: self.m(), found: s.u.len() });
            }
        }
        Ok(())
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.vars.len()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.w_basis.cols()
    }

    /// `N + M`.
    pub fn p(&self) -> usize {
        self.z_basis.len() + self.w_basis.rows()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `φ = [Z(x); W(x)u]`.
    pub fn regressor(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        regressor(&self.z_basis, &self.w_basis, x, u)
    }
}

pub fn regressor(z: &[Polynomial], w: &PolyMatrix, x: &[f64], u: &[f64]) -> DVector<f64> {
    let nz = z.len();
    let mut out = DVector::zeros(nz + w.rows());
    for (i, p) in z.iter().enumerate() {
        out[i] = p.eval_unchecked(x);
    }
    for r in 0..w.rows() {
        out[nz + r] = (0..w.cols()).map(|c| w.get(r, c).eval_unchecked(x) * u[c]).sum();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regressors {
    pub z0: DMatrix<f64>,
    pub w0: DMatrix<f64>,
    pub rank: usize,
    pub full_row_rank: bool,
}

pub fn build_regressors(ds: &Dataset) -> Regressors {
    let t = ds.len();
    let nz = ds.z_basis.len();
    let nw = ds.w_basis.rows();
    let mut stacked = DMatrix::zeros(nz + nw, t);
    for (i, s) in ds.samples.iter().enumerate() {
        stacked.set_column(i, &ds.regressor(&s.x, &s.u));
    }
    let r = if t == 0 || stacked.iter().all(|v| *v == 0.0) { 0 } else { rank(&stacked, RANK_TOL) };
    Regressors {
        z0: stacked.rows(0, nz).into_owned(),
        w0: stacked.rows(nz, nw).into_owned(),
        rank: r,
        full_row_rank: r == nz + nw,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrices {
    pub n: usize,
    pub p: usize,
    pub delta: f64,
    /// `ẋẋ' - δI`, n×n.
    pub c: Vec<DMatrix<f64>>,
    /// `-φẋ'`, p×n.
    pub b: Vec<DMatrix<f64>>,
    /// `φφ'`, p×p.
    pub a: Vec<DMatrix<f64>>,
}

impl DataMatrices {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

pub fn build_data_matrices(ds: &Dataset) -> Result<DataMatrices> {
    ds.validate()?;
    let n = ds.n();
    let p = ds.p();
    let mut dm = DataMatrices { n, p, delta: ds.delta, c: Vec::new(), b: Vec::new(), a: Vec::new() };
    for s in &ds.samples {
        let phi = ds.regressor(&s.x, &s.u);
        let xd = DVector::from_column_slice(&s.xdot);
        dm.c.push(&xd * xd.transpose() - DMatrix::identity(n, n) * ds.delta);
        dm.b.push(-(&phi * xd.transpose()));
        dm.a.push(&phi * phi.transpose());
    }
    Ok(dm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyEllipsoid {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    /// `-Ā⁻¹B̄`, p×n.
    pub zeta_bar: DMatrix<f64>,
    /// Identity, n×n.
    pub q_bar: DMatrix<f64>,
    pub a_bar_inv_sqrt: DMatrix<f64>,
}

impl ConsistencyEllipsoid {
    pub fn n(&self) -> usize {
        self.b_bar.ncols()
    }

    pub fn p(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn log_det(&self) -> f64 {
        log_det(&self.a_bar)
    }

    /// `[A B] = (ζ̄ + Ā^{-1/2} Υ Q̄^{1/2})'` for `‖Υ‖ ≤ 1`.
    pub fn member(&self, upsilon: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.zeta_bar + &self.a_bar_inv_sqrt * upsilon).transpose()
    }

    /// Center `[A B] = ζ̄'`.
    pub fn center(&self) -> DMatrix<f64> {
        self.zeta_bar.transpose()
    }
}

pub fn log_det(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().map(|v| v.ln()).sum()
}

pub fn ellipsoid_params(a_bar: &DMatrix<f64>, b_bar: &DMatrix<f64>) -> Result<ConsistencyEllipsoid> {
    let p = a_bar.nrows();
    if a_bar.ncols() != p || b_bar.nrows() != p {
        return Err(Error::DimensionMismatch { expected: p, found: b_bar.nrows() });
    }
    let a_bar = symmetrize(a_bar);
    let a_bar_inv_sqrt = sym_inv_sqrt(&a_bar, A_BAR_FLOOR)?;
    let a_inv = &a_bar_inv_sqrt * &a_bar_inv_sqrt;
    let zeta_bar = -(&a_inv * b_bar);
    let n = b_bar.ncols();
    Ok(ConsistencyEllipsoid { a_bar, b_bar: b_bar.clone(), zeta_bar, q_bar: DMatrix::identity(n, n), a_bar_inv_sqrt })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Membership {
    pub residual: f64,
    pub pass: bool,
}

/// Max eigenvalue of `B̄'Ā⁻¹B̄ + B̄'ζ + ζ'B̄ + ζ'Āζ - I` with `ζ = AB'`.
///
/// Evaluated in the equivalent centered form `(ζ - ζ̄)'Ā(ζ - ζ̄) - I`.
pub fn membership(ab: &DMatrix<f64>, ell: &ConsistencyEllipsoid, tol: f64) -> Result<Membership> {
    if ab.nrows() != ell.n() || ab.ncols() != ell.p() {
        return Err(Error::DimensionMismatch { expected: ell.p(), found: ab.ncols() });
    }
    let dz = ab.transpose() - &ell.zeta_bar;
    let q = dz.transpose() * &ell.a_bar * dz - &ell.q_bar;
    let residual = max_eig(&q);
    Ok(Membership { residual, pass: residual <= tol })
}

/// `|ẋ - AB φ|² - δ`; passes when `|d|² ≤ δ (1 + 1e-9)`.
pub fn membership_instantaneous(ab: &DMatrix<f64>, ds: &Dataset, sample: &Sample) -> Result<Membership> {
    let phi = ds.regressor(&sample.x, &sample.u);
    if ab.ncols() != phi.len() || ab.nrows() != sample.xdot.len() {
        return Err(Error::DimensionMismatch { expected: phi.len(), found: ab.ncols() });
    }
    let d = DVector::from_column_slice(&sample.xdot) - ab * phi;
    let d2 = d.norm_squared();
    Ok(Membership { residual: d2 - ds.delta, pass: d2 <= ds.delta * (1.0 + 1e-9) })
}

/// The block matrix of the overapproximation LMI at `(Ā, B̄, τ)`; feasible iff `⪯ 0`.
pub fn overapp_lmi(dm: &DataMatrices, a_bar: &DMatrix<f64>, b_bar: &DMatrix<f64>, tau: &[f64]) -> DMatrix<f64> {
    let (n, p) = (dm.n, dm.p);
    let mut c = -DMatrix::identity(n, n);
    let mut b = b_bar.clone();
    let mut a = a_bar.clone();
    for (i, &t) in tau.iter().enumerate() {
        c -= &dm.c[i] * t;
        b -= &dm.b[i] * t;
        a -= &dm.a[i] * t;
    }
    let mut l = DMatrix::zeros(n + 2 * p, n + 2 * p);
    l.view_mut((0, 0), (n, n)).copy_from(&c);
    l.view_mut((n, 0), (p, n)).copy_from(&b);
    l.view_mut((0, n), (n, p)).copy_from(&b.transpose());
    l.view_mut((n, n), (p, p)).copy_from(&a);
    l.view_mut((n + p, 0), (p, n)).copy_from(b_bar);
    l.view_mut((0, n + p), (n, p)).copy_from(&b_bar.transpose());
    l.view_mut((n + p, n + p), (p, p)).copy_from(&(-a_bar));
    l
}

/// Affine change `ζ = ζ_c + D ξ` with data divided by `δ`, under which the
/// program is well scaled: `ζ_c` is the least-squares fit and `D = √δ (Σ A_i / T)^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub zeta_c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_inv: DMatrix<f64>,
    pub delta: f64,
}

impl Normalization {
    pub fn new(dm: &DataMatrices) -> Result<Self> {
        if dm.is_empty() {
            return Err(Error::Infeasible("empty data set".into()));
        }
        let (n, p) = (dm.n, dm.p);
        let mut g = DMatrix::zeros(p, p);
        let mut h = DMatrix::zeros(p, n);
        for i in 0..dm.len() {
            g += &dm.a[i];
            h -= &dm.b[i];
        }
        let e = SymmetricEigen::new(symmetrize(&g));
        let hi = e.eigenvalues.max();
        let lo = e.eigenvalues.min();
        if !(hi > 0.0) || lo <= RANK_TOL * hi {
            return Err(Error::Infeasible(alloc::format!(
                "regressor matrix is not full row rank (eigenvalues of Σφφ' in [{lo:.3e}, {hi:.3e}])"
            )));
        }
        let zeta_c = g.clone().cholesky().ok_or_else(|| Error::NumericalFailure("Σφφ' factorization".into()))?.solve(&h);
        let t = dm.len() as f64;
        let g_avg = g / t;
        let sd = dm.delta.sqrt();
        let d = sym_fn(&g_avg, |v| sd / v.sqrt());
        let d_inv = sym_fn(&g_avg, |v| v.sqrt() / sd);
        Ok(Self { zeta_c, d, d_inv, delta: dm.delta })
    }

    /// Data matrices in `ξ` coordinates.
    pub fn transform(&self, dm: &DataMatrices) -> DataMatrices {
        let s = 1.0 / self.delta;
        let zc = &self.zeta_c;
        let mut out = DataMatrices { n: dm.n, p: dm.p, delta: dm.delta, c: vec![], b: vec![], a: vec![] };
        for i in 0..dm.len() {
            let (c, b, a) = (&dm.c[i], &dm.b[i], &dm.a[i]);
            let bz = b.transpose() * zc;
            let cn = c + &bz + bz.transpose() + zc.transpose() * a * zc;
            out.c.push(symmetrize(&(cn * s)));
            out.b.push(&self.d * (b + a * zc) * s);
            out.a.push(symmetrize(&(&self.d * a * &self.d * s)));
        }
        out
    }

    /// Back to `ζ` coordinates: `(Ā, B̄, τ)`.
    pub fn restore(&self, a_n: &DMatrix<f64>, b_n: &DMatrix<f64>, tau_n: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
        let a_n = symmetrize(a_n);
        let chol = a_n
            .clone()
            .cholesky()
            .ok_or(Error::DegenerateEllipsoid { min_eig: min_eig(&a_n) })?;
        let xi_bar = -chol.solve(b_n);
        let a_bar = symmetrize(&(&self.d_inv * &a_n * &self.d_inv));
        let zeta_bar = &self.zeta_c + &self.d * xi_bar;
        let b_bar = -(&a_bar * zeta_bar);
        Ok((a_bar, b_bar, tau_n.iter().map(|t| t / self.delta).collect()))
    }

    /// `log det Ā = log det Ā_ξ + log det D⁻²`.
    pub fn log_det_offset(&self) -> f64 {
        2.0 * log_det(&self.d_inv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverapproxOptions {
    pub iters: usize,
}

impl Default for OverapproxOptions {
    fn default() -> Self {
        Self { iters: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverapproxIterate {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub tau: Vec<f64>,
    pub log_det: f64,
    /// Convex-combination weight of the new linearized solution.
    pub step: f64,
    /// Max eigenvalue of the normalized LMI.
    pub lmi_max_eig: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overapprox {
    pub ellipsoid: ConsistencyEllipsoid,
    pub tau: Vec<f64>,
    pub iterates: Vec<OverapproxIterate>,
    /// Max eigenvalue of the LMI in normalized coordinates at the returned point.
    pub lmi_max_eig: f64,
}

/// Variables in normalized coordinates.
#[derive(Clone, Debug)]
struct Point {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    tau: Vec<f64>,
}

impl Point {
    fn lerp(&self, other: &Point, g: f64) -> Point {
        Point {
            a: &self.a * (1.0 - g) + &other.a * g,
            b: &self.b * (1.0 - g) + &other.b * g,
            tau: self.tau.iter().zip(&other.tau).map(|(x, y)| x * (1.0 - g) + y * g).collect(),
        }
    }
}

/// SDP: maximize `tr(P Ā)` subject to the LMI `L(Ā, B̄, τ) ⪯ 0`, posed as
/// `S = -L ⪰ 0` (block 0) with `τ_i ≥ 0` (1×1 blocks). The last two block rows
/// of `S` equal `-B̄'` and `Ā`, so both are read off `S` instead of being free.
fn linearized_problem(dm: &DataMatrices, pmat: &DMatrix<f64>) -> SdpProblem {
    let (n, p) = (dm.n, dm.p);
    let dim = n + 2 * p;
    let mut prob = SdpProblem::new();
    let lmi = prob.add_block(dim);
    let tau_blocks: Vec<usize> = (0..dm.len()).map(|_| prob.add_block(1)).collect();
    // Ā_ij = S[n+p+i, n+p+j], B̄_ij = -S[j, n+p+i]
    let a_at = n + p;
    for r in 0..n + p {
        for c in r..n + p {
            let mut lhs = LinearForm::new();
            lhs.add_psd(lmi, r, c, 1.0);
            let mut rhs = 0.0;
            match (r < n, c < n) {
                (true, true) => {
                    if r == c {
                        rhs = 1.0;
                    }
                    for (t, ci) in dm.c.iter().enumerate() {
                        if ci[(r, c)] != 0.0 {
                            lhs.add_psd(tau_blocks[t], 0, 0, -ci[(r, c)]);
                        }
                    }
                }
                (true, false) => {
                    let ic = c - n;
                    lhs.add_psd(lmi, r, a_at + ic, -1.0);
                    for (t, bi) in dm.b.iter().enumerate() {
                        if bi[(ic, r)] != 0.0 {
                            lhs.add_psd(tau_blocks[t], 0, 0, -bi[(ic, r)]);
                        }
                    }
                }
                _ => {
                    let (ir, ic) = (r - n, c - n);
                    lhs.add_psd(lmi, a_at + ir, a_at + ic, 1.0);
                    for (t, ai) in dm.a.iter().enumerate() {
                        if ai[(ir, ic)] != 0.0 {
                            lhs.add_psd(tau_blocks[t], 0, 0, -ai[(ir, ic)]);
                        }
                    }
                }
            }
            prob.add_equality(lhs, rhs);
        }
    }
    // the (1, 2) block of L is zero
    for r in n..n + p {
        for c in a_at..dim {
            let mut lhs = LinearForm::new();
            lhs.add_psd(lmi, r, c, 1.0);
            prob.add_equality(lhs, 0.0);
        }
    }
    for i in 0..p {
        for j in i..p {
            let w = if i == j { pmat[(i, i)] } else { 2.0 * pmat[(i, j)] };
            if w != 0.0 {
                prob.objective.add_psd(lmi, a_at + i, a_at + j, -w);
            }
        }
    }
    prob
}

/// Starting point: maximize `t` with `Ā ⪰ t I` under the same LMI.
fn interior_problem(dm: &DataMatrices) -> SdpProblem {
    let p = dm.p;
    let a_at = dm.n + p;
    let mut prob = linearized_problem(dm, &DMatrix::zeros(p, p));
    let k = prob.add_block(p);
    let t = prob.add_free(1);
    for i in 0..p {
        for j in i..p {
            let mut lhs = LinearForm::new();
            lhs.add_psd(k, i, j, 1.0);
            lhs.add_psd(0, a_at + i, a_at + j, -1.0);
            if i == j {
                lhs.add_free(t, 1.0);
            }
            prob.add_equality(lhs, 0.0);
        }
    }
    prob.objective = LinearForm::new();
    prob.objective.add_free(t, -1.0);
    prob
}

fn extract_point(dm: &DataMatrices, sol: &crate::sdp::SdpSolution) -> Point {
    let (n, p) = (dm.n, dm.p);
    let s = symmetrize(&sol.block_values[0]);
    let a = s.view((n + p, n + p), (p, p)).into_owned();
    let b = DMatrix::from_fn(p, n, |i, j| -s[(j, n + p + i)]);
    let tau = (0..dm.len()).map(|t| sol.block_values[1 + t][(0, 0)].max(0.0)).collect();
    Point { a, b, tau }
}

/// Largest `g ∈ [0, 1]` step maximizing the concave `log det((1-g)A₀ + gA₁)`.
fn log_det_line_search(a0: &DMatrix<f64>, a1: &DMatrix<f64>) -> f64 {
    let da = a1 - a0;
    let slope = |g: f64| -> f64 {
        let m = a0 * (1.0 - g) + a1 * g;
        match m.cholesky() {
            Some(ch) => (ch.inverse() * &da).trace(),
            None => f64::NEG_INFINITY,
        }
    };
    if slope(1.0) >= 0.0 {
        return 1.0;
    }
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Fits the ellipsoid by `opts.iters` linearizations of the log-det objective,
/// each followed by an exact line search so that `log det Ā` never decreases.
pub fn solve_overapprox<B: SdpBackend + ?Sized>(dm: &DataMatrices, opts: OverapproxOptions, backend: &B) -> Result<Overapprox> {
    if opts.iters == 0 {
        return Err(Error::InvalidConfig("at least one linearization iteration is required".into()));
    }
    let norm = Normalization::new(dm)?;
    let ndm = norm.transform(dm);
    let p = dm.p;
    let solve = |prob: &SdpProblem| -> Result<Point> {
        let sol = backend.solve(prob)?;
        match sol.status {
            s if s.is_success() => Ok(extract_point(&ndm, &sol)),
            crate::sdp::SdpStatus::Infeasible => {
                Err(Error::Infeasible("ellipsoid program is infeasible (insufficient data richness)".into()))
            }
            s => Err(Error::NumericalFailure(alloc::format!("ellipsoid program: solver status {s:?}"))),
        }
    };
    let mut current = solve(&interior_problem(&ndm))?;
    if min_eig(&current.a) <= 0.0 {
        return Err(Error::DegenerateEllipsoid { min_eig: min_eig(&current.a) });
    }
    let mut iterates = Vec::with_capacity(opts.iters);
    for it in 0..opts.iters {
        let pmat = if it == 0 {
            DMatrix::identity(p, p)
        } else {
            current
                .a
                .clone()
                .cholesky()
                .ok_or(Error::DegenerateEllipsoid { min_eig: min_eig(&current.a) })?
                .inverse()
        };
        let cand = solve(&linearized_problem(&ndm, &pmat))?;
        let g = log_det_line_search(&current.a, &cand.a);
        let (next, step) = (current.lerp(&cand, g), g);
        if min_eig(&next.a) <= 0.0 {
            return Err(Error::DegenerateEllipsoid { min_eig: min_eig(&next.a) });
        }
        let lmi_max_eig = normalized_lmi_max_eig(&ndm, &next);
        let (a_bar, b_bar, tau) = norm.restore(&next.a, &next.b, &next.tau)?;
        iterates.push(OverapproxIterate {
            log_det: log_det(&next.a) + norm.log_det_offset(),
            a_bar,
            b_bar,
            tau,
            step,
            lmi_max_eig,
        });
        current = next;
    }
    let last = iterates.last().unwrap();
    let ellipsoid = ellipsoid_params(&last.a_bar, &last.b_bar)?;
    Ok(Overapprox { ellipsoid, tau: last.tau.clone(), lmi_max_eig: last.lmi_max_eig, iterates })
}

fn normalized_lmi_max_eig(ndm: &DataMatrices, pt: &Point) -> f64 {
    max_eig(&overapp_lmi(ndm, &pt.a, &pt.b, &pt.tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{InteriorPoint, SdpOptions};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_dataset(samples: Vec<Sample>, delta: f64) -> Dataset {
        // ẋ = a x + b u with Z = (x), W = 1
        let vars = VarSet::states(1);
        let z = vec![Polynomial::var(1, 0)];
        let w = PolyMatrix::from_rows(vec![vec![Polynomial::constant(1, 1.0)]]).unwrap();
        Dataset::new(vars, delta, z, w, samples).unwrap()
    }

    #[test]
    fn data_matrix_formulas() {
        let vars = VarSet::states(2);
        let z = vec![Polynomial::var(2, 0), Polynomial::var(2, 1)];
        let w = PolyMatrix::from_rows(vec![vec![Polynomial::constant(2, 1.0)]]).unwrap();
        let s = Sample { t: 0.0, u: vec![0.0], x: vec![0.0, 0.0], xdot: vec![1.0, 0.0] };
        let ds = Dataset::new(vars, 1e-6, z, w, vec![s]).unwrap();
        let dm = build_data_matrices(&ds).unwrap();
        assert_eq!(dm.c[0], DMatrix::from_row_slice(2, 2, &[1.0 - 1e-6, 0.0, 0.0, -1e-6]));
        assert!(dm.a[0].iter().all(|v| *v == 0.0));
        assert!(dm.b[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_in_z_rejected() {
        let r = Dataset::new(
            VarSet::states(1),
            1e-6,
            vec![Polynomial::parse("x1 + 1", &VarSet::states(1)).unwrap()],
            PolyMatrix::zeros(0, 0, 1),
            vec![],
        );
        assert!(r.is_err());
    }

    #[test]
    fn rank_of_degenerate_data() {
        let s = Sample { t: 0.0, u: vec![1.0], x: vec![0.5], xdot: vec![0.0] };
        let ds = scalar_dataset(vec![s.clone(); 50], 1e-6);
        let r = build_regressors(&ds);
        assert!(r.rank <= 1 && !r.full_row_rank);
        let ds1 = scalar_dataset(vec![s], 1e-6);
        assert!(!build_regressors(&ds1).full_row_rank);
    }

    #[test]
    fn lmi_layout() {
        let dm = DataMatrices { n: 2, p: 3, delta: 1e-6, c: vec![], b: vec![], a: vec![] };
        let l = overapp_lmi(&dm, &DMatrix::identity(3, 3), &DMatrix::zeros(3, 2), &[]);
        let mut expect = DMatrix::zeros(8, 8);
        for i in 0..2 {
            expect[(i, i)] = -1.0;
        }
        for i in 2..5 {
            expect[(i, i)] = 1.0;
        }
        for i in 5..8 {
            expect[(i, i)] = -1.0;
        }
        assert_eq!(l, expect);
    }

    #[test]
    fn params_of_simple_ellipsoids() {
        let e = ellipsoid_params(&(DMatrix::identity(3, 3) * 4.0), &DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(e.zeta_bar, DMatrix::zeros(3, 2));
        assert_relative_eq!(e.a_bar_inv_sqrt, DMatrix::identity(3, 3) * 0.5, epsilon = 1e-14);
        let z0 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.0, 7.0]);
        let e = ellipsoid_params(&DMatrix::identity(3, 3), &(-&z0)).unwrap();
        assert_relative_eq!(e.zeta_bar, z0, epsilon = 1e-14);
        assert!(ellipsoid_params(&DMatrix::zeros(3, 3), &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn membership_center_boundary_outside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(4, 4);
        let zb = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let e = ellipsoid_params(&a, &(-(&a * &zb))).unwrap();
        assert_relative_eq!(&e.a_bar_inv_sqrt * &e.a_bar * &e.a_bar_inv_sqrt, DMatrix::identity(4, 4), epsilon = 1e-10);
        let c = membership(&e.center(), &e, 1e-8).unwrap();
        assert!(c.pass && (c.residual + 1.0).abs() < 1e-10);
        let mut u = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        u /= crate::linalg::op_norm(&u);
        let b = membership(&e.member(&u), &e, 1e-8).unwrap();
        assert!(b.residual.abs() <= 1e-8, "{}", b.residual);
        assert!(!membership(&e.member(&(u * 2.0)), &e, 1e-8).unwrap().pass);
    }

    #[test]
    fn instantaneous_membership() {
        let s = Sample { t: 0.0, u: vec![1.0], x: vec![2.0], xdot: vec![-2.0 + 1.0] };
        let ds = scalar_dataset(vec![s.clone()], 1e-6);
        let truth = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let m = membership_instantaneous(&truth, &ds, &s).unwrap();
        assert!(m.pass && m.residual == -1e-6);
        assert!(!membership_instantaneous(&DMatrix::zeros(1, 2), &ds, &s).unwrap().pass);
    }

    #[test]
    fn scalar_fit_contains_truth_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (-0.7, 1.3);
        let r = 1e-3;
        let samples: Vec<Sample> = (0..30)
            .map(|i| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let u: f64 = rng.gen_range(-5.0..5.0);
                let d: f64 = rng.gen_range(-r..r);
                Sample { t: i as f64, u: vec![u], x: vec![x], xdot: vec![a * x + b * u + d] }
            })
            .collect();
        let ds = scalar_dataset(samples, r * r);
        let dm = build_data_matrices(&ds).unwrap();
        let ip = InteriorPoint::new(SdpOptions::default());
        let fit = match solve_overapprox(&dm, OverapproxOptions::default(), &ip) { Ok(f) => f, Err(e) => panic!("{e:?}") };
        assert_eq!(fit.iterates.len(), 5);
        for w in fit.iterates.windows(2) {
            assert!(w[1].log_det >= w[0].log_det - 1e-9);
        }
        assert!(fit.lmi_max_eig <= 1e-7, "{}", fit.lmi_max_eig);
        assert!(fit.tau.iter().all(|t| *t >= 0.0));
        let truth = DMatrix::from_row_slice(1, 2, &[a, b]);
        for s in &ds.samples {
            assert!(membership_instantaneous(&truth, &ds, s).unwrap().pass);
        }
        let m = membership(&truth, &fit.ellipsoid, 1e-6).unwrap();
        assert!(m.pass, "{}", m.residual);
        // the ellipsoid is tight: radius of order noise / signal
        let width = crate::linalg::op_norm(&fit.ellipsoid.a_bar_inv_sqrt);
        assert!(width < 1e-2, "{width}");
    }

    #[test]
    fn rank_deficient_data_is_infeasible() {
        let s = Sample { t: 0.0, u: vec![1.0], x: vec![0.5], xdot: vec![0.0] };
        let ds = scalar_dataset(vec![s; 5], 1e-6);
        let dm = build_data_matrices(&ds).unwrap();
        let ip = InteriorPoint::new(SdpOptions::default());
        assert!(matches!(solve_overapprox(&dm, OverapproxOptions::default(), &ip), Err(Error::Infeasible(_))));
    }
}
