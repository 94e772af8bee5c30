//! Standard-form semidefinite programs.
//!
//! ```text
//! minimize    <C, X> + c_f' f
//! subject to  <A_i, X> + a_i' f = b_i      i = 1..m
//!             X = diag(X_1, ..., X_k),  X_j ⪰ 0,   f free
//! ```
//!
//! Linear forms reference block entries by `(block, row, col)` with `row <= col`
//! (entries given with `row > col` are swapped). A coefficient `c` on an
//! off-diagonal entry multiplies `X[row][col]` once, so the equivalent symmetric
//! data matrix holds `c/2` in both mirrored positions. Repeated entries accumulate.

mod ipm;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_eig;

pub use ipm::InteriorPoint;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PsdEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub coeff: f64,
}

/// Linear functional over block entries and free variables.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearForm {
    pub psd: Vec<PsdEntry>,
    pub free: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_psd(&mut self, block: usize, row: usize, col: usize, coeff: f64) -> &mut Self {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        self.psd.push(PsdEntry { block, row, col, coeff });
        self
    }

    pub fn add_free(&mut self, var: usize, coeff: f64) -> &mut Self {
        self.free.push((var, coeff));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty() && self.free.is_empty()
    }

    pub fn eval(&self, blocks: &[DMatrix<f64>], free: &[f64]) -> f64 {
        let mut v = 0.0;
        for e in &self.psd {
            v += e.coeff * blocks[e.block][(e.row, e.col)];
        }
        for &(j, c) in &self.free {
            v += c * free[j];
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Equality {
    pub lhs: LinearForm,
    pub rhs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SdpProblem {
    pub psd_blocks: Vec<usize>,
    pub free_vars: usize,
    /// Minimized.
    pub objective: LinearForm,
    pub equalities: Vec<Equality>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a PSD block and returns its index.
    pub fn add_block(&mut self, dim: usize) -> usize {
        self.psd_blocks.push(dim);
        self.psd_blocks.len() - 1
    }

    /// Adds `count` free variables and returns the index of the first.
    pub fn add_free(&mut self, count: usize) -> usize {
        self.free_vars += count;
        self.free_vars - count
    }

    pub fn add_equality(&mut self, lhs: LinearForm, rhs: f64) {
        self.equalities.push(Equality { lhs, rhs });
    }

    /// Checks every reference against declared blocks and free variables.
    pub fn check(&self) -> Result<()> {
        let check_form = |f: &LinearForm| -> Result<()> {
            for e in &f.psd {
                let dim = *self
                    .psd_blocks
                    .get(e.block)
                    .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown block {}", e.block)))?;
                if e.row > e.col || e.col >= dim {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "entry ({}, {}) outside block {} of size {dim}",
                        e.row, e.col, e.block
                    )));
                }
                if !e.coeff.is_finite() {
                    return Err(Error::InvalidConfig("non-finite coefficient".into()));
                }
            }
            for &(j, c) in &f.free {
                if j >= self.free_vars || !c.is_finite() {
                    return Err(Error::InvalidConfig(alloc::format!("bad free-variable reference {j}")));
                }
            }
            Ok(())
        };
        check_form(&self.objective)?;
        for eq in &self.equalities {
            check_form(&eq.lhs)?;
            if !eq.rhs.is_finite() {
                return Err(Error::InvalidConfig("non-finite right-hand side".into()));
            }
        }
        Ok(())
    }

    /// Symmetric data matrices of a linear form, one per block.
    pub fn dense_blocks(&self, form: &LinearForm) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self.psd_blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for e in &form.psd {
            let m = &mut out[e.block];
            if e.row == e.col {
                m[(e.row, e.row)] += e.coeff;
            } else {
                m[(e.row, e.col)] += 0.5 * e.coeff;
                m[(e.col, e.row)] += 0.5 * e.coeff;
            }
        }
        out
    }

    /// Dual slack `C - Σ y_i A_i` per block and free-variable residual `c_f - A_f' y`.
    pub fn dual_slack(&self, y: &[f64]) -> (Vec<DMatrix<f64>>, Vec<f64>) {
        let mut s = self.dense_blocks(&self.objective);
        let mut rf = vec![0.0; self.free_vars];
        for &(j, c) in &self.objective.free {
            rf[j] += c;
        }
        for (eq, &yi) in self.equalities.iter().zip(y) {
            for e in &eq.lhs.psd {
                let m = &mut s[e.block];
                if e.row == e.col {
                    m[(e.row, e.row)] -= yi * e.coeff;
                } else {
                    m[(e.row, e.col)] -= 0.5 * yi * e.coeff;
                    m[(e.col, e.row)] -= 0.5 * yi * e.coeff;
                }
            }
            for &(j, c) in &eq.lhs.free {
                rf[j] -= yi * c;
            }
        }
        (s, rf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SdpStatus {
    Optimal,
    /// Primal feasible to tolerance, optimality not certified.
    Feasible,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl SdpStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SdpStatus::Optimal | SdpStatus::Feasible)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Residuals {
    /// `||A(X) + A_f f - b|| / (1 + ||b||)`.
    pub primal_eq: f64,
    /// `max_i |A_i(X) + a_i' f - b_i|`.
    pub primal_eq_abs: f64,
    /// Smallest eigenvalue over all primal blocks.
    pub min_eig: f64,
    /// `||c_f - A_f' y|| / (1 + ||c||)`.
    pub dual_eq: f64,
    /// Smallest eigenvalue of the dual slack `C - A*(y)`.
    pub dual_min_eig: f64,
    /// `|p - d| / (1 + |p| + |d|)`.
    pub duality_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub block_values: Vec<DMatrix<f64>>,
    pub free_values: Vec<f64>,
    /// Equality multipliers.
    pub dual: Vec<f64>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SdpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial iterate is `initial_scale * I` for both primal and dual blocks.
    pub initial_scale: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, initial_scale: 1.0 }
    }
}

/// Pluggable conic solver.
pub trait SdpBackend {
    fn solve(&self, problem: &SdpProblem) -> Result<SdpSolution>;
}

/// Solves with the built-in interior-point method.
pub fn solve_sdp(problem: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    InteriorPoint::new(*opts).solve(problem)
}

/// Independent residual recomputation.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub residuals: Residuals,
    pub primal_tol: f64,
    pub eig_tol: f64,
    pub primal_ok: bool,
    pub psd_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.primal_ok && self.psd_ok
    }
}

/// Relative primal tolerance used by [`validate_solution`].
pub const VALID_PRIMAL_TOL: f64 = 1e-7;
/// Eigenvalue floor used by [`validate_solution`].
pub const VALID_EIG_TOL: f64 = 1e-8;

/// Recomputes residuals from the problem data and the solution values alone.
pub fn validate_solution(problem: &SdpProblem, sol: &SdpSolution) -> Result<ValidationReport> {
    let residuals = compute_residuals(problem, &sol.block_values, &sol.free_values, &sol.dual)?;
    Ok(ValidationReport {
        residuals,
        primal_tol: VALID_PRIMAL_TOL,
        eig_tol: VALID_EIG_TOL,
        primal_ok: residuals.primal_eq <= VALID_PRIMAL_TOL,
        psd_ok: residuals.min_eig >= -VALID_EIG_TOL,
    })
}

pub(crate) fn compute_residuals(
    problem: &SdpProblem,
    blocks: &[DMatrix<f64>],
    free: &[f64],
    dual: &[f64],
) -> Result<Residuals> {
    if blocks.len() != problem.psd_blocks.len() {
        return Err(Error::DimensionMismatch { expected: problem.psd_blocks.len(), found: blocks.len() });
    }
    for (b, &d) in blocks.iter().zip(&problem.psd_blocks) {
        if b.nrows() != d || b.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: b.nrows() });
        }
    }
    if free.len() != problem.free_vars {
        return Err(Error::DimensionMismatch { expected: problem.free_vars, found: free.len() });
    }
    let m = problem.equalities.len();
    let mut r = DVector::zeros(m);
    let mut bvec = DVector::zeros(m);
    for (i, eq) in problem.equalities.iter().enumerate() {
        r[i] = eq.lhs.eval(blocks, free) - eq.rhs;
        bvec[i] = eq.rhs;
    }
    let primal_eq_abs = r.amax();
    let primal_eq = r.norm() / (1.0 + bvec.norm());
    let min_eig_all = blocks.iter().map(min_eig).fold(f64::INFINITY, f64::min);
    let min_eig_all = if min_eig_all.is_finite() { min_eig_all } else { 0.0 };

    let pobj = problem.objective.eval(blocks, free);
    let (dual_eq, dual_min_eig, dobj) = if dual.len() == m {
        let (s, rf) = problem.dual_slack(dual);
        let cnorm = problem
            .dense_blocks(&problem.objective)
            .iter()
            .map(|c| c.norm_squared())
            .sum::<f64>()
            + problem.objective.free.iter().map(|(_, c)| c * c).sum::<f64>();
        let deq = DVector::from_vec(rf).norm() / (1.0 + num_traits::Float::sqrt(cnorm));
        let dmin = s.iter().map(min_eig).fold(f64::INFINITY, f64::min);
        let dobj: f64 = problem.equalities.iter().zip(dual).map(|(e, y)| e.rhs * y).sum();
        (deq, if dmin.is_finite() { dmin } else { 0.0 }, dobj)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let duality_gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
    Ok(Residuals { primal_eq, primal_eq_abs, min_eig: min_eig_all, dual_eq, dual_min_eig, duality_gap })
}

#[cfg(test)]
mod tests;

/// Random instances built around a known strictly feasible primal-dual pair.
pub mod gen {
    use super::*;
    use rand::Rng;

    fn random_sym<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        crate::linalg::symmetrize(&m)
    }

    fn random_pd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &q * q.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
    }

    /// Dense equalities `<A_i, X> + a_i' f = b_i` with `b` taken at an interior `X0 ≻ 0`
    /// and `C = S0 + Σ y0_i A_i` for an interior dual slack `S0 ≻ 0`.
    pub fn random_strictly_feasible<R: Rng + ?Sized>(
        rng: &mut R,
        blocks: &[usize],
        m: usize,
        nfree: usize,
    ) -> SdpProblem {
        let mut p = SdpProblem::new();
        for &d in blocks {
            p.add_block(d);
        }
        p.add_free(nfree);
        let x0: Vec<DMatrix<f64>> = blocks.iter().map(|&d| random_pd(rng, d)).collect();
        let s0: Vec<DMatrix<f64>> = blocks.iter().map(|&d| random_pd(rng, d)).collect();
        let f0: Vec<f64> = (0..nfree).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c: Vec<DMatrix<f64>> = s0;
        let mut cf = vec![0.0; nfree];
        for &yi in &y0 {
            let mut lhs = LinearForm::new();
            let mut rhs = 0.0;
            for (bi, &d) in blocks.iter().enumerate() {
                let a = random_sym(rng, d);
                for r in 0..d {
                    for col in r..d {
                        let coeff = if r == col { a[(r, r)] } else { 2.0 * a[(r, col)] };
                        lhs.add_psd(bi, r, col, coeff);
                    }
                }
                rhs += a.dot(&x0[bi]);
                c[bi] += &a * yi;
            }
            for (j, fj) in f0.iter().enumerate() {
                let a = rng.gen_range(-1.0..1.0);
                lhs.add_free(j, a);
                rhs += a * fj;
                cf[j] += a * yi;
            }
            p.add_equality(lhs, rhs);
        }
        for (bi, cb) in c.iter().enumerate() {
            let d = blocks[bi];
            for r in 0..d {
                for col in r..d {
                    let coeff = if r == col { cb[(r, r)] } else { 2.0 * cb[(r, col)] };
                    p.objective.add_psd(bi, r, col, coeff);
                }
            }
        }
        for (j, v) in cf.into_iter().enumerate() {
            p.objective.add_free(j, v);
        }
        p
    }
}
