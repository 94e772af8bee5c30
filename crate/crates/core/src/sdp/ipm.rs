//! Homogeneous self-dual primal-dual interior-point method with Nesterov-Todd
//! scaling and Mehrotra predictor-corrector steps. Dense linear algebra.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
#[allow(unused_imports)]
use num_traits::Float;

use super::{compute_residuals, SdpBackend, SdpOptions, SdpProblem, SdpSolution, SdpStatus};
use crate::error::Result;
use crate::linalg::symmetrize;

/// Ratio `tau / kappa` below which infeasibility certificates are examined.
const INFEAS_RATIO: f64 = 1e-6;
const MIN_STEP: f64 = 1e-10;
const FEASIBLE_PRIMAL: f64 = 1e-7;
const STEP_FRACTION: f64 = 0.99;
const REFINE_STEPS: usize = 5;
/// Iterations without a better iterate before giving up.
const STALL_LIMIT: usize = 25;

#[derive(Clone, Copy, Debug, Default)]
pub struct InteriorPoint {
    pub opts: SdpOptions,
}

impl InteriorPoint {
    pub fn new(opts: SdpOptions) -> Self {
        Self { opts }
    }
}

impl SdpBackend for InteriorPoint {
    fn solve(&self, problem: &SdpProblem) -> Result<SdpSolution> {
        problem.check()?;
        let data = Data::new(problem);
        let mut out = Solver::new(&data, self.opts).run();
        // unscale the multipliers back to the caller's row scaling
        for (y, s) in out.dual.iter_mut().zip(&data.row_scale) {
            *y *= s;
        }
        out.residuals = compute_residuals(problem, &out.block_values, &out.free_values, &out.dual)?;
        out.dual_objective = problem.equalities.iter().zip(&out.dual).map(|(e, y)| e.rhs * y).sum();
        out.objective_value = problem.objective.eval(&out.block_values, &out.free_values);
        Ok(out)
    }
}

struct Row {
    /// `(block, entries)` with entries `(p, q, c)`, `p <= q`.
    psd: Vec<(usize, Vec<(usize, usize, f64)>)>,
}

/// Row-normalized copy of the problem.
struct Data {
    dims: Vec<usize>,
    nfree: usize,
    rows: Vec<Row>,
    af: DMatrix<f64>,
    b: DVector<f64>,
    c: Vec<DMatrix<f64>>,
    cf: DVector<f64>,
    by_block: Vec<Vec<usize>>,
    row_scale: Vec<f64>,
}

impl Data {
    fn new(p: &SdpProblem) -> Self {
        let m = p.equalities.len();
        let nb = p.psd_blocks.len();
        let mut rows = Vec::with_capacity(m);
        let mut af = DMatrix::zeros(m, p.free_vars);
        let mut b = DVector::zeros(m);
        let mut by_block = vec![Vec::new(); nb];
        let mut row_scale = vec![1.0; m];
        for (i, eq) in p.equalities.iter().enumerate() {
            let mut grouped: Vec<(usize, Vec<(usize, usize, f64)>)> = Vec::new();
            for e in &eq.lhs.psd {
                match grouped.iter_mut().find(|(blk, _)| *blk == e.block) {
                    Some((_, v)) => v.push((e.row, e.col, e.coeff)),
                    None => grouped.push((e.block, vec![(e.row, e.col, e.coeff)])),
                }
            }
            for (_, v) in grouped.iter_mut() {
                v.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
                let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(v.len());
                for &(r, c, x) in v.iter() {
                    match merged.last_mut() {
                        Some(last) if last.0 == r && last.1 == c => last.2 += x,
                        _ => merged.push((r, c, x)),
                    }
                }
                *v = merged;
            }
            for &(j, c) in &eq.lhs.free {
                af[(i, j)] += c;
            }
            // norm of the row as a vector in the symmetric inner product
            let mut nrm2: f64 = af.row(i).norm_squared();
            for (_, v) in &grouped {
                for &(r, c, x) in v {
                    nrm2 += if r == c { x * x } else { 0.5 * x * x };
                }
            }
            let s = if nrm2 > 0.0 { 1.0 / nrm2.sqrt() } else { 1.0 };
            row_scale[i] = s;
            for (_, v) in grouped.iter_mut() {
                for e in v.iter_mut() {
                    e.2 *= s;
                }
            }
            for j in 0..p.free_vars {
                af[(i, j)] *= s;
            }
            b[i] = eq.rhs * s;
            for (blk, _) in &grouped {
                by_block[*blk].push(i);
            }
            rows.push(Row { psd: grouped });
        }
        let c = p.dense_blocks(&p.objective);
        let mut cf = DVector::zeros(p.free_vars);
        for &(j, v) in &p.objective.free {
            cf[j] += v;
        }
        Self { dims: p.psd_blocks.clone(), nfree: p.free_vars, rows, af, b, c, cf, by_block, row_scale }
    }

    fn m(&self) -> usize {
        self.rows.len()
    }

    /// `A(X)` without the free part.
    fn apply_a(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.m(),
            self.rows.iter().map(|r| {
                r.psd
                    .iter()
                    .map(|(blk, v)| v.iter().map(|&(p, q, c)| c * x[*blk][(p, q)]).sum::<f64>())
                    .sum::<f64>()
            }),
        )
    }

    /// `Σ y_i A_i`.
    fn apply_at(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self.dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (row, &yi) in self.rows.iter().zip(y.iter()) {
            for (blk, v) in &row.psd {
                let m = &mut out[*blk];
                for &(p, q, c) in v {
                    if p == q {
                        m[(p, p)] += yi * c;
                    } else {
                        m[(p, q)] += 0.5 * yi * c;
                        m[(q, p)] += 0.5 * yi * c;
                    }
                }
            }
        }
        out
    }

    /// Schur matrix `M_ij = <A_i, W A_j W>`.
    fn schur(&self, w: &[DMatrix<f64>]) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for (blk, eqs) in self.by_block.iter().enumerate() {
            let wb = &w[blk];
            let d = self.dims[blk];
            let mut y = DMatrix::zeros(d, d);
            for (jj, &j) in eqs.iter().enumerate() {
                let entries = &self.rows[j].psd.iter().find(|(b, _)| *b == blk).unwrap().1;
                y.fill(0.0);
                for &(p, q, c) in entries {
                    let h = 0.5 * c;
                    // y += h * (w_p w_q' + w_q w_p')
                    for col in 0..d {
                        let a = h * wb[(q, col)];
                        let bq = h * wb[(p, col)];
                        for r in 0..d {
                            y[(r, col)] += wb[(r, p)] * a + wb[(r, q)] * bq;
                        }
                    }
                }
                for &i in &eqs[jj..] {
                    let ei = &self.rows[i].psd.iter().find(|(b, _)| *b == blk).unwrap().1;
                    let v: f64 = ei.iter().map(|&(p, q, c)| c * y[(p, q)]).sum();
                    out[(i, j)] += v;
                }
            }
        }
        for j in 0..m {
            for i in (j + 1)..m {
                out[(j, i)] = out[(i, j)];
            }
        }
        out
    }
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn axpy(a: &[DMatrix<f64>], alpha: f64, b: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    a.iter().zip(b).map(|(x, y)| x + y * alpha).collect()
}

fn sandwich(w: &[DMatrix<f64>], x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    w.iter().zip(x).map(|(w, x)| symmetrize(&(w * x * w))).collect()
}

/// Nesterov-Todd scaling of one block: `W = G G'`, `G^{-1} X G^{-T} = G' S G = diag(lambda)`.
struct Scaling {
    g: DMatrix<f64>,
    ginv: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn chol(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    Cholesky::new(symmetrize(m)).map(|c| c.l())
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<Scaling> {
    let l = chol(x)?;
    let r = chol(s)?;
    let svd = (r.transpose() * &l).svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let sig = svd.singular_values;
    if sig.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let isq = DMatrix::from_diagonal(&sig.map(|v| 1.0 / v.sqrt()));
    let g = &l * vt.transpose() * &isq;
    let ginv = &isq * u.transpose() * r.transpose();
    let w = symmetrize(&(&g * g.transpose()));
    Some(Scaling { g, ginv, w, lambda: sig })
}

/// Largest `a <= 1` with `diag(lambda) + a * d ⪰ 0` (Infinity if unconstrained).
fn max_step(lambda: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lambda.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let isq = lambda.map(|v| 1.0 / v.sqrt());
    let mut m = d.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= isq[i] * isq[j];
        }
    }
    let e = symmetrize(&m).symmetric_eigenvalues().min();
    if e < 0.0 {
        -1.0 / e
    } else {
        f64::INFINITY
    }
}

/// Factorization of the reduced Newton system `[[M, A_f], [A_f', 0]]`.
enum Factored {
    Schur { raw: DMatrix<f64>, m: Cholesky<f64, Dyn> },
    /// Full augmented matrix, LU with partial pivoting.
    Augmented { raw: DMatrix<f64>, lu: LU<f64, Dyn, Dyn> },
}

fn factor(mut m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut reg = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(c);
        }
        let next = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        for i in 0..n {
            m[(i, i)] += next - reg;
        }
        reg = next;
    }
    None
}

impl Factored {
    fn new(m: DMatrix<f64>, af: &DMatrix<f64>) -> Option<Self> {
        if af.ncols() == 0 {
            let mc = factor(m.clone())?;
            return Some(Self::Schur { raw: m, m: mc });
        }
        let (nm, nf) = (m.nrows(), af.ncols());
        let mut k = DMatrix::zeros(nm + nf, nm + nf);
        k.view_mut((0, 0), (nm, nm)).copy_from(&m);
        k.view_mut((0, nm), (nm, nf)).copy_from(af);
        k.view_mut((nm, 0), (nf, nm)).copy_from(&af.transpose());
        let mut lu = LU::new(k.clone());
        if !lu.is_invertible() {
            // dependent rows or free columns: factor a regularized copy and let
            // refinement against the exact matrix recover the accuracy
            let mut reg = k.clone();
            let scale = (0..nm).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
            for i in 0..nm {
                reg[(i, i)] += 1e-12 * (m[(i, i)].abs() + 1e-6 * scale);
            }
            for i in nm..nm + nf {
                reg[(i, i)] -= 1e-12 * (1.0 + af.column(i - nm).norm_squared());
            }
            lu = LU::new(reg);
            if !lu.is_invertible() {
                return None;
            }
        }
        Some(Self::Augmented { raw: k, lu })
    }

    /// Solves `[[M, A_f], [A_f', 0]] [u; v] = [h; g]` with iterative refinement.
    fn solve(&self, _af: &DMatrix<f64>, h: &DVector<f64>, g: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nm = h.len();
        let rhs = DVector::from_iterator(nm + g.len(), h.iter().chain(g.iter()).copied());
        let (raw, mut sol) = match self {
            Self::Schur { raw, m } => (raw, m.solve(&rhs)),
            Self::Augmented { raw, lu } => (raw, lu.solve(&rhs).unwrap_or_else(|| DVector::from_element(rhs.len(), f64::NAN))),
        };
        let size = rhs.norm();
        let mut last = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            let r = &rhs - raw * &sol;
            let rn = r.norm();
            if !(rn < 0.5 * last) || rn <= 1e-15 * size {
                break;
            }
            last = rn;
            let d = match self {
                Self::Schur { m, .. } => m.solve(&r),
                Self::Augmented { lu, .. } => match lu.solve(&r) {
                    Some(d) => d,
                    None => break,
                },
            };
            sol += d;
        }
        (sol.rows(0, nm).into_owned(), sol.rows(nm, g.len()).into_owned())
    }
}

#[derive(Clone)]
struct Iterate {
    x: Vec<DMatrix<f64>>,
    f: DVector<f64>,
    y: DVector<f64>,
    s: Vec<DMatrix<f64>>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    x: Vec<DMatrix<f64>>,
    f: DVector<f64>,
    y: DVector<f64>,
    s: Vec<DMatrix<f64>>,
    tau: f64,
    kappa: f64,
}

/// Quantities fixed for one iteration.
struct Frame<'a> {
    data: &'a Data,
    scal: Vec<Scaling>,
    w: Vec<DMatrix<f64>>,
    k: Factored,
    rp: DVector<f64>,
    rd: Vec<DMatrix<f64>>,
    rf: DVector<f64>,
    rg: f64,
    a_wrdw: DVector<f64>,
    c_wrdw: f64,
    a_c: DVector<f64>,
    c_ww: f64,
    vy: DVector<f64>,
    vf: DVector<f64>,
    tau: f64,
    kappa: f64,
}

impl Frame<'_> {
    /// Newton direction for the residual reduction `eta` and complementarity
    /// right-hand side `rc` (scaled space) and `rtau` (for `tau * kappa`).
    fn direction(&self, eta: f64, rc: &[DMatrix<f64>], rtau: f64) -> Direction {
        let d = self.data;
        // R = G (2 xi_ij / (lambda_i + lambda_j)) G'
        let r: Vec<DMatrix<f64>> = self
            .scal
            .iter()
            .zip(rc)
            .map(|(sc, xi)| {
                let n = sc.lambda.len();
                let mut z = xi.clone();
                for i in 0..n {
                    for j in 0..n {
                        z[(i, j)] *= 2.0 / (sc.lambda[i] + sc.lambda[j]);
                    }
                }
                symmetrize(&(&sc.g * z * sc.g.transpose()))
            })
            .collect();
        let hy = &self.rp * eta - d.apply_a(&r) + &self.a_wrdw * eta;
        let hf = &self.rf * eta;
        let (uy, uf) = self.k.solve(&d.af, &hy, &hf);
        let bma = &d.b - &self.a_c;
        let num = eta * self.rg + inner(&d.c, &r) - eta * self.c_wrdw + rtau / self.tau - bma.dot(&uy)
            + d.cf.dot(&uf);
        let den = bma.dot(&self.vy) - d.cf.dot(&self.vf) + self.c_ww + self.kappa / self.tau;
        let dtau = num / den;
        let dy = uy + &self.vy * dtau;
        let df = uf + &self.vf * dtau;
        let aty = d.apply_at(&dy);
        let ds: Vec<DMatrix<f64>> = self
            .rd
            .iter()
            .zip(&aty)
            .zip(&d.c)
            .map(|((rd, aty), c)| rd * eta - aty + c * dtau)
            .collect();
        let wdsw = sandwich(&self.w, &ds);
        let dx: Vec<DMatrix<f64>> = r.iter().zip(&wdsw).map(|(r, w)| r - w).collect();
        let dkappa = (rtau - self.kappa * dtau) / self.tau;
        Direction { x: dx, f: df, y: dy, s: ds, tau: dtau, kappa: dkappa }
    }

    /// Scaled directions `G^{-1} dX G^{-T}` and `G' dS G`.
    fn scaled(&self, dir: &Direction) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let dx = self.scal.iter().zip(&dir.x).map(|(sc, x)| symmetrize(&(&sc.ginv * x * sc.ginv.transpose()))).collect();
        let ds = self.scal.iter().zip(&dir.s).map(|(sc, s)| symmetrize(&(sc.g.transpose() * s * &sc.g))).collect();
        (dx, ds)
    }

    fn step_length(&self, dir: &Direction, dxs: &[DMatrix<f64>], dss: &[DMatrix<f64>]) -> f64 {
        let mut a = f64::INFINITY;
        for ((sc, dx), ds) in self.scal.iter().zip(dxs).zip(dss) {
            a = a.min(max_step(&sc.lambda, dx)).min(max_step(&sc.lambda, ds));
        }
        if dir.tau < 0.0 {
            a = a.min(-self.tau / dir.tau);
        }
        if dir.kappa < 0.0 {
            a = a.min(-self.kappa / dir.kappa);
        }
        a
    }
}

struct Solver<'a> {
    data: &'a Data,
    opts: SdpOptions,
    nu: f64,
    bnorm: f64,
    cnorm: f64,
}

enum Check {
    Continue,
    Done(SdpStatus),
}

#[derive(Clone, Copy)]
struct Metrics {
    pres: f64,
    dres: f64,
    gap: f64,
}

impl Metrics {
    fn worst(self) -> f64 {
        self.pres.max(self.dres).max(self.gap)
    }
}

impl<'a> Solver<'a> {
    fn new(data: &'a Data, opts: SdpOptions) -> Self {
        let nu: f64 = data.dims.iter().sum::<usize>() as f64;
        let bnorm = data.b.norm();
        let cnorm = (data.c.iter().map(|c| c.norm_squared()).sum::<f64>() + data.cf.norm_squared()).sqrt();
        Self { data, opts, nu, bnorm, cnorm }
    }

    fn residuals(&self, it: &Iterate) -> (DVector<f64>, Vec<DMatrix<f64>>, DVector<f64>, f64) {
        let d = self.data;
        let rp = &d.b * it.tau - d.apply_a(&it.x) - &d.af * &it.f;
        let aty = d.apply_at(&it.y);
        let rd: Vec<DMatrix<f64>> =
            d.c.iter().zip(&aty).zip(&it.s).map(|((c, a), s)| c * it.tau - a - s).collect();
        let rf = &d.cf * it.tau - d.af.transpose() * &it.y;
        let rg = it.kappa + inner(&d.c, &it.x) + d.cf.dot(&it.f) - d.b.dot(&it.y);
        (rp, rd, rf, rg)
    }

    fn check(&self, it: &Iterate, rp: &DVector<f64>, rd: &[DMatrix<f64>], rf: &DVector<f64>) -> (Check, Metrics) {
        let d = self.data;
        let tol = self.opts.tol;
        let pres = rp.norm() / it.tau / (1.0 + self.bnorm);
        let dres = (rd.iter().map(|m| m.norm_squared()).sum::<f64>() + rf.norm_squared()).sqrt() / it.tau
            / (1.0 + self.cnorm);
        let pobj = (inner(&d.c, &it.x) + d.cf.dot(&it.f)) / it.tau;
        let dobj = d.b.dot(&it.y) / it.tau;
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let m = Metrics { pres, dres, gap };
        if pres <= tol && dres <= tol && gap <= tol {
            return (Check::Done(SdpStatus::Optimal), m);
        }
        if it.tau < INFEAS_RATIO * it.kappa {
            let by = d.b.dot(&it.y);
            if by > 0.0 {
                let aty = d.apply_at(&it.y);
                let res = (aty.iter().zip(&it.s).map(|(a, s)| (a + s).norm_squared()).sum::<f64>()
                    + (d.af.transpose() * &it.y).norm_squared())
                .sqrt();
                if res / by <= tol.max(1e-8) * 10.0 {
                    return (Check::Done(SdpStatus::Infeasible), m);
                }
            }
            let cx = inner(&d.c, &it.x) + d.cf.dot(&it.f);
            if cx < 0.0 {
                let res = (d.apply_a(&it.x) + &d.af * &it.f).norm();
                if res / (-cx) <= tol.max(1e-8) * 10.0 {
                    return (Check::Done(SdpStatus::Unbounded), m);
                }
            }
        }
        (Check::Continue, m)
    }

    fn run(&self) -> SdpSolution {
        let d = self.data;
        let s0 = self.opts.initial_scale;
        let mut it = Iterate {
            x: d.dims.iter().map(|&n| DMatrix::identity(n, n) * s0).collect(),
            f: DVector::zeros(d.nfree),
            y: DVector::zeros(d.m()),
            s: d.dims.iter().map(|&n| DMatrix::identity(n, n) * s0).collect(),
            tau: 1.0,
            kappa: 1.0,
        };
        let mut status = SdpStatus::NumericalFailure;
        let mut iters = 0;
        let mut best: Option<(Metrics, Iterate)> = None;
        let mut since_best = 0;
        for k in 0..=self.opts.max_iter {
            iters = k;
            let (rp, rd, rf, rg) = self.residuals(&it);
            let (chk, m) = self.check(&it, &rp, &rd, &rf);
            if let Check::Done(st) = chk {
                status = st;
                break;
            }
            if best.as_ref().map_or(true, |(b, _)| m.worst() < b.worst()) {
                best = Some((m, it.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if k == self.opts.max_iter || since_best > STALL_LIMIT {
                (status, it) = self.fallback(best.take().unwrap());
                break;
            }
            let Some(frame) = self.frame(&it, rp, rd, rf, rg) else {
                (status, it) = self.fallback(best.take().unwrap());
                break;
            };
            let mu = (inner(&it.x, &it.s) + it.tau * it.kappa) / (self.nu + 1.0);
            #[cfg(feature = "std")]
            if std::env::var_os("DDISS_IPM_TRACE").is_some() {
                std::eprintln!("ipm {k:3} mu {mu:.3e} tau {:.3e} kappa {:.3e} pres {:.3e} dres {:.3e} gap {:.3e} rf {:.3e}", it.tau, it.kappa, m.pres, m.dres, m.gap, frame.rf.norm() / it.tau);
            }

            // predictor
            let rc_aff: Vec<DMatrix<f64>> =
                frame.scal.iter().map(|sc| DMatrix::from_diagonal(&sc.lambda.map(|l| -l * l))).collect();
            let aff = frame.direction(1.0, &rc_aff, -it.tau * it.kappa);
            let (dxa, dsa) = frame.scaled(&aff);
            let alpha_aff = frame.step_length(&aff, &dxa, &dsa).min(1.0);
            let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

            // corrector
            let rc: Vec<DMatrix<f64>> = frame
                .scal
                .iter()
                .zip(dxa.iter().zip(&dsa))
                .map(|(sc, (dx, ds))| {
                    let mut m = -symmetrize(&(dx * ds));
                    for i in 0..sc.lambda.len() {
                        m[(i, i)] += -sc.lambda[i] * sc.lambda[i] + sigma * mu;
                    }
                    m
                })
                .collect();
            let rtau = -it.tau * it.kappa + sigma * mu - aff.tau * aff.kappa;
            let dir = frame.direction(1.0 - sigma, &rc, rtau);
            let (dxs, dss) = frame.scaled(&dir);
            let alpha = (STEP_FRACTION * frame.step_length(&dir, &dxs, &dss)).min(1.0);
            if !(alpha >= MIN_STEP) || !dir.tau.is_finite() {
                (status, it) = self.fallback(best.take().unwrap());
                break;
            }
            it.x = axpy(&it.x, alpha, &dir.x);
            it.s = axpy(&it.s, alpha, &dir.s);
            it.f += &dir.f * alpha;
            it.y += &dir.y * alpha;
            it.tau += alpha * dir.tau;
            it.kappa += alpha * dir.kappa;
            for m in it.x.iter_mut().chain(it.s.iter_mut()) {
                *m = symmetrize(m);
            }
        }
        let t = it.tau;
        let (x, f, y) = match status {
            // certificates are reported unnormalized
            SdpStatus::Infeasible | SdpStatus::Unbounded => (it.x, it.f, it.y),
            _ => (
                it.x.iter().map(|m| m / t).collect(),
                it.f / t,
                it.y / t,
            ),
        };
        SdpSolution {
            status,
            block_values: x,
            free_values: f.iter().copied().collect(),
            dual: y.iter().copied().collect(),
            objective_value: 0.0,
            dual_objective: 0.0,
            iterations: iters,
            residuals: Default::default(),
        }
    }

    /// Status for the best iterate seen when the method cannot continue.
    fn fallback(&self, (m, it): (Metrics, Iterate)) -> (SdpStatus, Iterate) {
        let band = 10.0 * self.opts.tol;
        let st = if m.worst() <= band {
            SdpStatus::Optimal
        } else if m.pres <= FEASIBLE_PRIMAL {
            SdpStatus::Feasible
        } else {
            SdpStatus::NumericalFailure
        };
        (st, it)
    }

    fn frame(
        &self,
        it: &Iterate,
        rp: DVector<f64>,
        rd: Vec<DMatrix<f64>>,
        rf: DVector<f64>,
        rg: f64,
    ) -> Option<Frame<'a>> {
        let d = self.data;
        let scal: Vec<Scaling> = it.x.iter().zip(&it.s).map(|(x, s)| nt_scaling(x, s)).collect::<Option<_>>()?;
        let w: Vec<DMatrix<f64>> = scal.iter().map(|s| s.w.clone()).collect();
        let k = Factored::new(d.schur(&w), &d.af)?;
        let wrdw = sandwich(&w, &rd);
        let a_wrdw = d.apply_a(&wrdw);
        let c_wrdw = inner(&d.c, &wrdw);
        let wcw = sandwich(&w, &d.c);
        let a_c = d.apply_a(&wcw);
        let c_ww = inner(&d.c, &wcw);
        let (vy, vf) = k.solve(&d.af, &(&d.b + &a_c), &d.cf);
        if vy.iter().chain(vf.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some(Frame {
            data: d,
            scal,
            w,
            k,
            rp,
            rd,
            rf,
            rg,
            a_wrdw,
            c_wrdw,
            a_c,
            c_ww,
            vy,
            vf,
            tau: it.tau,
            kappa: it.kappa,
        })
    }
}
