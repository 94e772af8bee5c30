//! Ground-truth simulation: noisy open-loop data collection and event-triggered
//! closed-loop runs with a zero-order hold.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{regressor, Dataset, Sample};
use crate::error::{Error, Result};
use crate::poly::{PolyMatrix, Polynomial, VarSet};
use crate::synthesis::ClassKInf;

/// `ẋ = A⋆ Z(x) + B⋆ W(x) u`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSystem {
    pub vars: VarSet,
    pub a_star: DMatrix<f64>,
    pub b_star: DMatrix<f64>,
    pub z_basis: Vec<Polynomial>,
    pub w_basis: PolyMatrix,
}

impl GroundTruthSystem {
    pub fn new(
        vars: VarSet,
        a_star: DMatrix<f64>,
        b_star: DMatrix<f64>,
        z_basis: Vec<Polynomial>,
        w_basis: PolyMatrix,
    ) -> Result<Self> {
        let n = vars.len();
        if a_star.nrows() != n || a_star.ncols() != z_basis.len() {
            return Err(Error::DimensionMismatch { expected: z_basis.len(), found: a_star.ncols() });
        }
        if b_star.nrows() != n || b_star.ncols() != w_basis.rows() {
            return Err(Error::DimensionMismatch { expected: w_basis.rows(), found: b_star.ncols() });
        }
        for z in &z_basis {
            if z.nvars() != n {
                return Err(Error::VariableMismatch { left: n, right: z.nvars() });
            }
            if z.constant_term() != 0.0 {
                return Err(Error::InvalidConfig("Z(0) must be 0".into()));
            }
        }
        Ok(Self { vars, a_star, b_star, z_basis, w_basis })
    }

    /// `ẋ₁ = −x₁ + x₁²x₂, ẋ₂ = u` with `Z = (x₁, x₁², x₁²x₂, x₁x₂², x₂³)`, `W = 1`.
    pub fn khalil() -> Self {
        let vars = VarSet::states(2);
        let z = ["x1", "x1^2", "x1^2*x2", "x1*x2^2", "x2^3"]
            .iter()
            .map(|s| Polynomial::parse(s, &vars).expect("valid monomial"))
            .collect();
        let w = PolyMatrix::from_rows(vec![vec![Polynomial::constant(2, 1.0)]]).expect("1x1");
        let a = DMatrix::from_row_slice(2, 5, &[-1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        Self::new(vars, a, b, z, w).expect("consistent example")
    }

    pub fn n(&self) -> usize {
        self.vars.len()
    }

    pub fn m(&self) -> usize {
        self.w_basis.cols()
    }

    /// `[A⋆ B⋆]`, n×(N+M).
    pub fn ab(&self) -> DMatrix<f64> {
        let (n, nz, nw) = (self.n(), self.a_star.ncols(), self.b_star.ncols());
        let mut out = DMatrix::zeros(n, nz + nw);
        out.view_mut((0, 0), (n, nz)).copy_from(&self.a_star);
        out.view_mut((0, nz), (n, nw)).copy_from(&self.b_star);
        out
    }

    pub fn field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let phi = regressor(&self.z_basis, &self.w_basis, x, u);
        (self.ab() * phi).iter().copied().collect()
    }

    /// Field with an arbitrary `[A B]` in place of the truth.
    pub fn field_with(&self, ab: &DMatrix<f64>, x: &[f64], u: &[f64]) -> Vec<f64> {
        let phi = regressor(&self.z_basis, &self.w_basis, x, u);
        (ab * phi).iter().copied().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Integration stopped on a non-finite or exploding state.
#[derive(Clone, Debug, PartialEq)]
pub struct Diverged {
    pub t: f64,
    pub partial: Trajectory,
}

impl From<Diverged> for Error {
    fn from(d: Diverged) -> Self {
        Error::Divergence { t: d.t }
    }
}

/// States beyond this norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;

fn finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite()) && x.iter().map(|v| v * v).sum::<f64>() <= DIVERGENCE_NORM * DIVERGENCE_NORM
}

/// One classical Runge–Kutta step.
pub fn rk4_step<F: FnMut(f64, &[f64]) -> Vec<f64>>(f: &mut F, t: f64, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let k1 = f(t, x);
    let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
    let k2 = f(t + 0.5 * h, &x2);
    let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
    let k3 = f(t + 0.5 * h, &x3);
    let x4: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
    let k4 = f(t + h, &x4);
    (0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

fn steps(horizon: f64, h: f64) -> usize {
    let k = horizon / h;
    let r = k.round();
    if (k - r).abs() < 1e-9 * k.max(1.0) {
        r as usize
    } else {
        k.ceil() as usize
    }
}

/// Fixed-step RK4 on `[0, horizon]`.
pub fn integrate<F: FnMut(f64, &[f64]) -> Vec<f64>>(
    mut f: F,
    x0: &[f64],
    horizon: f64,
    h: f64,
) -> core::result::Result<Trajectory, Diverged> {
    assert!(h > 0.0, "step must be positive");
    let mut tr = Trajectory { times: vec![0.0], states: vec![x0.to_vec()] };
    let mut x = x0.to_vec();
    for k in 0..steps(horizon, h) {
        let t = k as f64 * h;
        x = rk4_step(&mut f, t, &x, h);
        let t1 = (k + 1) as f64 * h;
        if !finite(&x) {
            return Err(Diverged { t: t1, partial: tr });
        }
        tr.times.push(t1);
        tr.states.push(x.clone());
    }
    Ok(tr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub samples: usize,
    pub sample_spacing: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
    pub u_bound: f64,
    pub d_radius: f64,
    pub x0: Vec<f64>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            sample_spacing: 0.05,
            substeps: 50,
            u_bound: 10.0,
            d_radius: 1e-3,
            x0: vec![2.0, -2.0],
            seed: 0,
        }
    }
}

/// Open-loop record on the integration grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpenLoopTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

/// Uniform sample in the Euclidean ball of radius `r`.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    if r == 0.0 || n == 0 {
        return vec![0.0; n];
    }
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        if norm2 <= 1.0 {
            return v.into_iter().map(|a| a * r).collect();
        }
    }
}

/// Simulates under piecewise-constant uniform random input and records noisy derivatives.
pub fn collect_dataset(sys: &GroundTruthSystem, cfg: &ExperimentConfig) -> Result<(Dataset, OpenLoopTrace)> {
    if cfg.samples == 0 {
        return Err(Error::InvalidConfig("empty experiment".into()));
    }
    if !(cfg.sample_spacing > 0.0) || cfg.substeps == 0 {
        return Err(Error::InvalidConfig("sample spacing and substeps must be positive".into()));
    }
    if !(cfg.d_radius >= 0.0) || !(cfg.u_bound >= 0.0) {
        return Err(Error::InvalidConfig("noise radius and input bound must be nonnegative".into()));
    }
    if cfg.x0.len() != sys.n() {
        return Err(Error::DimensionMismatch { expected: sys.n(), found: cfg.x0.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.sample_spacing / cfg.substeps as f64;
    let mut x = cfg.x0.clone();
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut trace = OpenLoopTrace::default();
    for i in 0..cfg.samples {
        let t = i as f64 * cfg.sample_spacing;
        let u: Vec<f64> = (0..sys.m())
            .map(|_| if cfg.u_bound > 0.0 { rng.gen_range(-cfg.u_bound..=cfg.u_bound) } else { 0.0 })
            .collect();
        let d = sample_ball(&mut rng, sys.n(), cfg.d_radius);
        let xdot: Vec<f64> = sys.field(&x, &u).iter().zip(&d).map(|(a, b)| a + b).collect();
        samples.push(Sample { t, u: u.clone(), x: x.clone(), xdot });
        if i + 1 == cfg.samples {
            trace.times.push(t);
            trace.states.push(x.clone());
            trace.inputs.push(u.clone());
            break;
        }
        for s in 0..cfg.substeps {
            trace.times.push(t + s as f64 * h);
            trace.states.push(x.clone());
            trace.inputs.push(u.clone());
            x = rk4_step(&mut |_, z: &[f64]| sys.field(z, &u), 0.0, &x, h);
            if !finite(&x) {
                return Err(Error::Divergence { t: t + (s + 1) as f64 * h });
            }
        }
    }
    let ds = Dataset::new(
        sys.vars.clone(),
        if cfg.d_radius > 0.0 { cfg.d_radius * cfg.d_radius } else { f64::MIN_POSITIVE },
        sys.z_basis.clone(),
        sys.w_basis.clone(),
        samples,
    )?;
    Ok((ds, trace))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    pub alpha3: Vec<f64>,
    pub alpha4: Vec<f64>,
    pub event_flags: Vec<bool>,
    pub event_times: Vec<f64>,
}

impl EventTrace {
    pub fn event_count(&self) -> usize {
        self.event_times.len()
    }

    /// `max α₄(|e|) / (σ α₃(|x|))` over grid points with `α₃ > 0`.
    pub fn max_trigger_ratio(&self, sigma: f64) -> f64 {
        self.alpha3
            .iter()
            .zip(&self.alpha4)
            .filter(|(a3, _)| **a3 > 0.0)
            .map(|(a3, a4)| a4 / (sigma * a3))
            .fold(0.0, f64::max)
    }

    fn push(&mut self, t: f64, x: &[f64], u: &[f64], e: Vec<f64>, a3: f64, a4: f64, event: bool) {
        self.times.push(t);
        self.states.push(x.to_vec());
        self.inputs.push(u.to_vec());
        self.errors.push(e);
        self.alpha3.push(a3);
        self.alpha4.push(a4);
        self.event_flags.push(event);
        if event {
            self.event_times.push(t);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventConfig {
    pub sigma: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub h: f64,
    /// Consecutive every-step events tolerated before reporting a storm.
    pub storm_limit: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self { sigma: 0.9, x0: vec![2.0, -2.0], horizon: 10.0, h: 1e-3, storm_limit: 1000 }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Zero-order hold of `k(x(tᵢ))`; a new event fires at the grid point where
/// `α₄(|e|) > σ α₃(|x|)` is first observed.
pub fn event_triggered_run<F>(
    field: F,
    k: &[Polynomial],
    alpha3: &ClassKInf,
    alpha4: &ClassKInf,
    cfg: &EventConfig,
) -> Result<EventTrace>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if !(cfg.sigma > 0.0 && cfg.sigma < 1.0) {
        return Err(Error::InvalidConfig(alloc::format!("sigma must lie in (0, 1), got {}", cfg.sigma)));
    }
    if !(cfg.h > 0.0) || !(cfg.horizon >= 0.0) {
        return Err(Error::InvalidConfig("step must be positive and horizon nonnegative".into()));
    }
    let n = cfg.x0.len();
    if let Some(p) = k.iter().find(|p| p.nvars() != n) {
        return Err(Error::VariableMismatch { left: n, right: p.nvars() });
    }
    let control = |x: &[f64]| -> Vec<f64> { k.iter().map(|p| p.eval_unchecked(x)).collect() };
    let mut tr = EventTrace::default();
    let mut x = cfg.x0.clone();
    let mut held_x = x.clone();
    let mut u = control(&held_x);
    tr.push(0.0, &x, &u, vec![0.0; n], alpha3.eval(norm(&x)), 0.0, true);
    let mut streak = 0usize;
    for step in 0..steps(cfg.horizon, cfg.h) {
        let t1 = (step + 1) as f64 * cfg.h;
        x = rk4_step(&mut |_, z: &[f64]| field(z, &u), 0.0, &x, cfg.h);
        if !finite(&x) {
            return Err(Error::Divergence { t: t1 });
        }
        let e: Vec<f64> = held_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let a3 = alpha3.eval(norm(&x));
        let a4 = alpha4.eval(norm(&e));
        if a4 > cfg.sigma * a3 {
            held_x = x.clone();
            u = control(&held_x);
            streak += 1;
            if streak > cfg.storm_limit {
                return Err(Error::EventStorm { t: t1, count: streak });
            }
            tr.push(t1, &x, &u, vec![0.0; n], a3, 0.0, true);
        } else {
            streak = 0;
            tr.push(t1, &x, &u, e, a3, a4, false);
        }
    }
    Ok(tr)
}

/// `|x|` along a trajectory.
pub fn state_norms(states: &[Vec<f64>]) -> Vec<f64> {
    states.iter().map(|x| norm(x)).collect()
}

/// `[A B]` evaluated at a state as a field closure.
pub fn member_field<'a>(sys: &'a GroundTruthSystem, ab: &'a DMatrix<f64>) -> impl Fn(&[f64], &[f64]) -> Vec<f64> + 'a {
    move |x, u| sys.field_with(ab, x, u)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::membership_instantaneous;

    #[test]
    fn scalar_decay() {
        let tr = integrate(|_, x| vec![-x[0]], &[1.0], 1.0, 1e-3).unwrap();
        assert_eq!(tr.times.len(), 1001);
        assert!((tr.states.last().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-6);
        let c = integrate(|_, _| vec![0.0, 0.0], &[1.5, -2.0], 2.0, 0.1).unwrap();
        assert!(c.states.iter().all(|s| s == &vec![1.5, -2.0]));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |h: f64| (integrate(|_, x| vec![-x[0]], &[1.0], 1.0, h).unwrap().states.last().unwrap()[0]
            - (-1.0f64).exp())
        .abs();
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "{ratio}");
    }

    #[test]
    fn divergence_keeps_partial_trace() {
        let r = integrate(|_, x| vec![x[0] * x[0]], &[1.0], 2.0, 1e-3);
        let d = r.unwrap_err();
        assert!(d.t > 0.9 && d.t < 1.1, "{}", d.t);
        assert!(!d.partial.times.is_empty());
    }

    #[test]
    fn initial_controller_stabilizes_without_error() {
        let sys = GroundTruthSystem::khalil();
        let k = Polynomial::parse("-x1^3 - 8*x2", &sys.vars).unwrap();
        let tr = integrate(|_, x| sys.field(x, &[k.eval_unchecked(x)]), &[2.0, -2.0], 10.0, 1e-3).unwrap();
        assert!(norm(tr.states.last().unwrap()) < 0.05);
    }

    #[test]
    fn noiseless_data_fits_exactly() {
        let sys = GroundTruthSystem::khalil();
        let cfg = ExperimentConfig { d_radius: 0.0, seed: 4, ..Default::default() };
        let (ds, _) = collect_dataset(&sys, &cfg).unwrap();
        for s in &ds.samples {
            let m = membership_instantaneous(&sys.ab(), &ds, s).unwrap();
            assert!(m.pass);
            assert!(m.residual + ds.delta <= 1e-20);
        }
    }

    #[test]
    fn noisy_data_within_ball_and_deterministic() {
        let sys = GroundTruthSystem::khalil();
        let cfg = ExperimentConfig { seed: 9, ..Default::default() };
        let (a, tr) = collect_dataset(&sys, &cfg).unwrap();
        let (b, _) = collect_dataset(&sys, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.delta, 1e-6);
        assert_eq!(tr.times.len(), 49 * 50 + 1);
        for s in &a.samples {
            let m = membership_instantaneous(&sys.ab(), &a, s).unwrap();
            assert!(m.pass, "{}", m.residual);
        }
        assert!(collect_dataset(&sys, &ExperimentConfig { samples: 0, ..cfg }).is_err());
    }

    #[test]
    fn event_run_basics() {
        let sys = GroundTruthSystem::khalil();
        let k = vec![Polynomial::parse("-x1^3 - 8*x2", &sys.vars).unwrap()];
        let a3 = ClassKInf::new(vec![1.0, 0.0], 1e-4).unwrap();
        let a4 = ClassKInf::new(vec![1.0, 0.0], 1e-4).unwrap();
        let empty = event_triggered_run(|x, u| sys.field(x, u), &k, &a3, &a4, &EventConfig { horizon: 0.0, ..Default::default() })
            .unwrap();
        assert_eq!(empty.event_count(), 1);
        assert_eq!(empty.times.len(), 1);
        let cfg = EventConfig { horizon: 2.0, ..Default::default() };
        let tr = event_triggered_run(|x, u| sys.field(x, u), &k, &a3, &a4, &cfg).unwrap();
        for i in 0..tr.times.len() {
            if tr.event_flags[i] {
                assert!(tr.errors[i].iter().all(|v| *v == 0.0));
            } else {
                assert_eq!(tr.inputs[i], tr.inputs[i - 1]);
            }
            assert!(tr.alpha4[i] <= cfg.sigma * tr.alpha3[i] + 1e-12);
        }
        let bad = EventConfig { sigma: 1.5, ..Default::default() };
        assert!(event_triggered_run(|x, u| sys.field(x, u), &k, &a3, &a4, &bad).is_err());
    }

    #[test]
    fn fewer_events_for_larger_sigma() {
        let sys = GroundTruthSystem::khalil();
        let k = vec![Polynomial::parse("-x1^3 - 8*x2", &sys.vars).unwrap()];
        let a3 = ClassKInf::new(vec![1.0, 0.1], 1e-4).unwrap();
        let a4 = ClassKInf::new(vec![2.0, 1.0], 1e-4).unwrap();
        let count = |sigma: f64| {
            let cfg = EventConfig { sigma, horizon: 3.0, ..Default::default() };
            event_triggered_run(|x, u| sys.field(x, u), &k, &a3, &a4, &cfg).unwrap().event_count()
        };
        let (lo, hi) = (count(0.1), count(0.95));
        assert!(hi <= lo, "{hi} > {lo}");
    }
}
