use super::*;

fn scalar_block_problem() -> SdpProblem {
    // minimize t s.t. [[t, 1], [1, t]] ⪰ 0, written with X = [[t, 1], [1, t]]
    let mut p = SdpProblem::new();
    let b = p.add_block(2);
    let mut obj = LinearForm::new();
    obj.add_psd(b, 0, 0, 1.0);
    p.objective = obj;
    let mut e1 = LinearForm::new();
    e1.add_psd(b, 0, 0, 1.0).add_psd(b, 1, 1, -1.0);
    p.add_equality(e1, 0.0);
    let mut e2 = LinearForm::new();
    e2.add_psd(b, 0, 1, 1.0);
    p.add_equality(e2, 1.0);
    p
}

#[test]
fn minimize_t_two_by_two() {
    let p = scalar_block_problem();
    let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.objective_value - 1.0).abs() < 1e-7, "{}", sol.objective_value);
    assert!(sol.residuals.duality_gap <= 1e-8);
    assert!(validate_solution(&p, &sol).unwrap().passed());
}

#[test]
fn minimize_t_with_free_variable() {
    // same program with t as a free variable: X = [[t, 1], [1, t]] linked by equalities
    let mut p = SdpProblem::new();
    let b = p.add_block(2);
    let t = p.add_free(1);
    p.objective.add_free(t, 1.0);
    let mut e = LinearForm::new();
    e.add_psd(b, 0, 0, 1.0).add_free(t, -1.0);
    p.add_equality(e, 0.0);
    let mut e = LinearForm::new();
    e.add_psd(b, 1, 1, 1.0).add_free(t, -1.0);
    p.add_equality(e, 0.0);
    let mut e = LinearForm::new();
    e.add_psd(b, 0, 1, 1.0);
    p.add_equality(e, 1.0);
    let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.free_values[0] - 1.0).abs() < 1e-7);
}

#[test]
fn trace_one_feasibility() {
    let mut p = SdpProblem::new();
    let b = p.add_block(3);
    let mut e = LinearForm::new();
    for i in 0..3 {
        e.add_psd(b, i, i, 1.0);
    }
    p.add_equality(e, 1.0);
    let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert!(sol.status.is_success());
    let x = &sol.block_values[0];
    assert!((x.trace() - 1.0).abs() < 1e-7);
    assert!(crate::linalg::min_eig(x) > 0.0);
}

#[test]
fn negative_scalar_is_infeasible() {
    let mut p = SdpProblem::new();
    let b = p.add_block(1);
    let mut e = LinearForm::new();
    e.add_psd(b, 0, 0, 1.0);
    p.add_equality(e, -1.0);
    let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert_eq!(sol.status, SdpStatus::Infeasible);
}

#[test]
fn unbounded_is_detected() {
    // minimize -x with x ⪰ 0 and no constraint tying it down
    let mut p = SdpProblem::new();
    let b = p.add_block(1);
    let c = p.add_block(1);
    p.objective.add_psd(b, 0, 0, -1.0);
    let mut e = LinearForm::new();
    e.add_psd(c, 0, 0, 1.0);
    p.add_equality(e, 1.0);
    let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert_eq!(sol.status, SdpStatus::Unbounded);
}

#[test]
fn validation_sees_perturbation() {
    let p = scalar_block_problem();
    let exact = SdpSolution {
        status: SdpStatus::Optimal,
        block_values: vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])],
        free_values: vec![],
        dual: vec![],
        objective_value: 1.0,
        dual_objective: f64::NAN,
        iterations: 0,
        residuals: Residuals::default(),
    };
    let rep = validate_solution(&p, &exact).unwrap();
    assert!(rep.residuals.primal_eq_abs <= 1e-12);
    assert!(rep.residuals.min_eig.abs() <= 1e-12);
    assert!(rep.passed());

    let mut bumped = exact.clone();
    bumped.block_values[0][(0, 1)] += 1e-3;
    bumped.block_values[0][(1, 0)] += 1e-3;
    let rep = validate_solution(&p, &bumped).unwrap();
    assert!((rep.residuals.primal_eq_abs - 1e-3).abs() < 1e-12);
    assert!(!rep.primal_ok);
}

#[test]
fn malformed_problem_rejected() {
    let mut p = SdpProblem::new();
    p.add_block(2);
    let mut e = LinearForm::new();
    e.add_psd(0, 0, 2, 1.0);
    p.add_equality(e, 0.0);
    assert!(solve_sdp(&p, &SdpOptions::default()).is_err());
}

#[test]
fn deterministic() {
    let p = scalar_block_problem();
    let a = solve_sdp(&p, &SdpOptions::default()).unwrap();
    let b = solve_sdp(&p, &SdpOptions::default()).unwrap();
    assert_eq!(a, b);
}
