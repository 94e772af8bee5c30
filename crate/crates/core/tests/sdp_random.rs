use ddiss_core::sdp::{gen::random_strictly_feasible, solve_sdp, validate_solution, SdpOptions, SdpStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_strictly_feasible_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let nblocks = rng.gen_range(1..=3);
        let blocks: Vec<usize> = (0..nblocks).map(|_| rng.gen_range(1..=20)).collect();
        let dof: usize = blocks.iter().map(|d| d * (d + 1) / 2).sum();
        let m = rng.gen_range(1..=dof.min(60));
        let nfree = rng.gen_range(0..=3.min(m));
        let p = random_strictly_feasible(&mut rng, &blocks, m, nfree);

        let sol = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "case {case}: {blocks:?} m={m}");
        assert!(sol.residuals.duality_gap <= 1e-6, "case {case}");
        assert!(validate_solution(&p, &sol).unwrap().passed(), "case {case}");

        let shifted = solve_sdp(&p, &SdpOptions { initial_scale: 3.0, ..Default::default() }).unwrap();
        assert_eq!(shifted.status, SdpStatus::Optimal);
        let scale = 1.0 + sol.objective_value.abs();
        assert!((shifted.objective_value - sol.objective_value).abs() <= 1e-6 * scale, "case {case}");

        let again = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(again, sol, "case {case} not deterministic");
    }
}
