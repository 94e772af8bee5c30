//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ddiss::files::{load_json, DatasetFile, EllipsoidFile, ResultFile};
use ddiss_core::consistency::{
    build_data_matrices, ellipsoid_params, membership, membership_instantaneous, solve_overapprox, ConsistencyEllipsoid,
    Dataset, OverapproxOptions,
};
use ddiss_core::poly::{Monomial, PolyMatrix, Polynomial};
use ddiss_core::sdp::gen::random_strictly_feasible;
use ddiss_core::sdp::{solve_sdp, validate_solution, InteriorPoint, SdpOptions, SdpStatus};
use ddiss_core::simulate::{event_triggered_run, member_field, state_norms, EventConfig, GroundTruthSystem};
use ddiss_core::sos::{check_sos_numeric, extract_certificate, solve_program, AffPoly, GramPolicy, SosProgram};
use ddiss_core::synthesis::SynthesisResult;
use ddiss_core::verify::{check_dissipation_sampled, check_lemma2_instance, check_schur_equiv, schur_pairs};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: u64 = 10;
const REQUIRED: usize = 8;
const TIME_LIMIT: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Outputs of one `collect → ellipsoid → synthesize` run.
struct Run {
    seed: u64,
    dir: TempDir,
    elapsed: Duration,
    status: Option<i32>,
    log: String,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn ok(&self) -> bool {
        self.status == Some(0) && verification_passed(&self.out().join("result.json"))
    }
}

fn verification_passed(path: &Path) -> bool {
    load_json::<ResultFile>(path, "result")
        .ok()
        .and_then(|r| r.value.verification)
        .is_some_and(|v| v.pass)
}

fn pipeline(seed: u64) -> Run {
    let dir = TempDir::new().expect("tempdir");
    let bin = env!("CARGO_BIN_EXE_ddiss");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, ddiss::config::EXAMPLE_KHALIL).expect("write config");
    let seed_s = seed.to_string();
    let start = Instant::now();
    let mut log = String::new();
    let mut status = None;
    for stage in ["collect", "ellipsoid", "synthesize"] {
        let o = Command::new(bin)
            .current_dir(dir.path())
            .args(["--config", "cfg.toml", "--seed", &seed_s, stage])
            .output()
            .expect("spawn ddiss");
        log.push_str(&String::from_utf8_lossy(&o.stdout));
        log.push_str(&String::from_utf8_lossy(&o.stderr));
        status = o.status.code();
        if status != Some(0) {
            break;
        }
    }
    Run { seed, dir, elapsed: start.elapsed(), status, log }
}

fn run_all() -> Vec<Run> {
    let workers = std::thread::available_parallelism().map_or(1, usize::from).min(SEEDS as usize);
    let mut runs: Vec<Run> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w as u64..SEEDS).step_by(workers).map(pipeline).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker")).collect()
    });
    runs.sort_by_key(|r| r.seed);
    runs
}

/// Seed-0 artifacts as the CLI wrote them.
struct Artifacts {
    sys: GroundTruthSystem,
    ds: Dataset,
    ell: ConsistencyEllipsoid,
    res: SynthesisResult,
    z: Vec<Polynomial>,
    w: PolyMatrix,
}

fn load_artifacts(run: &Run) -> Result<Artifacts, String> {
    let out = run.out();
    let e = |x: anyhow::Error| format!("{x:#}");
    let dsf = load_json::<DatasetFile>(&out.join("dataset.json"), "dataset").map_err(e)?.value;
    let ds = dsf.to_dataset().map_err(e)?;
    let sys = dsf.ground_truth.as_ref().ok_or("dataset lacks ground truth")?.build().map_err(e)?;
    let ell = load_json::<EllipsoidFile>(&out.join("ellipsoid.json"), "ellipsoid").map_err(e)?.value.to_ellipsoid().map_err(e)?;
    let rf = load_json::<ResultFile>(&out.join("result.json"), "result").map_err(e)?.value;
    let res = rf.to_result().map_err(e)?;
    let (_, z, w) = rf.bases.parse().map_err(e)?;
    Ok(Artifacts { sys, ds, ell, res, z, w })
}

fn criterion1(runs: &[Run]) -> Outcome {
    let ok: Vec<u64> = runs.iter().filter(|r| r.ok()).map(|r| r.seed).collect();
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    for r in runs.iter().filter(|r| !r.ok()) {
        eprintln!("seed {} failed (exit {:?}):\n{}", r.seed, r.status, r.log);
    }
    let detail = format!("{}/{SEEDS} seeds feasible and verified, slowest run {:.0}s", ok.len(), slowest.as_secs_f64());
    ensure(ok.len() >= REQUIRED, || format!("{detail}; passing seeds {ok:?}"))?;
    ensure(slowest <= TIME_LIMIT, || format!("{detail}; over the time limit"))?;
    Ok(detail)
}

fn criterion2(a: &Artifacts) -> Outcome {
    let ab = a.sys.ab();
    let mut worst = f64::NEG_INFINITY;
    for s in &a.ds.samples {
        let m = membership_instantaneous(&ab, &a.ds, s).map_err(|e| e.to_string())?;
        worst = worst.max(m.residual);
    }
    ensure(a.ds.len() == 50, || format!("{} samples", a.ds.len()))?;
    ensure(worst <= 0.0, || format!("sample residual |d|²-δ = {worst:e}"))?;
    let m = membership(&ab, &a.ell, 1e-6).map_err(|e| e.to_string())?;
    ensure(m.residual <= 1e-6, || format!("ellipsoid residual {:e}", m.residual))?;
    Ok(format!("50/50 samples (worst |d|²-δ = {worst:.2e}), ellipsoid residual {:.3e}", m.residual))
}

fn criterion3(a: &Artifacts) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ab = a.sys.ab();
    let rep = check_dissipation_sampled(&a.res, &a.ell, (&a.z, &a.w), 2.0, 10_000, 100, Some(&ab), &mut rng);
    ensure(rep.pass && rep.worst <= 1e-6, || rep.to_string())?;
    Ok(format!("{} evaluations, worst {:.3e}; {}", rep.samples, rep.worst, rep.note))
}

fn criterion4(a: &Artifacts) -> Outcome {
    let cfg = EventConfig { sigma: 0.9, x0: vec![2.0, -2.0], horizon: 10.0, ..Default::default() };
    let ab = a.sys.ab();
    let r = &a.res;
    let tr = event_triggered_run(member_field(&a.sys, &ab), &r.k, &r.alpha[2], &r.alpha[3], &cfg).map_err(|e| e.to_string())?;
    let norms = state_norms(&tr.states);
    let (x0, xt) = (norms[0], *norms.last().unwrap());
    ensure(xt <= 0.05 * x0, || format!("|x(10)| = {xt:e} > 0.05 |x0|"))?;
    let trig = tr.alpha3.iter().zip(&tr.alpha4).map(|(a3, a4)| a4 - cfg.sigma * a3).fold(f64::NEG_INFINITY, f64::max);
    ensure(trig <= 1e-6, || format!("trigger condition violated by {trig:e}"))?;
    let vs: Vec<f64> = tr.states.iter().map(|x| r.v.eval(x).expect("state dimension")).collect();
    let dv = vs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    ensure(dv <= 1e-4, || format!("V increased by {dv:e} in one step"))?;
    Ok(format!(
        "{} events, |x(10)|/|x0| = {:.2e}, max α4-σα3 = {trig:.2e}, max ΔV = {dv:.2e}",
        tr.event_count(),
        xt / x0
    ))
}

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

fn random_sos(rng: &mut ChaCha8Rng) -> Polynomial {
    let nvars = rng.gen_range(2..=3);
    let mut p = Polynomial::zero(nvars);
    for _ in 0..rng.gen_range(1..=3) {
        let deg = rng.gen_range(1..=3);
        let terms: Vec<(Vec<u32>, f64)> =
            monomials(nvars, deg).into_iter().map(|m| (m.exps().to_vec(), rng.gen_range(-1.0..=1.0))).collect();
        let q = Polynomial::from_terms(nvars, terms).expect("valid terms");
        p = &p + &(&q * &q);
    }
    p
}

fn certify(p: &Polynomial) -> Option<f64> {
    let mut prog = SosProgram::new(p.nvars());
    prog.add_sos("p", AffPoly::from_poly(p)).ok()?;
    let (compiled, sol) = solve_program(&prog, GramPolicy::Trim, &InteriorPoint::new(SdpOptions::default())).ok()?;
    Some(extract_certificate(&prog, &compiled, &sol).ok()?.certificates[0].residual)
}

fn criterion5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let p = random_sos(&mut rng);
        let r = certify(&p).ok_or_else(|| format!("sum of squares {case} not certified"))?;
        ensure(r <= 1e-8, || format!("sum of squares {case}: residual {r:e}"))?;
        worst = worst.max(r);
    }
    let mut rejected = 0;
    for case in 0..100 {
        let s = random_sos(&mut rng);
        let x0: Vec<f64> = (0..s.nvars()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let p = &s - &Polynomial::constant(s.nvars(), s.eval(&x0).expect("point dimension") + rng.gen_range(0.01..=1.0));
        match certify(&p) {
            None => rejected += 1,
            Some(r) => {
                let numeric = check_sos_numeric(&p, 2000, 1.0, &mut rng);
                ensure(r > 1e-8 || !numeric.passed, || format!("false certificate for negative case {case}"))?;
            }
        }
    }
    Ok(format!("100/100 certified (worst residual {worst:.1e}); 0 false certificates ({rejected} reported infeasible)"))
}

fn criterion6(a: &Artifacts) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let psd = |rng: &mut ChaCha8Rng, n: usize| {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..=1.0));
        &m * m.transpose()
    };
    for case in 0..100 {
        let (k, na, nb) = (rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let e = DMatrix::from_fn(k, na, |_, _| rng.gen_range(-2.0..=2.0));
        let g = DMatrix::from_fn(nb, k, |_, _| rng.gen_range(-2.0..=2.0));
        let f_bar = psd(&mut rng, nb);
        let lambda = 10f64.powf(rng.gen_range(-1.5..=1.5));
        let slack = psd(&mut rng, k) * rng.gen_range(0.0..=1.0) + DMatrix::identity(k, k) * 1e-6;
        let c = -(&e * e.transpose() * lambda + g.transpose() * &f_bar * &g / lambda) - slack;
        let c = (&c + c.transpose()) * 0.5;
        let rep = check_lemma2_instance(&c, &e, &g, &f_bar, lambda, 200, &mut rng);
        ensure(rep.pass, || format!("lemma instance {case}: {rep}"))?;
    }
    let pairs = schur_pairs(&a.res, &a.ell, (&a.z, &a.w), 2.0, 1000, &mut rng);
    let rep = check_schur_equiv(&pairs, 1e-8);
    ensure(rep.pass && rep.samples == 1000, || rep.to_string())?;
    Ok("100 lemma instances without violation; Schur forms agree at 1000 points".into())
}

fn criterion7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_gap: f64 = 0.0;
    for case in 0..20 {
        let blocks: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=20)).collect();
        let dof: usize = blocks.iter().map(|d| d * (d + 1) / 2).sum();
        let m = rng.gen_range(1..=dof.min(60));
        let nfree = rng.gen_range(0..=3.min(m));
        let p = random_strictly_feasible(&mut rng, &blocks, m, nfree);
        let sol = solve_sdp(&p, &SdpOptions::default()).map_err(|e| e.to_string())?;
        ensure(sol.status == SdpStatus::Optimal, || format!("case {case}: {:?}", sol.status))?;
        ensure(sol.residuals.duality_gap <= 1e-6, || format!("case {case}: gap {:e}", sol.residuals.duality_gap))?;
        let v = validate_solution(&p, &sol).map_err(|e| e.to_string())?;
        ensure(v.passed(), || format!("case {case}: validation failed"))?;
        let again = solve_sdp(&p, &SdpOptions::default()).map_err(|e| e.to_string())?;
        ensure(again == sol, || format!("case {case}: rerun differs"))?;
        worst_gap = worst_gap.max(sol.residuals.duality_gap);
    }
    Ok(format!("20/20 optimal, validated and reproducible; worst gap {worst_gap:.1e}"))
}

fn criterion8(a: &Artifacts) -> Outcome {
    let dm = build_data_matrices(&a.ds).map_err(|e| e.to_string())?;
    let ov = solve_overapprox(&dm, OverapproxOptions { iters: 5 }, &InteriorPoint::new(SdpOptions::default()))
        .map_err(|e| e.to_string())?;
    ensure(ov.iterates.len() == 5, || format!("{} iterates", ov.iterates.len()))?;
    let ld: Vec<f64> = ov.iterates.iter().map(|i| i.log_det).collect();
    ensure(ld.windows(2).all(|w| w[1] >= w[0]), || format!("log det sequence {ld:?}"))?;
    let ab = a.sys.ab();
    for (i, it) in ov.iterates.iter().enumerate() {
        let ell = ellipsoid_params(&it.a_bar, &it.b_bar).map_err(|e| e.to_string())?;
        let m = membership(&ab, &ell, 1e-6).map_err(|e| e.to_string())?;
        ensure(m.pass, || format!("iterate {i} excludes the truth (residual {:e})", m.residual))?;
    }
    let refit = (ov.ellipsoid.a_bar.clone() - &a.ell.a_bar).amax() / a.ell.a_bar.amax();
    ensure(refit <= 1e-9, || format!("refit differs from the CLI ellipsoid by {refit:e}"))?;
    Ok(format!("log det {}", ld.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ≤ ")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let start = Instant::now();
    let runs = run_all();
    let artifacts = runs.iter().find(|r| r.seed == 0).ok_or("seed 0 missing".to_string()).and_then(load_artifacts);
    let with = |f: fn(&Artifacts) -> Outcome| -> Outcome {
        match &artifacts {
            Ok(a) => guarded(|| f(a)),
            Err(e) => Err(format!("seed-0 artifacts unavailable: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("end-to-end pipeline over 10 seeds", guarded(|| criterion1(&runs))),
        ("ground-truth membership", with(criterion2)),
        ("robust dissipation, 1e4 points x 100 members", with(criterion3)),
        ("event-triggered closed loop", with(criterion4)),
        ("SOS compiler oracle suite", guarded(criterion5)),
        ("uncertainty-elimination and Schur oracles", with(criterion6)),
        ("SDP solver baseline", guarded(criterion7)),
        ("ellipsoid log-det monotonicity", with(criterion8)),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
