//! Command-line pipeline: `collect → ellipsoid → synthesize → verify / eventsim`.

pub mod config;
pub mod files;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ddiss_core::consistency::{
    build_data_matrices, build_regressors, membership, membership_instantaneous, solve_overapprox, OverapproxOptions,
};
use ddiss_core::sdp::{InteriorPoint, SdpOptions};
use ddiss_core::simulate::{collect_dataset, event_triggered_run, member_field, state_norms, EventTrace, GroundTruthSystem};
use ddiss_core::synthesis::alternate;
use ddiss_core::verify::{random_contraction, verify_result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{RunConfig, SystemSpec, EXAMPLE_KHALIL};
use files::{check_provenance, load_json, sha256_hex, write_json, DatasetFile, EllipsoidFile, ResultFile};

#[derive(Debug, Parser)]
#[command(name = "ddiss", version, about = "Data-driven ISS controller synthesis for event-triggered polynomial systems")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for stage files (default: the configured one, else `.`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the configured system and write `dataset.json` and `openloop.csv`.
    Collect,
    /// Fit the consistency ellipsoid to a dataset and write `ellipsoid.json`.
    Ellipsoid {
        /// Defaults to the configured dataset, else `<out-dir>/dataset.json`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Alternating controller synthesis; writes `result.json`.
    Synthesize(SynthArgs),
    /// Re-run the verification suite on a result; writes `verification.json`.
    Verify {
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long)]
        ellipsoid: Option<PathBuf>,
    },
    /// Event-triggered closed loop; writes `eventsim.csv` and `eventsim.json`.
    Eventsim(EventArgs),
    /// Print the bundled example configuration.
    ExampleConfig,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub ellipsoid: Option<PathBuf>,
    #[arg(long)]
    pub deg_v: Option<u32>,
    #[arg(long)]
    pub deg_k: Option<u32>,
    #[arg(long)]
    pub deg_lambda: Option<u32>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Initial controller, one polynomial per input (repeat for several inputs).
    #[arg(long = "k-init")]
    pub k_init: Vec<String>,
    /// Input bound `|k(x)| ≤ u_max(x)`.
    #[arg(long)]
    pub u_max: Option<String>,
}

#[derive(Debug, Args)]
pub struct EventArgs {
    #[arg(long)]
    pub result: Option<PathBuf>,
    /// Needed only when the result carries no ground truth.
    #[arg(long)]
    pub ellipsoid: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Comma-separated initial state.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Integration and trigger-check step.
    #[arg(long)]
    pub h: Option<f64>,
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Success = 0,
    Other = 1,
    Infeasible = 2,
    Verification = 3,
    Numerical = 4,
    Usage = 64,
}

impl From<ExitKind> for ExitCode {
    fn from(k: ExitKind) -> Self {
        ExitCode::from(k as u8)
    }
}

/// Bad invocation, input file or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn classify(err: &anyhow::Error) -> ExitKind {
    use ddiss_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Infeasible(_) => ExitKind::Infeasible,
                E::Verification(_) => ExitKind::Verification,
                E::NumericalFailure(_)
                | E::DegenerateEllipsoid { .. }
                | E::Certificate(_)
                | E::Divergence { .. }
                | E::EventStorm { .. } => ExitKind::Numerical,
                _ => ExitKind::Usage,
            };
        }
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return ExitKind::Usage;
        }
    }
    ExitKind::Other
}

/// Parses arguments, runs one command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitKind
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage } else { ExitKind::Success };
        }
    };
    match run(cli) {
        Ok(kind) => kind,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify(&e)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    config_hash: Option<String>,
}

impl Ctx {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let (cfg, config_hash) = match &cli.config {
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                let text = String::from_utf8(bytes.clone()).map_err(|_| usage("config is not UTF-8"))?;
                let cfg = RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e:#}", p.display())))?;
                (cfg, Some(sha256_hex(&bytes)))
            }
            None => (RunConfig { version: config::CONFIG_VERSION, ..Default::default() }, None),
        };
        let seed = cli.seed.or(cfg.seed).unwrap_or(0);
        let out = cli.out_dir.clone().or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| ".".into());
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { cfg, seed, out, config_hash })
    }

    fn path(&self, given: Option<&PathBuf>, default: &str) -> PathBuf {
        given.cloned().unwrap_or_else(|| self.out.join(default))
    }

    fn inputs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        if let Some(h) = &self.config_hash {
            m.insert("config".into(), h.clone());
        }
        m
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitKind> {
    if let Command::ExampleConfig = cli.command {
        print!("{EXAMPLE_KHALIL}");
        return Ok(ExitKind::Success);
    }
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Collect => cmd_collect(&ctx),
        Command::Ellipsoid { dataset } => cmd_ellipsoid(&ctx, dataset.as_ref()),
        Command::Synthesize(a) => cmd_synthesize(&ctx, a),
        Command::Verify { result, ellipsoid } => cmd_verify(&ctx, result.as_ref(), ellipsoid.as_ref()),
        Command::Eventsim(a) => cmd_eventsim(&ctx, a),
        Command::ExampleConfig => unreachable!(),
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn named(prefix: &str, names: &[String]) -> Vec<String> {
    names.iter().map(|n| format!("{prefix}{n}")).collect()
}

fn cmd_collect(ctx: &Ctx) -> anyhow::Result<ExitKind> {
    let spec = ctx.cfg.system.as_ref().ok_or_else(|| usage("collect needs a [system] table in the config"))?;
    let sys = spec.build().map_err(|e| usage(format!("invalid [system]: {e:#}")))?;
    let exp = ctx.cfg.experiment.to_core(ctx.seed);
    let (ds, trace) = collect_dataset(&sys, &exp)?;
    let file = DatasetFile::new(&ds, Some(spec.clone()), Some(ctx.seed), ctx.inputs());
    let path = ctx.out.join("dataset.json");
    write_json(&path, &file)?;

    let names = sys.vars.names();
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.extend((1..=sys.m()).map(|j| format!("u{j}")));
    let rows = trace.times.iter().zip(&trace.states).zip(&trace.inputs).map(|((t, x), u)| {
        let mut r = vec![*t];
        r.extend(x);
        r.extend(u);
        r
    });
    let csv_path = ctx.out.join("openloop.csv");
    write_csv(&csv_path, &header, rows)?;
    println!("collected {} samples (delta = {:e}) -> {}", ds.len(), ds.delta, path.display());
    println!("open-loop trace -> {}", csv_path.display());
    Ok(ExitKind::Success)
}

fn cmd_ellipsoid(ctx: &Ctx, dataset: Option<&PathBuf>) -> anyhow::Result<ExitKind> {
    let path = dataset
        .cloned()
        .or_else(|| ctx.cfg.dataset.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| ctx.out.join("dataset.json"));
    let loaded = load_json::<DatasetFile>(&path, "dataset").map_err(|e| usage(format!("{e:#}")))?;
    let ds = loaded.value.to_dataset().map_err(|e| usage(format!("invalid dataset: {e:#}")))?;
    let reg = build_regressors(&ds);
    let p = ds.p();
    println!("regressor rank {}/{}", reg.rank, p);
    if !reg.full_row_rank {
        eprintln!("warning: data matrix is not full row rank ({} < {p}); the ellipsoid may be unbounded", reg.rank);
    }
    let dm = build_data_matrices(&ds)?;
    let opts = OverapproxOptions { iters: ctx.cfg.ellipsoid.iters };
    let ov = solve_overapprox(&dm, opts, &InteriorPoint::new(SdpOptions::default()))?;
    let log_dets: Vec<f64> = ov.iterates.iter().map(|i| i.log_det).collect();
    println!("log det iterates: {}", log_dets.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "));
    let truth = loaded.value.ground_truth.clone();
    if let Some(spec) = &truth {
        let sys = spec.build()?;
        let ab = sys.ab();
        let inst = ds.samples.iter().filter(|s| membership_instantaneous(&ab, &ds, s).map(|m| m.pass).unwrap_or(false)).count();
        let mem = membership(&ab, &ov.ellipsoid, 1e-6)?;
        println!("ground truth: {inst}/{} samples consistent; ellipsoid residual {:.3e} ({})", ds.len(), mem.residual, pass(mem.pass));
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".to_string(), loaded.sha256.clone());
    let file = EllipsoidFile::from_ellipsoid(
        &ov.ellipsoid,
        loaded.value.bases.clone(),
        ov.tau.clone(),
        log_dets,
        (reg.rank, reg.full_row_rank),
        truth,
        inputs,
    );
    let out = ctx.out.join("ellipsoid.json");
    write_json(&out, &file)?;
    println!("ellipsoid -> {}", out.display());
    Ok(ExitKind::Success)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn cmd_synthesize(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<ExitKind> {
    let ell_path = ctx.path(a.ellipsoid.as_ref(), "ellipsoid.json");
    let loaded = load_json::<EllipsoidFile>(&ell_path, "ellipsoid").map_err(|e| usage(format!("{e:#}")))?;
    let ell = loaded.value.to_ellipsoid().map_err(|e| usage(format!("invalid ellipsoid: {e:#}")))?;
    let (vars, z, w) = loaded.value.bases.parse()?;

    let mut sect = ctx.cfg.synthesis.clone();
    if let Some(v) = a.deg_v {
        sect.deg_v = v;
    }
    if let Some(v) = a.deg_k {
        sect.deg_k = v;
    }
    if let Some(v) = a.deg_lambda {
        sect.deg_lambda = v;
    }
    if let Some(v) = a.rounds {
        sect.rounds = v;
    }
    if let Some(v) = a.epsilon {
        sect.epsilon = v;
    }
    if a.u_max.is_some() {
        sect.u_max = a.u_max.clone();
    }
    let k_init = if a.k_init.is_empty() { sect.k_init.clone() } else { Some(a.k_init.clone()) };
    let k_init = k_init.ok_or_else(|| usage("missing --k-init (or synthesis.k_init in the config)"))?;
    let verify = ctx.cfg.verify.to_core(ctx.seed);
    let cfg = sect.to_core(&vars, &k_init, verify).map_err(|e| usage(format!("{e:#}")))?;

    let res = alternate(&ell, (&z, &w), &cfg)?;
    for h in &res.history {
        let status = if h.feasible { format!("margin {:.3e}, residual {:.1e}", h.margin, h.max_residual) } else { "infeasible".into() };
        println!("round {} {:?}: {status}", h.round, h.step);
    }
    if let Some(v) = &res.verification {
        println!("{v}");
    }
    let mut inputs = ctx.inputs();
    inputs.insert("ellipsoid".into(), loaded.sha256.clone());
    let file = ResultFile::new(&res, loaded.value.bases.clone(), sect.u_max.clone(), loaded.value.ground_truth.clone(), inputs)?;
    println!("k(x) = {}", file.k.join(", "));
    println!("V(x) = {}", file.v);
    let out = ctx.out.join("result.json");
    write_json(&out, &file)?;
    println!("result -> {}", out.display());
    Ok(ExitKind::Success)
}

fn load_result(ctx: &Ctx, given: Option<&PathBuf>) -> anyhow::Result<(ResultFile, String)> {
    let path = ctx.path(given, "result.json");
    let loaded = load_json::<ResultFile>(&path, "result").map_err(|e| usage(format!("{e:#}")))?;
    Ok((loaded.value, loaded.sha256))
}

fn load_ellipsoid_for(ctx: &Ctx, given: Option<&PathBuf>, result: &ResultFile) -> anyhow::Result<EllipsoidFile> {
    let path = ctx.path(given, "ellipsoid.json");
    let loaded = load_json::<EllipsoidFile>(&path, "ellipsoid").map_err(|e| usage(format!("{e:#}")))?;
    check_provenance(&result.inputs, "ellipsoid", &loaded.sha256).map_err(|m| usage(format!("provenance error: {m}")))?;
    Ok(loaded.value)
}

fn cmd_verify(ctx: &Ctx, result: Option<&PathBuf>, ellipsoid: Option<&PathBuf>) -> anyhow::Result<ExitKind> {
    let (rf, _) = load_result(ctx, result)?;
    let ef = load_ellipsoid_for(ctx, ellipsoid, &rf)?;
    let ell = ef.to_ellipsoid()?;
    let res = rf.to_result().map_err(|e| usage(format!("invalid result: {e:#}")))?;
    let (_, z, w) = rf.bases.parse()?;
    let truth = rf.ground_truth.as_ref().or(ef.ground_truth.as_ref()).map(SystemSpec::build).transpose()?;
    let ab = truth.as_ref().map(GroundTruthSystem::ab);
    let suite = verify_result(&res, &ell, (&z, &w), rf.u_max()?.as_ref(), ab.as_ref(), &ctx.cfg.verify.to_core(ctx.seed));
    println!("{suite}");
    let out = ctx.out.join("verification.json");
    write_json(&out, &suite)?;
    println!("report -> {}", out.display());
    Ok(if suite.pass { ExitKind::Success } else { ExitKind::Verification })
}

#[derive(Debug, Serialize)]
struct EventSummary {
    dynamics: String,
    sigma: f64,
    x0: Vec<f64>,
    horizon: f64,
    events: usize,
    final_norm: f64,
    max_trigger_ratio: f64,
    /// Largest one-step increase of `V` along the trajectory.
    max_v_increase: f64,
}

fn cmd_eventsim(ctx: &Ctx, a: &EventArgs) -> anyhow::Result<ExitKind> {
    let (rf, _) = load_result(ctx, a.result.as_ref())?;
    let res = rf.to_result().map_err(|e| usage(format!("invalid result: {e:#}")))?;
    let (vars, z, w) = rf.bases.parse()?;
    let mut ec = ctx.cfg.eventsim.to_core();
    if let Some(s) = a.sigma {
        ec.sigma = s;
    }
    if let Some(x0) = &a.x0 {
        ec.x0 = x0.clone();
    }
    if let Some(t) = a.horizon {
        ec.horizon = t;
    }
    if let Some(h) = a.h {
        ec.h = h;
    }
    let (sys, label) = match &rf.ground_truth {
        Some(spec) => (spec.build()?, "ground truth".to_string()),
        None => {
            let ef = load_ellipsoid_for(ctx, a.ellipsoid.as_ref(), &rf)?;
            let ell = ef.to_ellipsoid()?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let scale: f64 = rng.gen_range(0.0..=1.0);
            let ups = random_contraction(&mut rng, ell.p(), ell.n(), scale);
            let ab = ell.member(&ups);
            let n = vars.len();
            let a_star = ab.columns(0, z.len()).into_owned();
            let b_star = ab.columns(z.len(), ab.ncols() - z.len()).into_owned();
            debug_assert_eq!(a_star.nrows(), n);
            (GroundTruthSystem::new(vars.clone(), a_star, b_star, z.clone(), w.clone())?, format!("ellipsoid member (seed {})", ctx.seed))
        }
    };
    let ab = sys.ab();
    let tr = event_triggered_run(member_field(&sys, &ab), &res.k, &res.alpha[2], &res.alpha[3], &ec)?;
    let summary = summarize(&tr, &res.v, &ec, label)?;
    write_trace(&ctx.out.join("eventsim.csv"), &tr, vars.names())?;
    write_json(&ctx.out.join("eventsim.json"), &summary)?;
    println!(
        "{}: {} events, final |x| = {:.3e}, max trigger ratio {:.4}, max V increase {:.2e}",
        summary.dynamics, summary.events, summary.final_norm, summary.max_trigger_ratio, summary.max_v_increase
    );
    println!("trace -> {}", ctx.out.join("eventsim.csv").display());
    Ok(ExitKind::Success)
}

fn summarize(
    tr: &EventTrace,
    v: &ddiss_core::poly::Polynomial,
    ec: &ddiss_core::simulate::EventConfig,
    dynamics: String,
) -> anyhow::Result<EventSummary> {
    let norms = state_norms(&tr.states);
    let vs: Vec<f64> = tr.states.iter().map(|x| v.eval(x)).collect::<Result<_, _>>()?;
    let max_v_increase = vs.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(EventSummary {
        dynamics,
        sigma: ec.sigma,
        x0: ec.x0.clone(),
        horizon: ec.horizon,
        events: tr.event_count(),
        final_norm: *norms.last().ok_or_else(|| anyhow!("empty trace"))?,
        max_trigger_ratio: tr.max_trigger_ratio(ec.sigma),
        max_v_increase: if vs.len() > 1 { max_v_increase } else { 0.0 },
    })
}

fn write_trace(path: &Path, tr: &EventTrace, names: &[String]) -> anyhow::Result<()> {
    let m = tr.inputs.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.extend((1..=m).map(|j| format!("u{j}")));
    header.extend(named("e_", names));
    header.extend(["alpha3", "alpha4", "event_flag"].map(String::from));
    let rows = (0..tr.times.len()).map(|i| {
        let mut r = vec![tr.times[i]];
        r.extend(&tr.states[i]);
        r.extend(&tr.inputs[i]);
        r.extend(&tr.errors[i]);
        r.extend([tr.alpha3[i], tr.alpha4[i], if tr.event_flags[i] { 1.0 } else { 0.0 }]);
        r
    });
    write_csv(path, &header, rows)
}
