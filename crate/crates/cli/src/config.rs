//! Run configuration (TOML). Every table is optional; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context};
use ddiss_core::consistency::OverapproxOptions;
use ddiss_core::poly::{PolyMatrix, Polynomial, VarSet};
use ddiss_core::simulate::{EventConfig, ExperimentConfig, GroundTruthSystem};
use ddiss_core::synthesis::SynthesisConfig;
use ddiss_core::verify::VerifyOptions;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::files::rows_to_matrix;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub system: Option<SystemSpec>,
    /// Existing dataset to use instead of simulating `system`.
    pub dataset: Option<String>,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub ellipsoid: EllipsoidSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub eventsim: EventSection,
}

/// Ground-truth `ẋ = A⋆ Z(x) + B⋆ W(x) u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub vars: Vec<String>,
    pub z_basis: Vec<String>,
    /// Rows of `W(x)`.
    pub w_basis: Vec<Vec<String>>,
    pub a_star: Vec<Vec<f64>>,
    pub b_star: Vec<Vec<f64>>,
}

impl SystemSpec {
    pub fn build(&self) -> anyhow::Result<GroundTruthSystem> {
        let vars = VarSet::new(&self.vars)?;
        let z = parse_polys(&self.z_basis, &vars).context("z_basis")?;
        let w = parse_poly_matrix(&self.w_basis, &vars).context("w_basis")?;
        let a = rows_to_matrix(&self.a_star).context("a_star")?;
        let b = rows_to_matrix(&self.b_star).context("b_star")?;
        Ok(GroundTruthSystem::new(vars, a, b, z, w)?)
    }

    pub fn from_system(sys: &GroundTruthSystem) -> Self {
        Self {
            vars: sys.vars.names().to_vec(),
            z_basis: sys.z_basis.iter().map(|p| p.display(&sys.vars).to_string()).collect(),
            w_basis: (0..sys.w_basis.rows())
                .map(|i| (0..sys.w_basis.cols()).map(|j| sys.w_basis.get(i, j).display(&sys.vars).to_string()).collect())
                .collect(),
            a_star: matrix_rows(&sys.a_star),
            b_star: matrix_rows(&sys.b_star),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub samples: usize,
    pub sample_spacing: f64,
    pub substeps: usize,
    pub u_bound: f64,
    pub d_radius: f64,
    pub x0: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            samples: d.samples,
            sample_spacing: d.sample_spacing,
            substeps: d.substeps,
            u_bound: d.u_bound,
            d_radius: d.d_radius,
            x0: d.x0,
        }
    }
}

impl ExperimentSection {
    pub fn to_core(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            samples: self.samples,
            sample_spacing: self.sample_spacing,
            substeps: self.substeps,
            u_bound: self.u_bound,
            d_radius: self.d_radius,
            x0: self.x0.clone(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipsoidSection {
    pub iters: usize,
}

impl Default for EllipsoidSection {
    fn default() -> Self {
        Self { iters: OverapproxOptions::default().iters }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub deg_v: u32,
    pub deg_k: u32,
    pub deg_lambda: u32,
    pub n_alpha: [usize; 4],
    pub epsilon: f64,
    pub rounds: usize,
    /// One polynomial per input, in the state variables.
    pub k_init: Option<Vec<String>>,
    pub u_max: Option<String>,
    /// `0` asks for a global certificate.
    pub region_radius: f64,
    pub deg_sigma: u32,
    pub margin_cap: f64,
    pub alpha_max: f64,
    /// `0` leaves the controller coefficients unbounded.
    pub k_coeff_max: f64,
    pub polish: bool,
    pub polish_steps: usize,
    pub sdp_tol: f64,
    pub sdp_max_iter: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let d = SynthesisConfig::new(Vec::new());
        Self {
            deg_v: d.deg_v,
            deg_k: d.deg_k,
            deg_lambda: d.deg_lambda,
            n_alpha: d.n_alpha,
            epsilon: d.epsilon,
            rounds: d.rounds,
            k_init: None,
            u_max: None,
            region_radius: d.region_radius.unwrap_or(0.0),
            deg_sigma: d.deg_sigma,
            margin_cap: d.margin_cap,
            alpha_max: d.alpha_max,
            k_coeff_max: d.k_coeff_max.unwrap_or(0.0),
            polish: d.polish,
            polish_steps: d.polish_steps,
            sdp_tol: d.sdp.tol,
            sdp_max_iter: d.sdp.max_iter,
        }
    }
}

impl SynthesisSection {
    /// Core configuration; `k_init` must already be resolved.
    pub fn to_core(&self, vars: &VarSet, k_init: &[String], verify: VerifyOptions) -> anyhow::Result<SynthesisConfig> {
        let k = parse_polys(k_init, vars).context("k_init")?;
        let mut cfg = SynthesisConfig::new(k);
        cfg.deg_v = self.deg_v;
        cfg.deg_k = self.deg_k;
        cfg.deg_lambda = self.deg_lambda;
        cfg.n_alpha = self.n_alpha;
        cfg.epsilon = self.epsilon;
        cfg.rounds = self.rounds;
        cfg.u_max = self.u_max.as_deref().map(|s| Polynomial::parse(s, vars)).transpose().context("u_max")?;
        cfg.region_radius = (self.region_radius > 0.0).then_some(self.region_radius);
        cfg.deg_sigma = self.deg_sigma;
        cfg.margin_cap = self.margin_cap;
        cfg.alpha_max = self.alpha_max;
        cfg.k_coeff_max = (self.k_coeff_max > 0.0).then_some(self.k_coeff_max);
        cfg.polish = self.polish;
        cfg.polish_steps = self.polish_steps;
        cfg.sdp.tol = self.sdp_tol;
        cfg.sdp.max_iter = self.sdp_max_iter;
        cfg.verify = verify;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    #[serde(rename = "box")]
    pub bx: f64,
    pub n_xe: usize,
    pub n_upsilon: usize,
    pub n_matrix: usize,
    pub n_sandwich: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let d = VerifyOptions::default();
        Self { bx: d.bx, n_xe: d.n_xe, n_upsilon: d.n_upsilon, n_matrix: d.n_matrix, n_sandwich: d.n_sandwich }
    }
}

impl VerifySection {
    pub fn to_core(&self, seed: u64) -> VerifyOptions {
        VerifyOptions {
            bx: self.bx,
            n_xe: self.n_xe,
            n_upsilon: self.n_upsilon,
            n_matrix: self.n_matrix,
            n_sandwich: self.n_sandwich,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSection {
    pub sigma: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub h: f64,
    pub storm_limit: usize,
}

impl Default for EventSection {
    fn default() -> Self {
        let d = EventConfig::default();
        Self { sigma: d.sigma, x0: d.x0, horizon: d.horizon, h: d.h, storm_limit: d.storm_limit }
    }
}

impl EventSection {
    pub fn to_core(&self) -> EventConfig {
        EventConfig {
            sigma: self.sigma,
            x0: self.x0.clone(),
            horizon: self.horizon,
            h: self.h,
            storm_limit: self.storm_limit,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The built-in default: the bundled example system with default parameters.
    pub fn example() -> Self {
        Self::parse(EXAMPLE_KHALIL).expect("bundled example parses")
    }
}

pub const EXAMPLE_KHALIL: &str = include_str!("../example-khalil.toml");

pub fn parse_polys(src: &[String], vars: &VarSet) -> anyhow::Result<Vec<Polynomial>> {
    src.iter()
        .map(|s| Polynomial::parse(s, vars).with_context(|| format!("polynomial `{s}`")))
        .collect()
}

pub fn parse_poly_matrix(rows: &[Vec<String>], vars: &VarSet) -> anyhow::Result<PolyMatrix> {
    let rows = rows.iter().map(|r| parse_polys(r, vars)).collect::<anyhow::Result<Vec<_>>>()?;
    Ok(PolyMatrix::from_rows(rows)?)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
