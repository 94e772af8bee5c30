//! Stage files: JSON documents with text polynomials and row-major matrices.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use ddiss_core::consistency::{ellipsoid_params, ConsistencyEllipsoid, Dataset, Sample};
use ddiss_core::poly::{Monomial, PolyMatrix, Polynomial, VarSet};
use ddiss_core::sos::Certificate;
use ddiss_core::synthesis::{ClassKInf, StepRecord, SynthesisResult};
use ddiss_core::verify::VerificationSuite;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{matrix_rows, parse_poly_matrix, parse_polys, SystemSpec};

pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        bail!("ragged matrix rows");
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn poly_text(p: &Polynomial, vars: &VarSet) -> String {
    p.display(vars).to_string()
}

/// Input file read once, so its hash matches the bytes actually parsed.
pub struct Loaded<T> {
    pub value: T,
    pub sha256: String,
}

pub fn load_json<T: DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<Loaded<T>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {what} {}", path.display()))?;
    let value = serde_json::from_slice(&bytes).map_err(|e| {
        anyhow!("{what} {}: parse error at line {}, column {}: {e}", path.display(), e.line(), e.column())
    })?;
    Ok(Loaded { value, sha256: sha256_hex(&bytes) })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_format(kind: &str, expected: &str, version: u32) -> anyhow::Result<()> {
    if kind != expected {
        bail!("expected a `{expected}` file, found `{kind}`");
    }
    if version != FORMAT_VERSION {
        bail!("unsupported {expected} version {version}");
    }
    Ok(())
}

/// State variables, `Z` and `W` shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    #[serde(rename = "variables")]
    pub vars: Vec<String>,
    #[serde(rename = "Z_basis")]
    pub z_basis: Vec<String>,
    /// Rows of `W(x)`.
    #[serde(rename = "W_basis")]
    pub w_basis: Vec<Vec<String>>,
}

impl Bases {
    pub fn new(vars: &VarSet, z: &[Polynomial], w: &PolyMatrix) -> Self {
        Self {
            vars: vars.names().to_vec(),
            z_basis: z.iter().map(|p| poly_text(p, vars)).collect(),
            w_basis: (0..w.rows()).map(|i| (0..w.cols()).map(|j| poly_text(w.get(i, j), vars)).collect()).collect(),
        }
    }

    pub fn parse(&self) -> anyhow::Result<(VarSet, Vec<Polynomial>, PolyMatrix)> {
        let vars = VarSet::new(&self.vars)?;
        let z = parse_polys(&self.z_basis, &vars)?;
        let w = parse_poly_matrix(&self.w_basis, &vars)?;
        Ok((vars, z, w))
    }

    /// State names followed by one error name per state.
    pub fn xe_vars(&self) -> anyhow::Result<VarSet> {
        let mut names = self.vars.clone();
        for v in &self.vars {
            let mut e = format!("e_{v}");
            while names.contains(&e) {
                e.insert(0, '_');
            }
            names.push(e);
        }
        Ok(VarSet::new(&names)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub bases: Bases,
    pub delta: f64,
    pub samples: Vec<Sample>,
    pub ground_truth: Option<SystemSpec>,
    pub seed: Option<u64>,
    /// Input name → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl DatasetFile {
    pub const KIND: &'static str = "ddiss-dataset";

    pub fn new(ds: &Dataset, truth: Option<SystemSpec>, seed: Option<u64>, inputs: BTreeMap<String, String>) -> Self {
        Self {
            format: Self::KIND.into(),
            version: FORMAT_VERSION,
            bases: Bases::new(&ds.vars, &ds.z_basis, &ds.w_basis),
            delta: ds.delta,
            samples: ds.samples.clone(),
            ground_truth: truth,
            seed,
            inputs,
        }
    }

    pub fn to_dataset(&self) -> anyhow::Result<Dataset> {
        check_format(&self.format, Self::KIND, self.version)?;
        let (vars, z, w) = self.bases.parse()?;
        Ok(Dataset::new(vars, self.delta, z, w, self.samples.clone())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidFile {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub bases: Bases,
    #[serde(rename = "A_bar")]
    pub a_bar: Vec<Vec<f64>>,
    #[serde(rename = "B_bar")]
    pub b_bar: Vec<Vec<f64>>,
    /// Derived from `Ā`, `B̄` for reference; recomputed on load.
    pub zeta_bar: Vec<Vec<f64>>,
    #[serde(rename = "Q_bar")]
    pub q_bar: Vec<Vec<f64>>,
    #[serde(rename = "A_bar_inv_sqrt")]
    pub a_bar_inv_sqrt: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub log_det_iterates: Vec<f64>,
    pub rank: usize,
    pub full_row_rank: bool,
    pub ground_truth: Option<SystemSpec>,
    pub inputs: BTreeMap<String, String>,
}

impl EllipsoidFile {
    pub const KIND: &'static str = "ddiss-ellipsoid";

    pub fn to_ellipsoid(&self) -> anyhow::Result<ConsistencyEllipsoid> {
        check_format(&self.format, Self::KIND, self.version)?;
        Ok(ellipsoid_params(&rows_to_matrix(&self.a_bar)?, &rows_to_matrix(&self.b_bar)?)?)
    }

    pub fn from_ellipsoid(
        ell: &ConsistencyEllipsoid,
        bases: Bases,
        tau: Vec<f64>,
        log_det_iterates: Vec<f64>,
        rank: (usize, bool),
        ground_truth: Option<SystemSpec>,
        inputs: BTreeMap<String, String>,
    ) -> Self {
        Self {
            format: Self::KIND.into(),
            version: FORMAT_VERSION,
            bases,
            a_bar: matrix_rows(&ell.a_bar),
            b_bar: matrix_rows(&ell.b_bar),
            zeta_bar: matrix_rows(&ell.zeta_bar),
            q_bar: matrix_rows(&ell.q_bar),
            a_bar_inv_sqrt: matrix_rows(&ell.a_bar_inv_sqrt),
            tau,
            log_det_iterates,
            rank: rank.0,
            full_row_rank: rank.1,
            ground_truth,
            inputs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub name: String,
    /// Row bases as exponent vectors in `(x, e)`.
    pub bases: Vec<Vec<Vec<u32>>>,
    pub gram: Vec<Vec<f64>>,
    pub factor: Vec<Vec<f64>>,
    pub min_eig: f64,
    pub residual: f64,
}

impl CertificateFile {
    fn new(c: &Certificate) -> Self {
        Self {
            name: c.name.clone(),
            bases: c.bases.iter().map(|b| b.iter().map(|m| m.exps().to_vec()).collect()).collect(),
            gram: matrix_rows(&c.gram),
            factor: matrix_rows(&c.factor),
            min_eig: c.min_eig,
            residual: c.residual,
        }
    }

    fn to_core(&self) -> anyhow::Result<Certificate> {
        Ok(Certificate {
            name: self.name.clone(),
            bases: self.bases.iter().map(|b| b.iter().map(|e| Monomial::new(e.clone())).collect()).collect(),
            gram: rows_to_matrix(&self.gram)?,
            factor: rows_to_matrix(&self.factor)?,
            min_eig: self.min_eig,
            residual: self.residual,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub bases: Bases,
    pub k: Vec<String>,
    #[serde(rename = "V")]
    pub v: String,
    /// Coefficients `c_ik` of `α_i(r) = Σ_k c_ik r^{2k}`.
    pub alpha: [Vec<f64>; 4],
    /// In the state variables followed by the error variables.
    pub lambda: String,
    pub sigma: Option<String>,
    pub region_radius: Option<f64>,
    pub epsilon: f64,
    pub margin: f64,
    pub u_max: Option<String>,
    pub certificates: Vec<CertificateFile>,
    pub history: Vec<StepRecord>,
    pub verification: Option<VerificationSuite>,
    pub ground_truth: Option<SystemSpec>,
    pub inputs: BTreeMap<String, String>,
}

impl ResultFile {
    pub const KIND: &'static str = "ddiss-result";

    pub fn new(
        res: &SynthesisResult,
        bases: Bases,
        u_max: Option<String>,
        ground_truth: Option<SystemSpec>,
        inputs: BTreeMap<String, String>,
    ) -> anyhow::Result<Self> {
        let (vars, _, _) = bases.parse()?;
        let xe = bases.xe_vars()?;
        Ok(Self {
            format: Self::KIND.into(),
            version: FORMAT_VERSION,
            k: res.k.iter().map(|p| poly_text(p, &vars)).collect(),
            v: poly_text(&res.v, &vars),
            alpha: res.alpha.clone().map(|a| a.coeffs().to_vec()),
            lambda: poly_text(&res.lambda, &xe),
            sigma: res.sigma.as_ref().map(|s| poly_text(s, &xe)),
            region_radius: res.region_radius,
            epsilon: res.epsilon,
            margin: res.margin,
            u_max,
            certificates: res.certificates.iter().map(CertificateFile::new).collect(),
            history: res.history.clone(),
            verification: res.verification.clone(),
            ground_truth,
            inputs,
            bases,
        })
    }

    pub fn to_result(&self) -> anyhow::Result<SynthesisResult> {
        check_format(&self.format, Self::KIND, self.version)?;
        let (vars, _, _) = self.bases.parse()?;
        let xe = self.bases.xe_vars()?;
        let alpha: Vec<ClassKInf> = self
            .alpha
            .iter()
            .map(|c| ClassKInf::new(c.clone(), self.epsilon))
            .collect::<Result<_, _>>()?;
        Ok(SynthesisResult {
            vars: vars.clone(),
            k: parse_polys(&self.k, &vars)?,
            v: Polynomial::parse(&self.v, &vars)?,
            alpha: alpha.try_into().map_err(|_| anyhow!("expected four comparison functions"))?,
            lambda: Polynomial::parse(&self.lambda, &xe)?,
            sigma: self.sigma.as_deref().map(|s| Polynomial::parse(s, &xe)).transpose()?,
            region_radius: self.region_radius,
            certificates: self.certificates.iter().map(CertificateFile::to_core).collect::<anyhow::Result<_>>()?,
            epsilon: self.epsilon,
            margin: self.margin,
            history: self.history.clone(),
            verification: self.verification.clone(),
        })
    }

    pub fn u_max(&self) -> anyhow::Result<Option<Polynomial>> {
        let (vars, _, _) = self.bases.parse()?;
        Ok(self.u_max.as_deref().map(|s| Polynomial::parse(s, &vars)).transpose()?)
    }
}

/// Fails unless `recorded` (from a stage file) matches the hash of the file actually supplied.
pub fn check_provenance(inputs: &BTreeMap<String, String>, key: &str, supplied: &str) -> Result<(), String> {
    match inputs.get(key) {
        Some(h) if h == supplied => Ok(()),
        Some(h) => Err(format!("{key} hash mismatch: file was produced from {h}, but the supplied {key} hashes to {supplied}")),
        None => Ok(()),
    }
}
