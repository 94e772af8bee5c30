#![allow(dead_code)]

use std::sync::OnceLock;

use ddiss_core::consistency::{build_data_matrices, solve_overapprox, Dataset, Overapprox, OverapproxOptions};
use ddiss_core::poly::{Polynomial, VarSet};
use ddiss_core::sdp::{InteriorPoint, SdpOptions};
use ddiss_core::simulate::{collect_dataset, ExperimentConfig, GroundTruthSystem};
use ddiss_core::synthesis::{alternate, SynthesisConfig, SynthesisResult};

pub struct Khalil {
    pub sys: GroundTruthSystem,
    pub ds: Dataset,
    pub ov: Overapprox,
    pub cfg: SynthesisConfig,
    pub res: SynthesisResult,
}

pub fn initial_k() -> Vec<Polynomial> {
    vec![Polynomial::parse("-x1^3 - 8*x2", &VarSet::states(2)).unwrap()]
}

pub fn khalil_data(seed: u64) -> (GroundTruthSystem, Dataset, Overapprox) {
    let sys = GroundTruthSystem::khalil();
    let exp = ExperimentConfig { seed, ..Default::default() };
    let (ds, _) = collect_dataset(&sys, &exp).unwrap();
    let dm = build_data_matrices(&ds).unwrap();
    let ov = solve_overapprox(&dm, OverapproxOptions::default(), &InteriorPoint::new(SdpOptions::default())).unwrap();
    (sys, ds, ov)
}

/// Seed-0 run shared by every test in a binary.
pub fn khalil() -> &'static Khalil {
    static CELL: OnceLock<Khalil> = OnceLock::new();
    CELL.get_or_init(|| {
        let (sys, ds, ov) = khalil_data(0);
        let cfg = SynthesisConfig::new(initial_k());
        let res = alternate(&ov.ellipsoid, (&ds.z_basis, &ds.w_basis), &cfg).unwrap();
        Khalil { sys, ds, ov, cfg, res }
    })
}
