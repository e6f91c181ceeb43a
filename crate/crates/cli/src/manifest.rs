use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use smf_core::scenario::Scenario;

/// Provenance of a run. Identical `(input_hash, seed, version)` give
/// byte-identical result files; `wall_time_s` is informational.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub input_hash: String,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub wall_time_s: f64,
    pub threads: usize,
    pub tolerances: Tolerances,
}

#[derive(Debug, Serialize)]
pub struct Tolerances {
    pub control_set: f64,
    pub growth: f64,
    pub residual: f64,
    pub qp: f64,
    pub target: f64,
    pub matching: f64,
    pub feasibility: f64,
    pub dpp: f64,
    pub multiplier: f64,
    pub effort_search: f64,
}

impl Tolerances {
    fn current() -> Self {
        Tolerances {
            control_set: smf_core::dynamics::TOL_U,
            growth: smf_core::dynamics::TOL_GROWTH,
            residual: smf_core::magnitude::TOL_RESIDUAL,
            qp: smf_core::magnitude::TOL_QP,
            target: smf_core::measures::TOL_TARGET,
            matching: smf_core::measures::TOL_MATCH,
            feasibility: smf_core::ensemble::TOL_FEAS,
            dpp: smf_core::gdpp::TOL_DPP,
            multiplier: smf_core::hamiltonian::TOL_MULTIPLIER,
            effort_search: smf_core::solvers::TOL_EFFORT_SEARCH,
        }
    }
}

impl RunManifest {
    pub fn new(command: &'static str, canonical_input: &str, seed: Option<u64>, clock: Instant) -> Self {
        RunManifest {
            command,
            input_hash: format!("{:x}", Sha256::digest(canonical_input.as_bytes())),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            wall_time_s: clock.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            tolerances: Tolerances::current(),
        }
    }

    pub fn for_scenario(command: &'static str, sc: &Scenario, clock: Instant) -> Self {
        Self::new(command, &sc.canonical_json(), Some(sc.solver.seed), clock)
    }

    /// `out.json` gets `out.manifest.json`.
    pub fn path_beside(out: &Path) -> PathBuf {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn write_beside(&self, out: &Path) -> Result<(), String> {
        let path = Self::path_beside(out);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}
