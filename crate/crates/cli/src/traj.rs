//! Reads trajectory dumps back into ensembles.

use std::fs;
use std::path::Path;

use smf_core::ensemble::{integrate, Ensemble, TimeGrid};
use smf_core::scenario::Scenario;

/// Re-integrates the controls of a dump from the scenario's initial measure.
pub fn read_trajectory(path: &Path, sc: &Scenario) -> Result<Ensemble, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let d = sc.sys.dim();
    let m = sc.sys.control_dim();
    let n = sc.mu0.len();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty trajectory file")?.split(',').collect();
    if header.len() != 2 + d + m + 3 || header[0] != "t" || header[1] != "particle_id" {
        return Err(format!("{}: header does not match a d = {d}, m = {m} system", path.display()));
    }
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(format!("{}: line {} has {} fields", path.display(), no + 2, fields.len()));
        }
        let num = |j: usize| -> Result<f64, String> {
            fields[j].trim().parse::<f64>().map_err(|e| format!("{}: line {}: {e}", path.display(), no + 2))
        };
        let t = num(0)?;
        let u: Vec<f64> = (0..m).map(|j| num(2 + d + j)).collect::<Result<_, _>>()?;
        let zeta = num(2 + d + m + 1)?;
        rows.push((t, u, zeta));
    }
    if rows.is_empty() || rows.len() % n != 0 {
        return Err(format!("{}: {} rows for {n} particles", path.display(), rows.len()));
    }
    let steps = rows.len() / n - 1;
    let controls: Vec<Vec<Vec<f64>>> = (0..n).map(|i| (0..steps).map(|k| rows[k * n + i].1.clone()).collect()).collect();
    let offsets: Vec<f64> = (0..n).map(|i| rows[i].2).collect();
    let grid = TimeGrid::new(rows[0].0, rows[steps * n].0, steps).map_err(|e| e.to_string())?;
    integrate(&sc.sys, &sc.mu0, &controls, grid, Some(&offsets)).map_err(|e| e.to_string())
}
