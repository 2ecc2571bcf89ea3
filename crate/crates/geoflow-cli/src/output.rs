//! Files written by the runner: `report.json`, energy traces and state
//! checkpoints in the field dump format of the core crate.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geoflow_core::diagnostics::EnergyTrace;
use geoflow_core::grid::{self, AnyField, Grid, ScalarField, TensorField, VectorField};
use geoflow_core::stepper::{ModelParams, SimState, TimeGrid, Trajectory};
use serde::{Deserialize, Serialize};

use crate::report::Report;

pub const ENERGY_COLUMNS: [&str; 13] = [
    "t",
    "E_kin",
    "E_el",
    "E_pf_grad",
    "E_pf_dw",
    "E_pf_sing",
    "E_total",
    "E_aux",
    "diss_visc",
    "diss_gamma",
    "diss_mix",
    "diss_plastic",
    "f_work",
];

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_energy_csv(path: &Path, trace: &EnergyTrace) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(ENERGY_COLUMNS)?;
    for r in &trace.rows {
        let p = &r.parts;
        let vals = [
            r.t,
            p.kinetic,
            p.elastic,
            p.gradient,
            p.double_well,
            p.singular,
            p.total,
            r.aux,
            r.diss_visc,
            r.diss_gamma,
            r.diss_mix,
            r.diss_plastic,
            r.f_work,
        ];
        w.write_record(vals.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar describing one run's checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub grid: Grid,
    pub params: ModelParams,
    pub time: TimeGrid,
    pub cadence: usize,
    pub steps: Vec<usize>,
}

const STATE_FIELDS: [&str; 7] = ["phi", "mu", "beta", "v", "s", "xi", "p"];

pub fn state_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step:05}"))
}

pub fn dump_state(dir: &Path, state: &SimState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fields = [
        AnyField::Scalar(state.phi.clone()),
        AnyField::Scalar(state.mu.clone()),
        AnyField::Scalar(state.beta.clone()),
        AnyField::Vector(state.v.clone()),
        AnyField::Tensor(state.s.clone()),
        AnyField::Tensor(state.xi.clone()),
        AnyField::Scalar(state.p.clone()),
    ];
    for (name, f) in STATE_FIELDS.iter().zip(&fields) {
        grid::dump_field(&dir.join(name), name, state.t, f)?;
    }
    Ok(())
}

fn scalar(dir: &Path, name: &str) -> Result<(f64, ScalarField)> {
    match grid::load_field(&dir.join(name))? {
        (m, AnyField::Scalar(f)) => Ok((m.time, f)),
        _ => bail!("{name} in {} is not a scalar field", dir.display()),
    }
}

fn vector(dir: &Path, name: &str) -> Result<VectorField> {
    match grid::load_field(&dir.join(name))? {
        (_, AnyField::Vector(f)) => Ok(f),
        _ => bail!("{name} in {} is not a vector field", dir.display()),
    }
}

fn tensor(dir: &Path, name: &str) -> Result<TensorField> {
    match grid::load_field(&dir.join(name))? {
        (_, AnyField::Tensor(f)) => Ok(f),
        _ => bail!("{name} in {} is not a tensor field", dir.display()),
    }
}

/// Reads a state written by [`dump_state`]. Values round-trip exactly.
pub fn load_state(dir: &Path) -> Result<SimState> {
    let (t, phi) = scalar(dir, "phi")?;
    let (_, mu) = scalar(dir, "mu")?;
    let (_, beta) = scalar(dir, "beta")?;
    let (_, p) = scalar(dir, "p")?;
    let state = SimState { t, phi, mu, beta, v: vector(dir, "v")?, s: tensor(dir, "s")?, xi: tensor(dir, "xi")?, p };
    let g = *state.grid();
    if [state.mu.grid, state.beta.grid, state.p.grid, state.v.grid, state.s.grid, state.xi.grid].iter().any(|h| *h != g) {
        bail!("fields in {} live on different grids", dir.display());
    }
    Ok(state)
}

/// Dumps every `cadence`-th state plus the last one and writes the manifest.
pub fn write_checkpoints(root: &Path, traj: &Trajectory, cadence: usize) -> Result<()> {
    if cadence == 0 {
        return Ok(());
    }
    let last = traj.states.len() - 1;
    let mut steps: Vec<usize> = (0..=last).step_by(cadence).collect();
    if steps.last() != Some(&last) {
        steps.push(last);
    }
    for &k in &steps {
        dump_state(&state_dir(root, k), &traj.states[k])?;
    }
    write_manifest(root, traj, cadence, steps)
}

pub fn write_manifest(root: &Path, traj: &Trajectory, cadence: usize, steps: Vec<usize>) -> Result<()> {
    fs::create_dir_all(root)?;
    let m = Manifest { version: crate::VERSION.to_string(), grid: traj.grid, params: traj.params.clone(), time: traj.time, cadence, steps };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(root.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}
