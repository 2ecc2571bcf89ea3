//! Experiment runner for the geoflow solver: configuration, the named
//! commands and their output files.

pub mod config;
pub mod experiments;
pub mod output;
pub mod report;

use std::path::Path;

use anyhow::Result;
use geoflow_core::grid::{self, Boundary, Grid, ScalarField, TensorField, VectorField};
use geoflow_core::{diagnostics, ops};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::experiments::Outcome;
use crate::report::{Check, Report, Tolerances};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("GEOFLOW_GIT_DESCRIBE"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Command {
    EdeCheck,
    EvsBattery,
    AlphaSweep,
    GammaSweep,
    Mosco,
    ProxOracle,
    Semiflow,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::EdeCheck,
        Command::EvsBattery,
        Command::AlphaSweep,
        Command::GammaSweep,
        Command::Mosco,
        Command::ProxOracle,
        Command::Semiflow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::EdeCheck => "ede_check",
            Command::EvsBattery => "evs_battery",
            Command::AlphaSweep => "alpha_sweep",
            Command::GammaSweep => "gamma_sweep",
            Command::Mosco => "mosco",
            Command::ProxOracle => "prox_oracle",
            Command::Semiflow => "semiflow",
        }
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Runs one command without touching the filesystem, except for the
/// restart files of `semiflow`, which go under `workdir`.
pub fn execute(cmd: Command, cfg: &RunConfig, workdir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    match cmd {
        Command::EdeCheck => experiments::ede_check(cfg),
        Command::EvsBattery => experiments::evs_battery(cfg),
        Command::AlphaSweep => experiments::alpha_sweep(cfg),
        Command::GammaSweep => experiments::gamma_sweep(cfg),
        Command::Mosco => experiments::mosco(cfg),
        Command::ProxOracle => experiments::prox_oracle(cfg),
        Command::Semiflow => experiments::semiflow(cfg, workdir),
    }
}

/// Runs a command on `workers` threads (0 picks the default) and writes
/// `report.json`, the energy traces and any checkpoints under `out`.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path, workers: usize) -> Result<Report> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let outcome = pool.install(|| execute(cmd, cfg, out))?;
    write_outcome(&outcome, cfg, out)?;
    Ok(outcome.report)
}

pub fn write_outcome(outcome: &Outcome, cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for r in &outcome.runs {
        let dir = if r.label.is_empty() { out.to_path_buf() } else { out.join("runs").join(&r.label) };
        output::write_energy_csv(&dir.join("energy.csv"), &r.trace)?;
        output::write_checkpoints(&dir.join("checkpoints"), &r.traj, cfg.output.checkpoint_every)?;
    }
    output::write_report(out, &outcome.report)
}

fn smooth_fields(g: Grid, seed: u64) -> (TensorField, VectorField, TensorField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeffs = || -> [f64; 4] { std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
    let (a, b, c) = (coeffs(), coeffs(), coeffs());
    let pi = std::f64::consts::PI;
    let wave = move |k: [f64; 4], x: f64, y: f64| k[0] * (pi * x).cos() * (pi * y).cos() + k[1] * (2.0 * pi * x).sin() * (pi * y).cos() + k[2] * x * y + k[3];
    let tensor = |k: [f64; 4], l: [f64; 4]| {
        let xx = ScalarField::from_fn(g, Boundary::Neumann, |x, y| wave(k, x, y)).values;
        let xy = ScalarField::from_fn(g, Boundary::Neumann, |x, y| wave(l, y, x)).values;
        TensorField::from_components(g, Boundary::Neumann, xx, xy).expect("matching lengths")
    };
    // Stream function vanishing on the walls gives a wall-compatible velocity.
    let psi = ScalarField::from_fn(g, Boundary::Dirichlet, |x, y| {
        let bump = (pi * x).sin().powi(2) * (pi * y).sin().powi(2);
        bump * (1.0 + 0.5 * wave(b, x, y))
    });
    let v = VectorField::curl_of(&psi);
    (tensor(a, c), v, tensor(c, b))
}

/// Algebraic identities of the discrete operators: the corotational term is
/// energy-neutral, the velocity gradient splits exactly into symmetric and
/// skew parts, the projection is idempotent and the integration-by-parts form
/// of the Jaumann pairing converges under refinement.
pub fn structural_identities(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let g = Grid::unit_square(32)?;
    let (s, v, _) = smooth_fields(g, seed);

    let w = ops::spin(&v);
    let neutral = grid::inner_tensor(&ops::jaumann(&s, &w), &s);
    let scale = grid::norm_tensor(&s).powi(2) * linalg_max(&w);
    checks.push(Check::new("structure.jaumann_neutral", -neutral.abs(), Tolerances::solver(1e-13 * (1.0 + scale))));

    let gv = grid::velocity_gradient(&v);
    let (sym, spin) = grid::sym_skw_split(&gv);
    let split = (0..g.len())
        .map(|k| (sym.xy[k] + spin[k] - gv.xy[k]).abs().max((sym.xy[k] - spin[k] - gv.yx[k]).abs()))
        .fold(0.0, f64::max);
    checks.push(Check::new("structure.sym_skw_split", -split, Tolerances::solver(1e-12 * (1.0 + linalg_max(&gv.xy)))));

    let raw = VectorField { x: v.x.iter().zip(&s.xx).map(|(a, b)| a + b).collect(), ..v.clone() };
    let p1 = grid::leray_project(&raw)?;
    let p2 = grid::leray_project(&p1)?;
    let drift = p1.x.iter().chain(&p1.y).zip(p2.x.iter().chain(&p2.y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(Check::new("structure.leray_idempotent", -drift, Tolerances::solver(1e-10)));
    let div = grid::divergence(&p1).max_abs();
    checks.push(Check::new("structure.leray_divergence_free", -div, Tolerances::solver(1e-10)));

    // First-order convergence of the summation-by-parts gap.
    let mut gaps = Vec::new();
    for n in [16, 32, 64] {
        let g = Grid::unit_square(n)?;
        let (s, v, t) = smooth_fields(g, seed);
        let (lhs, rhs) = diagnostics::jaumann_parts_residual(&s, &v, &t);
        gaps.push((lhs - rhs).abs());
    }
    let rates: Vec<f64> = gaps.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let rate = rates.iter().copied().fold(f64::INFINITY, f64::min);
    checks.push(Check::new("structure.jaumann_parts_rate", rate - 0.8, Tolerances::solver(0.0)));
    Ok(checks)
}

fn linalg_max(x: &[f64]) -> f64 {
    geoflow_core::linalg::max_abs(x)
}
