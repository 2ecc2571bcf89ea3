//! The named experiments. Each returns a report plus the trajectories it
//! produced; writing files is left to the caller.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use geoflow_core::diagnostics::{
    self, auxiliary_energy, dissipative_ledger, estimate_korn, evs_ledger, make_battery, richardson_tolerance, sample_indices,
    sample_pairs, solver_tolerance, total_energy, uniform_bounds, EnergyTrace, KornEstimate, RegularityWeight, TestTuple,
    UniformBounds,
};
use geoflow_core::grid::{self, Grid, ScalarField};
use geoflow_core::plasticity::{frob, PlasticPotential};
use geoflow_core::potentials::{self, PhaseModel};
use geoflow_core::stepper::{initial_state, run, Forcing, SimState, TimeGrid, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output;
use crate::report::{Check, Report, Tolerances};
use crate::Command;

/// A finished trajectory and its energy trace. An empty label marks the
/// primary run of a command.
pub struct RunOutput {
    pub label: String,
    pub traj: Trajectory,
    pub trace: EnergyTrace,
}

pub struct Outcome {
    pub report: Report,
    pub runs: Vec<RunOutput>,
}

pub fn simulate(cfg: &RunConfig) -> Result<Trajectory> {
    let g = cfg.grid.build()?;
    let s0 = initial_state(&g, &cfg.params, &cfg.initial, cfg.seed)?;
    Ok(run(&s0, &cfg.params, &cfg.solver, &cfg.time, &cfg.forcing)?)
}

/// Runs independent configurations in parallel, keeping their order.
pub fn simulate_all(cfgs: &[RunConfig]) -> Result<Vec<Trajectory>> {
    cfgs.par_iter().map(simulate).collect()
}

fn with_half_step(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.time = c.time.refined();
    c
}

fn with_half_cell(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.grid.nx *= 2;
    c.grid.ny *= 2;
    c
}

fn plain_trace(traj: &Trajectory) -> Result<EnergyTrace> {
    Ok(auxiliary_energy(traj, 0.0)?)
}

fn output_of(label: &str, traj: Trajectory) -> Result<RunOutput> {
    let trace = plain_trace(&traj)?;
    Ok(RunOutput { label: label.to_string(), traj, trace })
}

#[derive(Clone, Debug, Serialize)]
struct RunSummary {
    label: String,
    steps: usize,
    energy_start: f64,
    energy_end: f64,
    min_slack: f64,
    max_abs_defect: f64,
    min_defect: f64,
    max_outer_iterations: usize,
    newton_iterations: usize,
}

fn summarise(label: &str, traj: &Trajectory) -> RunSummary {
    let r = &traj.reports;
    RunSummary {
        label: label.to_string(),
        steps: r.len(),
        energy_start: r.first().map_or(f64::NAN, |x| x.energy_before.total),
        energy_end: r.last().map_or(f64::NAN, |x| x.energy_after.total),
        min_slack: r.iter().map(|x| x.slack).fold(f64::INFINITY, f64::min),
        max_abs_defect: r.iter().map(|x| x.defect.abs()).fold(0.0, f64::max),
        min_defect: r.iter().map(|x| x.defect).fold(f64::INFINITY, f64::min),
        max_outer_iterations: r.iter().map(|x| x.outer_iterations).max().unwrap_or(0),
        newton_iterations: r.iter().map(|x| x.newton_iterations).sum(),
    }
}

/// Per-step energy-dissipation checks, tolerance scaled by the energy.
fn ede_checks(prefix: &str, traj: &Trajectory) -> Vec<Check> {
    traj.reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            Check::new(format!("{prefix}ede_step"), r.slack, Tolerances::solver(solver_tolerance(r.energy_before.total)))
                .over(traj.time.time(k), traj.time.time(k + 1))
        })
        .collect()
}

fn max_energy(traj: &Trajectory) -> f64 {
    traj.reports.iter().map(|r| r.energy_before.total.abs().max(r.energy_after.total.abs())).fold(0.0, f64::max)
}

fn max_defect(traj: &Trajectory) -> f64 {
    traj.reports.iter().map(|r| r.defect.abs()).fold(0.0, f64::max)
}

/// Korn constant and the weight it induces for the configured model.
fn weight_for(cfg: &RunConfig, g: &Grid) -> Result<(RegularityWeight, Option<KornEstimate>)> {
    if cfg.params.materials.stress_diffusion > 0.0 {
        Ok((RegularityWeight::Zero, None))
    } else {
        let k = estimate_korn(g, cfg.seed)?;
        Ok((RegularityWeight::for_model(&cfg.params, k.constant), Some(k)))
    }
}

// ---------------------------------------------------------------------------
// Energy-dissipation check

pub fn ede_check(cfg: &RunConfig) -> Result<Outcome> {
    let g = cfg.grid.build()?;
    let mut report = Report::new(Command::EdeCheck, cfg);

    let mut jobs = vec![cfg.clone()];
    let unforced = cfg.ede.unforced_run && cfg.forcing != Forcing::None;
    if unforced {
        let mut c = cfg.clone();
        c.forcing = Forcing::None;
        jobs.push(c);
    }
    if let Some(t) = cfg.ede.control_tolerance {
        let mut c = cfg.clone();
        c.solver.outer_tol = t;
        c.solver.linear_tol = t;
        c.solver.newton_tol = t;
        jobs.push(c);
    }
    let (trajs, korn) = rayon::join(|| simulate_all(&jobs), || estimate_korn(&g, cfg.seed));
    let mut trajs = trajs?.into_iter();
    let korn = korn?;
    let main = trajs.next().context("primary run missing")?;

    report.extend(ede_checks("", &main));
    let e_max = max_energy(&main);
    let defect = max_defect(&main);
    report.push(Check::new("energy_identity", -defect, Tolerances::solver(solver_tolerance(e_max))));

    // Forcing-compensated energy with the Korn-based coefficient.
    let coefficient = korn.constant / cfg.params.materials.viscosity_floor();
    let trace = auxiliary_energy(&main, coefficient)?;
    report.push(Check::new("energy_decomposition", -trace.monotone_violation, Tolerances::solver(1e-8)));
    report.push(Check::new("energy_majorisation", trace.majorisation_gap, Tolerances::solver(0.0)));
    if cfg.forcing == Forcing::None {
        report.push(Check::new("energy_monotone", -trace.aux_increase.max(0.0), Tolerances::solver(1e-8)));
    }
    let mut summaries = vec![summarise("default", &main)];
    let mut runs = vec![RunOutput { label: String::new(), traj: main, trace }];

    if unforced {
        let t0 = trajs.next().context("unforced run missing")?;
        report.extend(ede_checks("unforced.", &t0));
        let tr = plain_trace(&t0)?;
        report.push(Check::new("unforced.energy_monotone", -tr.aux_increase.max(0.0), Tolerances::solver(1e-8)));
        summaries.push(summarise("unforced", &t0));
        runs.push(RunOutput { label: "unforced".into(), traj: t0, trace: tr });
    }
    if cfg.ede.control_tolerance.is_some() {
        let tc = trajs.next().context("control run missing")?;
        let control = max_defect(&tc);
        // The loosened run must show a clearly larger defect in the
        // energy identity than the default one.
        report.push(Check::new("negative_control", control - cfg.ede.control_factor * defect.max(f64::MIN_POSITIVE), Tolerances::solver(0.0)));
        summaries.push(summarise("control", &tc));
        runs.push(output_of("control", tc)?);
    }
    report.table("runs", &summaries);
    report.table("korn", korn);
    report.table("aux_coefficient", coefficient);
    Ok(Outcome { report, runs })
}

// ---------------------------------------------------------------------------
// Test-tuple batteries

/// A trajectory with its two refinements, used to size discretisation
/// tolerances by Richardson extrapolation.
pub struct Trio<'a> {
    pub base: &'a Trajectory,
    pub half_step: &'a Trajectory,
    pub half_cell: &'a Trajectory,
}

#[derive(Clone, Debug, Serialize)]
pub struct TupleRow {
    pub tuple_id: String,
    pub pairs: usize,
    /// Smallest `slack + tolerance` over the pairs.
    pub evs_margin: f64,
    pub dissipative_margin: f64,
    pub max_discretization_tolerance: f64,
    pub min_relative_energy: f64,
    /// Pairs where the variational check passed but the dissipative slack
    /// exceeds the numerical value of the variational budget. Informational:
    /// the dissipative evaluator carries a larger spatial error.
    pub outside_variational_budget: usize,
}

/// Evaluates both inequalities for every tuple and sampled interval of
/// `subject`, whose step `k` corresponds to step `k + shift` of `trio.base`.
pub fn battery(prefix: &str, trio: &Trio, subject: &Trajectory, shift: usize, tuples: &[TestTuple], weight: &RegularityWeight, cfg: &RunConfig) -> Result<(Vec<Check>, Vec<TupleRow>)> {
    let steps = subject.reports.len();
    ensure!(trio.base.reports.len() >= steps + shift, "refinement runs shorter than the subject");
    ensure!(trio.half_step.reports.len() == 2 * trio.base.reports.len(), "time refinement must halve the step");
    let pairs = sample_pairs(&sample_indices(steps, cfg.evs.sample_points));
    let floor = cfg.evs.tolerance_floor;
    let per_tuple: Vec<Result<(Vec<Check>, TupleRow)>> = tuples
        .par_iter()
        .map(|tt| {
            let id = tt.id.as_str();
            let mut checks = Vec::new();
            let adm = diagnostics::check_tuple(tt, &subject.grid, &subject.params);
            checks.push(Check::flag(format!("{prefix}tuple_admissible"), adm.is_ok()).tuple(id));
            if adm.is_err() {
                let row = TupleRow { tuple_id: id.into(), pairs: 0, evs_margin: f64::NAN, dissipative_margin: f64::NAN, max_discretization_tolerance: f64::NAN, min_relative_energy: f64::NAN, outside_variational_budget: 0 };
                return Ok((checks, row));
            }
            let evs = [evs_ledger(subject, tt, weight)?, evs_ledger(trio.base, tt, weight)?, evs_ledger(trio.half_step, tt, weight)?, evs_ledger(trio.half_cell, tt, weight)?];
            let dis = [
                dissipative_ledger(subject, tt, weight)?,
                dissipative_ledger(trio.base, tt, weight)?,
                dissipative_ledger(trio.half_step, tt, weight)?,
                dissipative_ledger(trio.half_cell, tt, weight)?,
            ];
            let mut row = TupleRow {
                tuple_id: id.into(),
                pairs: pairs.len(),
                evs_margin: f64::INFINITY,
                dissipative_margin: f64::INFINITY,
                max_discretization_tolerance: 0.0,
                min_relative_energy: dis[0].min_relative,
                outside_variational_budget: 0,
            };
            let mut implied = true;
            for &(a, b) in &pairs {
                let (ia, ib) = (a + shift, b + shift);
                let (t0, t1) = (subject.time.time(a), subject.time.time(b));
                let solver = solver_tolerance(evs[0].energy[a]);

                let s = evs[0].slack(a, b);
                let disc = richardson_tolerance(evs[1].slack(ia, ib), evs[2].slack(2 * ia, 2 * ib), evs[3].slack(ia, ib)) + floor;
                let ce = Check::new(format!("{prefix}evs"), s, Tolerances { solver, discretization: disc }).over(t0, t1).tuple(id);
                row.evs_margin = row.evs_margin.min(s + solver + disc);
                row.max_discretization_tolerance = row.max_discretization_tolerance.max(disc);

                let d = dis[0].slack(a, b);
                let ddisc = richardson_tolerance(dis[1].slack(ia, ib), dis[2].slack(2 * ia, 2 * ib), dis[3].slack(ia, ib)) + floor;
                let cd = Check::new(format!("{prefix}dissipative"), d, Tolerances { solver, discretization: ddisc }).over(t0, t1).tuple(id);
                row.dissipative_margin = row.dissipative_margin.min(d + solver + ddisc);
                row.max_discretization_tolerance = row.max_discretization_tolerance.max(ddisc);
                // Both evaluators get the same budget rule: solver tolerance
                // plus a Richardson estimate from the same refinement trio.
                if ce.pass && !cd.pass {
                    implied = false;
                }
                if ce.pass && !(d >= -ce.tolerances.total()) {
                    row.outside_variational_budget += 1;
                }
                if tt.is_zero() {
                    // With a vanishing tuple the inequality is the summed
                    // step estimate plus the plastic pairing gap.
                    let ede: f64 = subject.reports[a..b].iter().map(|r| r.slack).sum();
                    let diff = (s - ede - evs[0].plastic_gap(a, b)).abs();
                    checks.push(Check::new(format!("{prefix}zero_tuple_identity"), -diff, Tolerances::solver(1e-10 * (1.0 + evs[0].energy[a].abs()))).over(t0, t1));
                }
                checks.push(ce);
                checks.push(cd);
            }
            checks.push(Check::flag(format!("{prefix}evs_implies_dissipative"), implied).tuple(id));
            checks.push(Check::new(format!("{prefix}relative_energy_nonnegative"), dis[0].min_relative, Tolerances::solver(1e-12)).tuple(id));
            Ok((checks, row))
        })
        .collect();
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for r in per_tuple {
        let (c, row) = r?;
        checks.extend(c);
        rows.push(row);
    }
    Ok((checks, rows))
}

/// The zero tuple followed by the seeded battery.
pub fn tuples_for(cfg: &RunConfig, g: &Grid) -> Vec<TestTuple> {
    let mut t = vec![TestTuple::zero()];
    t.extend(make_battery(cfg.evs.tuples, cfg.evs.amplitude, g, cfg.time.t_end, cfg.seed));
    t
}

pub fn evs_battery(cfg: &RunConfig) -> Result<Outcome> {
    let g = cfg.grid.build()?;
    let mut report = Report::new(Command::EvsBattery, cfg);
    let jobs = [cfg.clone(), with_half_step(cfg), with_half_cell(cfg)];
    let (trajs, weight) = rayon::join(|| simulate_all(&jobs), || weight_for(cfg, &g));
    let trajs = trajs?;
    let (weight, korn) = weight?;
    let trio = Trio { base: &trajs[0], half_step: &trajs[1], half_cell: &trajs[2] };
    let tuples = tuples_for(cfg, &g);
    let (checks, rows) = battery("", &trio, trio.base, 0, &tuples, &weight, cfg)?;
    report.extend(ede_checks("", trio.base));
    report.extend(checks);
    report.table("weight", weight);
    report.table("korn", korn);
    report.table("tuples", &rows);
    report.table("tuple_definitions", &tuples);
    report.table("runs", [summarise("default", &trajs[0]), summarise("half_step", &trajs[1]), summarise("half_cell", &trajs[2])]);
    let mut it = trajs.into_iter();
    let base = it.next().context("primary run missing")?;
    Ok(Outcome { report, runs: vec![output_of("", base)?] })
}

// ---------------------------------------------------------------------------
// Potential sweep

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub label: String,
    /// `None` for the obstacle run.
    pub alpha: Option<f64>,
    pub bounds: UniformBounds,
    pub max_abs_phi: f64,
    /// `min ln(1 + alpha - |phi|)` over cells and steps, from the multiplier.
    pub min_log_margin: Option<f64>,
    pub max_mass_drift: f64,
    pub max_complementarity: f64,
}

fn bound_columns(b: &UniformBounds) -> [(&'static str, f64); 7] {
    [
        ("velocity", b.velocity),
        ("stress", b.stress),
        ("phase_gradient", b.phase_gradient),
        ("chemical_gradient", b.chemical_gradient),
        ("entropy", b.entropy),
        ("laplacian", b.laplacian),
        ("multiplier", b.multiplier),
    ]
}

/// `sup_t |a - b|_L2` of two phase trajectories on the same grid.
fn phase_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| {
            let d: Vec<f64> = x.phi.values.iter().zip(&y.phi.values).map(|(p, q)| p - q).collect();
            grid::dot(&a.grid, &d, &d).sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn alpha_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let mut report = Report::new(Command::AlphaSweep, cfg);
    let mut jobs: Vec<(String, RunConfig)> = cfg.alpha_sweep.alphas.iter().map(|&a| (format!("alpha_{a:e}"), cfg.with_phase(PhaseModel::Logarithmic { alpha: a }))).collect();
    if cfg.alpha_sweep.include_obstacle {
        jobs.push(("obstacle".into(), cfg.with_phase(PhaseModel::Obstacle)));
    }
    let cfgs: Vec<RunConfig> = jobs.iter().map(|j| j.1.clone()).collect();
    let trajs = simulate_all(&cfgs)?;

    let mut rows = Vec::new();
    let mut mosco_rows = Vec::new();
    for ((label, _), traj) in jobs.iter().zip(&trajs) {
        let alpha = traj.params.phase.alpha();
        let bounds = uniform_bounds(traj)?;
        let max_abs_phi = traj.states.iter().flat_map(|s| s.phi.values.iter()).fold(0.0f64, |m, p| m.max(p.abs()));
        let max_mass_drift = traj.states.windows(2).map(|w| (grid::mean(&w[1].phi) - grid::mean(&w[0].phi)).abs()).fold(0.0, f64::max);
        let max_complementarity = traj.reports.iter().map(|r| r.complementarity).fold(0.0, f64::max);
        let min_log_margin = alpha.map(|a| traj.states.iter().flat_map(|s| s.beta.values.iter()).map(|&b| potentials::log_barrier_margin_ln(a, b)).fold(f64::INFINITY, f64::min));

        report.extend(ede_checks(&format!("{label}."), traj).into_iter().map(|c| Check { name: "sweep.ede_step".into(), ..c }));
        report.push(Check::new("constraint.mass", -max_mass_drift, Tolerances::solver(1e-10)).tuple(label));
        match alpha {
            Some(a) => {
                // A finite margin certifies |phi| < 1 + alpha even where the
                // stored value has rounded onto the barrier.
                let m = min_log_margin.unwrap_or(f64::NAN);
                report.push(Check::flag("constraint.interior", m.is_finite()).tuple(label));
                report.push(Check::new("constraint.closed_range", (1.0 + a) - max_abs_phi, Tolerances::solver(0.0)).tuple(label));
                let phases: Vec<&ScalarField> = traj.states[1..].iter().map(|s| &s.phi).collect();
                mosco_rows.push(potentials::mosco_liminf_probe(a, &phases, traj.dt()));
            }
            None => {
                report.push(Check::new("constraint.obstacle_box", 1.0 - max_abs_phi, Tolerances::solver(0.0)).tuple(label));
                report.push(Check::new("constraint.complementarity", -max_complementarity, Tolerances::solver(1e-9)).tuple(label));
            }
        }
        rows.push(SweepRow { label: label.clone(), alpha, bounds, max_abs_phi, min_log_margin, max_mass_drift, max_complementarity });
    }

    // Uniform estimates are upper bounds: no column may grow beyond
    // `factor` times its value in the first (largest alpha) row. Both ratios
    // are tabulated.
    let factor = cfg.alpha_sweep.uniformity_factor;
    let mut ratios = Vec::new();
    if let Some(first) = rows.first() {
        let reference = bound_columns(&first.bounds);
        for row in &rows[1..] {
            for ((name, v), (_, r)) in bound_columns(&row.bounds).iter().zip(&reference) {
                let ratio = if *r > 0.0 { v / r } else if *v == 0.0 { 1.0 } else { f64::INFINITY };
                report.push(Check::new(format!("uniform_bounds.{name}"), factor - ratio, Tolerances::solver(0.0)).tuple(&row.label));
                ratios.push((row.label.clone(), *name, ratio));
            }
        }
    }
    report.table("uniform_bound_ratios", &ratios);
    let verdict = potentials::mosco_verdict(&mosco_rows);
    report.push(Check::flag("mosco.distance_within_alpha", verdict.distance_within_alpha));
    report.push(Check::flag("mosco.singular_energy_vanishing", verdict.energy_vanishing));

    let cauchy: Vec<(String, String, f64)> = trajs.windows(2).zip(jobs.windows(2)).map(|(t, j)| (j[0].0.clone(), j[1].0.clone(), phase_distance(&t[0], &t[1]))).collect();
    report.table("bounds", &rows);
    report.table("cauchy_phase_distance", &cauchy);
    report.table("mosco_probe", &mosco_rows);
    report.table("mosco_verdict", verdict);
    let runs = jobs.iter().zip(trajs).map(|((label, _), t)| output_of(label, t)).collect::<Result<Vec<_>>>()?;
    Ok(Outcome { report, runs })
}

// ---------------------------------------------------------------------------
// Stress diffusion sweep

#[derive(Clone, Debug, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    /// `gamma |grad S|^2` integrated in time.
    pub gradient_dissipation: f64,
    /// `sup_t |S|_L2`.
    pub stress_sup: f64,
}

pub fn gamma_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let g = cfg.grid.build()?;
    let mut report = Report::new(Command::GammaSweep, cfg);
    let mut gammas = cfg.gamma_sweep.gammas.clone();
    gammas.push(0.0);
    let mut jobs: Vec<RunConfig> = gammas.iter().map(|&y| cfg.with_stress_diffusion(y)).collect();
    let zero = jobs.last().cloned().context("no zero run")?;
    jobs.push(with_half_step(&zero));
    jobs.push(with_half_cell(&zero));
    let (trajs, weight) = rayon::join(|| simulate_all(&jobs), || weight_for(&zero, &g));
    let trajs = trajs?;
    let (weight, korn) = weight?;
    let n = gammas.len();

    let rows: Vec<GammaRow> = gammas
        .iter()
        .zip(&trajs[..n])
        .map(|(&gamma, t)| GammaRow {
            gamma,
            gradient_dissipation: t.reports.iter().map(|r| r.diss_gamma).sum(),
            stress_sup: t.states.iter().map(|s| grid::norm_tensor(&s.s)).fold(0.0, f64::max),
        })
        .collect();
    for (t, &y) in trajs[..n].iter().zip(&gammas) {
        report.extend(ede_checks("", t).into_iter().map(|c| c.tuple(&format!("gamma_{y:e}"))));
    }
    for w in rows.windows(2) {
        let label = format!("gamma_{:e}", w[1].gamma);
        report.push(Check::new("gamma.dissipation_decreasing", w[0].gradient_dissipation - w[1].gradient_dissipation, Tolerances::solver(0.0)).tuple(&label));
    }
    let factor = cfg.gamma_sweep.uniformity_factor;
    for r in &rows[1..] {
        let ratio = (r.stress_sup / rows[0].stress_sup).max(rows[0].stress_sup / r.stress_sup);
        report.push(Check::new("gamma.stress_uniform", factor - ratio, Tolerances::solver(0.0)).tuple(&format!("gamma_{:e}", r.gamma)));
    }
    let trio = Trio { base: &trajs[n - 1], half_step: &trajs[n], half_cell: &trajs[n + 1] };
    let tuples = tuples_for(&zero, &g);
    let (checks, trows) = battery("gamma0.", &trio, trio.base, 0, &tuples, &weight, &zero)?;
    report.extend(checks);
    report.table("rows", &rows);
    report.table("gamma0_weight", weight);
    report.table("korn", korn);
    report.table("gamma0_tuples", &trows);
    let runs = gammas.iter().zip(trajs).take(n).map(|(&y, t)| output_of(&format!("gamma_{y:e}"), t)).collect::<Result<Vec<_>>>()?;
    Ok(Outcome { report, runs })
}

// ---------------------------------------------------------------------------
// Potential probes

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryRow {
    pub alpha: f64,
    pub closed_form: f64,
    /// The logarithmic potential evaluated at `|s| = 1`.
    pub potential_at_one: f64,
}

/// Test phase with values in `[-1, 1]` that touches `+-1`.
fn unit_test_phase(cfg: &RunConfig) -> Result<ScalarField> {
    let g = cfg.grid.build()?;
    let s0 = initial_state(&g, &cfg.params.clone(), &cfg.initial, cfg.seed)?;
    let m = s0.phi.max_abs();
    ensure!(m > 0.0, "initial phase vanishes identically");
    Ok(ScalarField { values: s0.phi.values.iter().map(|v| (v / m).clamp(-1.0, 1.0)).collect(), ..s0.phi })
}

pub fn mosco(cfg: &RunConfig) -> Result<Outcome> {
    let mut report = Report::new(Command::Mosco, cfg);
    let alphas = &cfg.mosco.alphas;
    let rows: Vec<RecoveryRow> = alphas
        .iter()
        .map(|&a| RecoveryRow { alpha: a, closed_form: a * ((a + 2.0) * (a + 2.0).ln() + a * a.ln()), potential_at_one: potentials::log_value(a, 1.0) })
        .collect();
    for r in &rows {
        let d = (r.closed_form - r.potential_at_one).abs();
        report.push(Check::new("mosco.closed_form", -d, Tolerances::solver(1e-14 * (1.0 + r.closed_form.abs()))).tuple(&format!("alpha_{:e}", r.alpha)));
        let lib = potentials::mosco_recovery_bound(r.alpha);
        report.push(Check::new("mosco.library_bound", -(lib - r.closed_form).abs(), Tolerances::solver(1e-14 * (1.0 + lib.abs()))).tuple(&format!("alpha_{:e}", r.alpha)));
    }
    report.push(Check::flag("mosco.recovery_monotone", rows.windows(2).all(|w| w[1].closed_form < w[0].closed_form)));
    if let Some(last) = rows.last() {
        report.push(Check::new("mosco.recovery_small", 1e-3 - last.closed_form, Tolerances::solver(0.0)));
    }

    let phi = unit_test_phase(cfg)?;
    let main = potentials::derivative_bound_report(&phi, alphas, cfg.mosco.theta);
    let control = potentials::derivative_bound_report(&phi, alphas, cfg.mosco.control_theta);
    report.push(Check::flag("derivative_bounds.majorised", main.majorised));
    report.push(Check::flag("derivative_bounds.majorants_decrease", main.majorants_decrease));
    report.push(Check::flag("derivative_bounds.suprema_decrease", main.suprema_decrease));
    // The control exponent must leave the third derivative bounded away
    // from zero: its supremum does not shrink over the sweep.
    let grows = match (control.rows.first(), control.rows.last()) {
        (Some(f), Some(l)) => l.sup_d3 >= f.sup_d3,
        _ => false,
    };
    report.push(Check::flag("derivative_bounds.control_third_persists", grows));
    report.table("recovery", &rows);
    report.table("derivatives", &main);
    report.table("derivatives_control", &control);
    Ok(Outcome { report, runs: Vec::new() })
}

// ---------------------------------------------------------------------------
// Proximal map against brute force

#[derive(Clone, Debug, Serialize)]
pub struct ProxCase {
    pub phi: f64,
    pub modulus: f64,
    pub yield_stress: f64,
    pub tau: f64,
    pub r: [f64; 2],
    pub prox: [f64; 2],
    pub oracle: [f64; 2],
    pub error: f64,
}

/// Minimises `|S - R|^2/2 + tau a |S|^2/2` over a polar lattice of the
/// yield ball in Frobenius coordinates. The lattice contains the yield
/// circle itself, where constrained minimisers sit.
pub fn prox_grid_search(a: f64, yield_stress: f64, r: [f64; 2], tau: f64, resolution: f64) -> [f64; 2] {
    let c = std::f64::consts::SQRT_2;
    let (ru, rw) = (c * r[0], c * r[1]);
    let radii = (yield_stress / resolution).ceil().max(1.0) as usize;
    let angles = (std::f64::consts::TAU * yield_stress / resolution).ceil().max(8.0) as usize;
    let mut best = (0.5 * (ru * ru + rw * rw), 0.0, 0.0);
    for i in 1..=radii {
        let rad = yield_stress * i as f64 / radii as f64;
        for j in 0..angles {
            let th = std::f64::consts::TAU * j as f64 / angles as f64;
            let (u, w) = (rad * th.cos(), rad * th.sin());
            let f = 0.5 * ((u - ru).powi(2) + (w - rw).powi(2)) + 0.5 * tau * a * rad * rad;
            if f < best.0 {
                best = (f, u, w);
            }
        }
    }
    [best.1 / c, best.2 / c]
}

fn random_stress(rng: &mut ChaCha8Rng, size: f64) -> [f64; 2] {
    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n = size * rng.random_range(0.0f64..1.0).sqrt();
    [n * th.cos() / std::f64::consts::SQRT_2, n * th.sin() / std::f64::consts::SQRT_2]
}

pub fn prox_oracle(cfg: &RunConfig) -> Result<Outcome> {
    let mut report = Report::new(Command::ProxOracle, cfg);
    let spec = &cfg.prox;
    let pot = PlasticPotential { modulus: cfg.params.materials.plastic_modulus, yield_stress: cfg.params.materials.yield_stress };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<(f64, f64, f64, [f64; 2])> = (0..spec.cases)
        .map(|_| {
            let phi = rng.random_range(-1.0..1.0);
            let y = rng.random_range(0.2..1.0);
            let tau = rng.random_range(0.01..2.0);
            (phi, y, tau, random_stress(&mut rng, 3.0 * y))
        })
        .collect();
    let cases: Vec<ProxCase> = inputs
        .par_iter()
        .map(|&(phi, y, tau, r)| {
            let a = pot.modulus.value(phi);
            let prox = PlasticPotential::prox_with(a, y, r, tau);
            let oracle = prox_grid_search(a, y, r, tau, spec.resolution);
            let error = frob([prox[0] - oracle[0], prox[1] - oracle[1]]);
            ProxCase { phi, modulus: a, yield_stress: y, tau, r, prox, oracle, error }
        })
        .collect();
    for (i, c) in cases.iter().enumerate() {
        report.push(Check::new("prox.oracle", -c.error, Tolerances { solver: 0.0, discretization: spec.tolerance }).tuple(&format!("case_{i}")));
    }

    let mut worst = f64::INFINITY;
    for _ in 0..spec.pairs {
        let phi = rng.random_range(-1.0..1.0);
        let a = pot.modulus.value(phi);
        let y = rng.random_range(0.2..2.0);
        let tau = rng.random_range(0.01..2.0);
        let (r1, r2) = (random_stress(&mut rng, 4.0 * y), random_stress(&mut rng, 4.0 * y));
        let (p1, p2) = (PlasticPotential::prox_with(a, y, r1, tau), PlasticPotential::prox_with(a, y, r2, tau));
        let gap = frob([r1[0] - r2[0], r1[1] - r2[1]]) - frob([p1[0] - p2[0], p1[1] - p2[1]]);
        worst = worst.min(gap);
    }
    report.push(Check::new("prox.nonexpansive", worst, Tolerances::solver(1e-12)));
    report.table("max_oracle_error", cases.iter().map(|c| c.error).fold(0.0, f64::max));
    report.table("cases", &cases);
    Ok(Outcome { report, runs: Vec::new() })
}

// ---------------------------------------------------------------------------
// Restart equivalence

fn state_mismatch(a: &SimState, b: &SimState) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    [
        d(&a.phi.values, &b.phi.values),
        d(&a.mu.values, &b.mu.values),
        d(&a.beta.values, &b.beta.values),
        d(&a.v.x, &b.v.x),
        d(&a.v.y, &b.v.y),
        d(&a.s.xx, &b.s.xx),
        d(&a.s.xy, &b.s.xy),
        d(&a.p.values, &b.p.values),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Runs `[0, T]`, writes the state at `T/2` under `workdir`, reloads it and
/// continues to `T`. The restarted run must reproduce the straight one and
/// satisfy both inequalities starting from its own initial energy.
pub fn semiflow(cfg: &RunConfig, workdir: &Path) -> Result<Outcome> {
    let g = cfg.grid.build()?;
    let mut report = Report::new(Command::Semiflow, cfg);
    let n = cfg.time.steps;
    if n % 2 != 0 {
        bail!("semiflow needs an even number of steps, got {n}");
    }
    let jobs = [cfg.clone(), with_half_step(cfg), with_half_cell(cfg)];
    let (trajs, weight) = rayon::join(|| simulate_all(&jobs), || weight_for(cfg, &g));
    let trajs = trajs?;
    let (weight, korn) = weight?;
    let straight = &trajs[0];
    let mid = n / 2;

    let dir = output::state_dir(&workdir.join("restart"), mid);
    output::dump_state(&dir, &straight.states[mid])?;
    output::write_manifest(&workdir.join("restart"), straight, mid, vec![mid])?;
    let loaded = output::load_state(&dir)?;
    report.push(Check::new("semiflow.checkpoint_roundtrip", -state_mismatch(&loaded, &straight.states[mid]), Tolerances::solver(0.0)));

    let time = TimeGrid { t_start: straight.time.time(mid), t_end: cfg.time.t_end, steps: n - mid };
    let restarted = run(&loaded, &cfg.params, &cfg.solver, &time, &cfg.forcing)?;
    let mismatch = state_mismatch(restarted.states.last().context("empty run")?, straight.states.last().context("empty run")?);
    report.push(Check::new("semiflow.restart_match", -mismatch, Tolerances::solver(cfg.semiflow.tolerance)));
    let e_mid = total_energy(&straight.states[mid], &cfg.params);
    let e_restart = total_energy(&restarted.states[0], &cfg.params);
    report.push(Check::new("semiflow.initial_energy", -(e_mid - e_restart).abs(), Tolerances::solver(0.0)));

    report.extend(ede_checks("semiflow.", &restarted));
    let trio = Trio { base: straight, half_step: &trajs[1], half_cell: &trajs[2] };
    let tuples = tuples_for(cfg, &g);
    let (checks, rows) = battery("semiflow.", &trio, &restarted, mid, &tuples, &weight, cfg)?;
    report.extend(checks);
    report.table("restart_mismatch", mismatch);
    report.table("restart_energy", e_restart);
    report.table("weight", weight);
    report.table("korn", korn);
    report.table("tuples", &rows);
    let mut it = trajs.into_iter();
    let base = it.next().context("primary run missing")?;
    Ok(Outcome { report, runs: vec![output_of("", base)?, output_of("restart", restarted)?] })
}
