//! Acceptance suite: runs the experiments on the shipped configurations and
//! prints one verdict line per criterion. Exits nonzero if any fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use geoflow_cli::config::RunConfig;
use geoflow_cli::report::Report;
use geoflow_cli::{execute, structural_identities, Command};
use geoflow_core::diagnostics::RegularityWeight;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run(cmd: Command, cfg: &RunConfig) -> Report {
    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let out = execute(cmd, cfg, dir.path()).unwrap_or_else(|e| panic!("{cmd}: {e:#}"));
    eprintln!("  [{cmd}: {} checks, {} failed, {:.1}s]", out.report.summary.checks, out.report.summary.failed, t.elapsed().as_secs_f64());
    out.report
}

fn count(r: &Report, name: &str) -> usize {
    r.checks.iter().filter(|c| c.name == name).count()
}

fn weight(r: &Report, table: &str) -> Option<RegularityWeight> {
    r.tables.get(table).and_then(|v| serde_json::from_value(v.clone()).ok())
}

struct Verdicts {
    failed: usize,
}

impl Verdicts {
    fn line(&mut self, id: usize, title: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("criterion {id:>2} {} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn main() -> ExitCode {
    // libtest-style filtering: `cargo test -- <filter>` runs other targets only.
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return ExitCode::SUCCESS;
    }
    let default = config("default.toml");
    let mut v = Verdicts { failed: 0 };

    let ede = run(Command::EdeCheck, &default);
    let gamma = run(Command::GammaSweep, &default);
    let positive = run(Command::EvsBattery, &config("gamma_positive.toml"));
    let sweep = run(Command::AlphaSweep, &config("alpha_sweep.toml"));
    let mosco = run(Command::Mosco, &default);
    let prox = run(Command::ProxOracle, &default);
    let semiflow = run(Command::Semiflow, &default);
    let structure = structural_identities(default.seed).expect("structural identities");

    let steps = count(&ede, "ede_step");
    v.line(
        1,
        "discrete energy-dissipation estimate",
        steps == default.time.steps && ede.all_pass("ede_step") && ede.all_pass("energy_identity") && ede.all_pass("negative_control"),
        format!("{steps} steps, negative control {}", ede.all_pass("negative_control")),
    );
    v.line(
        2,
        "energy monotonicity decomposition",
        ede.all_pass("energy_decomposition") && ede.all_pass("energy_majorisation") && ede.all_pass("unforced.energy_monotone") && ede.all_pass("unforced.ede_step"),
        format!("auxiliary energy coefficient {}", ede.tables.get("aux_coefficient").map_or("?".into(), |x| x.to_string())),
    );

    let admissible = count(&gamma, "gamma0.tuple_admissible");
    let evs_pairs = count(&gamma, "gamma0.evs");
    v.line(
        3,
        "variational inequality battery",
        admissible >= 11 && evs_pairs >= 11 * 45 && gamma.all_pass("gamma0.tuple_admissible") && gamma.all_pass("gamma0.evs") && gamma.all_pass("gamma0.zero_tuple_identity"),
        format!("{admissible} tuples, {evs_pairs} tuple-interval checks"),
    );
    let zero_weight = weight(&positive, "weight") == Some(RegularityWeight::Zero);
    let korn_weight = matches!(weight(&gamma, "gamma0_weight"), Some(RegularityWeight::Korn { .. }));
    v.line(
        4,
        "weight regimes",
        zero_weight && korn_weight && positive.all_pass("evs") && positive.all_pass("tuple_admissible") && gamma.all_pass("gamma0.evs"),
        format!("zero weight with diffusion {zero_weight}, Korn weight without {korn_weight}"),
    );
    v.line(
        5,
        "plastic proximal map",
        count(&prox, "prox.oracle") == default.prox.cases && prox.all_pass("prox.oracle") && prox.all_pass("prox.nonexpansive"),
        format!("max oracle error {}", prox.tables.get("max_oracle_error").map_or("?".into(), |x| x.to_string())),
    );
    v.line(
        6,
        "constraint preservation",
        sweep.all_pass("constraint.interior")
            && sweep.all_pass("constraint.closed_range")
            && sweep.all_pass("constraint.obstacle_box")
            && sweep.all_pass("constraint.complementarity")
            && sweep.all_pass("constraint.mass"),
        format!("{} constraint checks", sweep.checks_named("constraint.").count()),
    );
    v.line(
        7,
        "Mosco probes",
        mosco.all_pass("mosco.") && sweep.all_pass("mosco."),
        format!("{} recovery rows", mosco.tables.get("recovery").and_then(|x| x.as_array()).map_or(0, |a| a.len())),
    );
    v.line(8, "scaled test-function bounds", mosco.all_pass("derivative_bounds."), format!("{} checks", mosco.checks_named("derivative_bounds.").count()));
    v.line(
        9,
        "uniform estimates across the sweep",
        sweep.all_pass("uniform_bounds."),
        format!("{} ratios", sweep.checks_named("uniform_bounds.").count()),
    );
    v.line(
        10,
        "variational implies dissipative",
        gamma.all_pass("gamma0.evs_implies_dissipative")
            && gamma.all_pass("gamma0.dissipative")
            && positive.all_pass("evs_implies_dissipative")
            && positive.all_pass("dissipative")
            && semiflow.all_pass("semiflow.evs_implies_dissipative"),
        "with and without stress diffusion, and after restart".into(),
    );
    let structural_ok = structure.iter().all(|c| c.pass);
    let failing: Vec<&str> = structure.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    v.line(11, "structural identities", structural_ok && structure.len() >= 5, format!("{} checks, failing {failing:?}", structure.len()));
    v.line(
        12,
        "semi-flow restart",
        semiflow.all_pass("semiflow.checkpoint_roundtrip")
            && semiflow.all_pass("semiflow.restart_match")
            && semiflow.all_pass("semiflow.initial_energy")
            && semiflow.all_pass("semiflow.ede_step")
            && semiflow.all_pass("semiflow.evs")
            && semiflow.all_pass("semiflow.dissipative"),
        format!("restart mismatch {}", semiflow.tables.get("restart_mismatch").map_or("?".into(), |x| x.to_string())),
    );

    let reports = [&ede, &gamma, &positive, &sweep, &mosco, &prox, &semiflow];
    let stray: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| format!("{}: {:?}", r.command, r.summary.failing)).collect();
    if !stray.is_empty() {
        println!("reports with failing checks: {stray:?}");
        v.failed += 1;
    }
    println!("acceptance: {} of 12 criteria failed", v.failed.min(12));
    if v.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
