use std::path::Path;

use geoflow_cli::config::{self, ConfigError, RunConfig};
use geoflow_cli::Command;
use geoflow_core::potentials::PhaseModel;
use proptest::prelude::*;

#[test]
fn empty_config_is_the_default() {
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn partial_tables_fill_in_defaults() {
    let cfg = RunConfig::from_toml("[time]\nsteps = 10\n[grid]\nnx = 16").unwrap();
    assert_eq!(cfg.time.steps, 10);
    assert_eq!(cfg.time.t_end, RunConfig::default().time.t_end);
    assert_eq!(cfg.grid.ny, RunConfig::default().grid.ny);
}

#[test]
fn default_round_trips_through_toml() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn reference_document_is_in_sync() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("docs/config-reference.toml");
    let stored = std::fs::read_to_string(&path).unwrap();
    assert_eq!(stored, config::reference(), "regenerate with `geoflow reference > {}`", path.display());
    assert_eq!(RunConfig::from_toml(&stored).unwrap(), RunConfig::default());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["sed = 3", "[grid]\nnz = 4", "[params.materials]\nrho = 2.0", "[prox]\ncase = 3"] {
        assert!(matches!(RunConfig::from_toml(text), Err(ConfigError::Parse(_))), "{text}");
    }
}

#[test]
fn invalid_values_are_rejected() {
    let bad = |text: &str| match RunConfig::from_toml(text) {
        Err(ConfigError::Field { field, .. }) => field,
        other => panic!("{text}: {other:?}"),
    };
    assert!(bad("[time]\nsteps = 0").contains("time"));
    assert!(bad("[time]\nt_end = -1.0").contains("time"));
    let mut huge = RunConfig::default();
    huge.seed = u64::MAX;
    assert!(matches!(huge.validate(), Err(ConfigError::Field { field, .. }) if field == "seed"));
    assert!(bad("[grid]\nlx = -1.0").contains("grid"));
    assert!(bad("[gamma_sweep]\ngammas = [0.1, 0.2]").contains("gamma_sweep"));
}

#[test]
fn experiment_and_phase_keys() {
    let cfg = RunConfig::from_toml("experiment = \"mosco\"\n[params.phase]\nkind = \"obstacle\"").unwrap();
    assert_eq!(cfg.experiment, Some(Command::Mosco));
    assert_eq!(cfg.params.phase, PhaseModel::Obstacle);
    let cfg = RunConfig::from_toml("[params.phase]\nkind = \"logarithmic\"\nalpha = 0.05").unwrap();
    assert_eq!(cfg.params.phase, PhaseModel::Logarithmic { alpha: 0.05 });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn edited_configs_round_trip(seed in 0..=config::MAX_SEED, steps in 1usize..200, nx in 8usize..64, alpha in 1e-4f64..0.5, gamma in 0.0f64..1.0) {
        let mut cfg = RunConfig::default().with_phase(PhaseModel::Logarithmic { alpha }).with_stress_diffusion(gamma);
        cfg.seed = seed;
        cfg.time.steps = steps;
        cfg.grid.nx = nx;
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
