//! Structure-preserving time stepping and solution-concept diagnostics for
//! two-phase viscoelastoplastic flow with phase separation.

pub mod grid;
pub mod materials;
pub mod plasticity;
pub mod linalg;
pub mod ops;
pub mod potentials;
pub mod stepper;
pub mod diagnostics;
