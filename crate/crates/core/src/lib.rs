//! Simulation and statistics for the geometric Lorenz model.
//!
//! * [`maps`]: the return map, its 1-D quotient, the baker reference system
//!   and orbit streams.
//! * [`measure`]: empirical invariant measures, Ulam densities, local
//!   dimension and annulus masses.
//! * [`borel_cantelli`]: shrinking targets and the strong Borel–Cantelli
//!   ratio.
//! * [`evt`]: extreme value laws, dependence diagnostics and the rare event
//!   point process.
//! * [`flow`]: the suspension flow over the return map.
//! * [`harness`]: configuration, orchestration and reports.

pub mod borel_cantelli;
pub mod error;
pub mod evt;
pub mod flow;
pub mod harness;
pub mod maps;
pub mod measure;
pub mod rng;
pub mod stats;

pub use error::{LabError, Result};
pub use maps::{ModelParams, SectionPoint, System, SystemKind};
pub use measure::{EmpiricalMeasure, RadialMass, Shape};
pub use rng::Seeder;
