//! Spatial Moran model with seed-banks in a random environment: forward
//! simulation, the single-particle dual, the environment process and the
//! homogenized quantities, with exact small-instance oracles.

pub mod dsl;
pub mod dual;
pub mod env;
pub mod envproc;
pub mod error;
pub mod forward;
pub mod kernel;
pub mod rational;
pub mod spectral;
pub mod stats;

pub use dsl::{parse_density, DensitySpec};
pub use dual::{DualParticle, KernelMode};
pub use env::{sample_environment, ColonySize, Environment, FieldSpec, Geometry, Site};
pub use error::{Error, Result};
pub use forward::{ForwardState, InitialLaw};
pub use kernel::{MigrationKernel, SubordinateParams};
pub use rational::Rational;
pub use stats::SeedTree;
