//! Periodic homogenization of interacting lattice diffusions.
//!
//! The crate follows the pipeline potential → quotient dynamics → corrector
//! → effective matrix → homogenization tests. Every estimator is seeded
//! through [`rng::Stream`] so results do not depend on thread count.

pub mod corrector;
pub mod effective;
pub mod error;
pub mod homogenization;
pub mod io;
pub mod potential;
pub mod presets;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod torus;
pub mod trig;

pub use effective::{EffectiveMatrix, FactorBlock};
pub use error::{Error, Result};
pub use homogenization::{ConvergenceReport, LimitSampler, MartingalePart, PathEnsemble};
pub use potential::{BoxGeometry, LocalFunction, Observable, PotentialSpec};
pub use presets::Preset;
pub use rng::Stream;
pub use stats::Estimate;
pub use torus::{GibbsSampleSet, LatticeState, TorusState};
pub use trig::TrigPoly;
