//! Numerical laboratory for tilted Gaussian measures `dν = e^f dγ`.
//!
//! The crate builds low-complexity potentials `f`, estimates relative
//! entropy, Fisher information, Gaussian width of the gradient set, the
//! Laplacian bound `M`, second moments and entropy gaps, computes quadratic
//! transport costs to the standard Gaussian, simulates the Föllmer process,
//! and assembles these into checks of the Gaussian log-Sobolev family of
//! inequalities with explicit Monte Carlo error bars.
//!
//! | module | contents |
//! |--------|----------|
//! | [`potentials`] | `f`, `∇f`, `Δf`, gradient sets, text serialization |
//! | [`samplers`] | seeded streams, exact and MALA samplers, quadrature oracle |
//! | [`measures`] | estimators returning [`measures::Estimate`] |
//! | [`transport`] | `W₂` closed forms and solvers, dual pairs, transport checks |
//! | [`foellmer`] | Föllmer drift, Euler–Maruyama paths, path diagnostics |
//! | [`harness`] | named inequality checks, suite configuration and reports |
//! | [`report`] | verdicts, tolerances and diagnostics |

pub mod error;
pub mod foellmer;
pub mod harness;
pub mod hexfloat;
pub mod measures;
pub mod potentials;
pub mod report;
pub mod samplers;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
