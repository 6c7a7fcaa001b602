//! Open-loop Nash equilibria of linear-quadratic-singular stochastic differential games.
//!
//! The solver approximates singular controls by bang-bang controls with
//! bounded rates, solves the resulting games by best-response iteration on
//! a least-squares Monte Carlo adjoint, and averages along an increasing
//! ladder of rate caps. Candidates are certified against the first-order
//! conditions and against an exact quadratic-programming oracle on
//! noise-free instances.

pub mod adjoint;
pub mod error;
pub mod experiment;
pub mod limit;
pub mod lipschitz;
pub mod model;
pub mod oligopoly;
pub mod oracle;
pub mod paths;
pub mod problem;
pub mod smp;
pub mod stats;

pub use error::{LqsgError, Result};
