//! Simulation, discretized optimal control and optimality-condition checking for
//! controlled sweeping processes over convex polyhedra.
//!
//! The state obeys `-x' in N(x; C) + g(x, u)` with `C = { <x*_j, x> <= c_j }`.
//! Trajectories are produced by the catching-up scheme
//! `x_{i+1} = proj_C(x_i + h f(x_i, u_i))`, discrete optimal control problems are
//! solved by exhaustive grids and compass search, and dual certificates
//! `(lambda, p, q, gamma, psi, eta_T)` are synthesized and checked against the
//! discrete and continuous necessary conditions.

pub mod error;
pub mod linalg;
pub mod polyhedra;

pub use error::{Error, Result};
pub mod calculus;
pub mod dynamics;
pub mod certify;
pub mod discrete_ocp;
pub mod robot;
pub mod io;
