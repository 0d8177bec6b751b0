//! Robust control of linear mean-field stochastic systems with Poisson jumps:
//! Riccati solvers, Monte-Carlo simulation and model-free policy iteration.

pub mod exec;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod rl;
pub mod simulate;
