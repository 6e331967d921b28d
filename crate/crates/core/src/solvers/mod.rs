//! Weighted-l1 proximal map, FISTA and conjugate gradients.

pub mod cg;
pub mod fista;
pub mod prox;

pub use cg::{cg_record, cg_solve, CgResult, CgTape};
pub use fista::{fista_record, fista_solve, fista_solve_with, ista_solve, FistaConfig, FistaTape, FistaTrace};
pub use prox::{weighted_soft_threshold, weighted_soft_threshold_with, LambdaMaps, ProxKind};
