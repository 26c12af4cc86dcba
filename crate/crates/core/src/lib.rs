//! Learned optimization proxies for parametric constrained problems.
//!
//! The crate trains neural networks that map observable features directly to
//! feasible, near-optimal solutions of a parametric optimization problem, and
//! implements the baseline families they are compared against:
//!
//! - proxy training via Lagrangian dual penalties (LD), self-supervised
//!   primal-dual learning (PDL), and equality completion with unrolled
//!   inequality correction (DC3), each runnable on raw problem parameters or
//!   on observed features;
//! - two-stage regression baselines and end-to-end predict-then-optimize
//!   training through a differentiable QP layer (KKT implicit
//!   differentiation) or through projected-gradient fixed-point conditions;
//! - feasibility restoration (simplex clip-normalize, polyhedral projection,
//!   Newton least-squares on constraint residuals);
//! - synthetic benchmark problems (portfolio allocation, a nonconvex QP with
//!   an oscillating objective, a 2-D toy), dataset generation, and an
//!   experiment harness emitting regret/violation/timing reports.

pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lto;
pub mod nn;
pub mod problems;
pub mod pto;
pub mod qp;
pub mod restore;

pub use error::{Error, Result};
