//! Differentiable narrow-phase collision detection between strictly convex
//! implicit bodies.
//!
//! Each body is the sublevel set `phi(y) <= 0` of a smooth convex function in
//! its own frame. [`detector::solve`] finds the minimal uniform scaling at
//! which two bodies touch, and [`sensitivity`] differentiates that solution,
//! the contact kinematics and a penalty contact wrench with respect to the
//! generalized coordinates of the relative pose.

pub mod bench;
pub mod detector;
pub mod se3;
pub mod sensitivity;
pub mod shapes;

pub use detector::{solve, ContactPair, Solution, SolverConfig, Unknowns};
pub use se3::{GeometricJacobian, Pose};
pub use shapes::{ShapeDescription, ShapeModel};
