//! Toolchain for planning needle-like paths of concentric-tube continuum
//! robots through anatomy reconstructed from labelled MRI point clouds.
//!
//! The pipeline runs in three stages:
//!
//! 1. **Reconstruction** ([`ingestion`], [`fitting`], [`clustering`]):
//!    labelled voxel clouds are turned into a compact scene description —
//!    a skull ellipsoid, an admissible hemisphere, an inscribed target
//!    ellipsoid and a set of enclosing obstacle ellipsoids.
//! 2. **Kinematics** ([`kinematics`]): the torsionally-compliant
//!    piecewise-constant-curvature tube model, solved as a two-point
//!    boundary value problem by shooting.
//! 3. **Planning** ([`planner`], [`solver`]): a nonlinear program over tube
//!    design and insertion parameters, transcribed by multiple shooting and
//!    solved with an augmented-Lagrangian method.  Obstacle avoidance is
//!    made tractable by a homotopy that slides the obstacles from benign
//!    initial positions to their true positions while warm-starting each
//!    solve from the previous one.
//!
//! All internal lengths are metres; ingestion converts on load.

pub mod clustering;
pub mod fitting;
pub mod geometry;
pub mod ingestion;
pub mod kinematics;
pub mod planner;
pub mod solver;
