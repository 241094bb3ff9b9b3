//! Differentiable camera-to-robot pose estimation at desk scale.

pub mod diff;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod kinematics;
pub mod metrics;
pub mod pbvs;
pub mod perception;
pub mod pnp;
pub mod reference;
pub mod selftrain;
pub mod softrender;
pub mod synthgen;
