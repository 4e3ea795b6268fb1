//! Correspondence-free multiview point cloud registration.
//!
//! N depth-sensor frames are registered jointly by optimising their rigid
//! poses together with a global 2.5D depth map. Each point contributes a raw
//! depth residual against the bilinearly interpolated map instead of a
//! feature match, so no explicit correspondences are ever formed; a smoothing
//! prior regularises the map between observations. The joint nonlinear least
//! squares problem is solved by damped Gauss-Newton on sparse normal
//! equations with analytic Jacobians.

pub mod depth_map;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod problem;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::Pose;
pub use io::PointCloud;
