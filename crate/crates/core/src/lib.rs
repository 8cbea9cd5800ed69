//! Point-cloud registration through matched Gaussian mixtures.
//!
//! A registration maps a source cloud onto a target cloud by summarizing both
//! with Gaussian mixtures that share a component index, then solving a
//! weighted Procrustes problem between the component means. The component
//! assignments come either from classical EM or from a learned
//! correspondence network.

pub mod corrnet;
pub mod datagen;
pub mod error;
pub mod evalbench;
pub mod features;
pub mod geom3d;
pub mod io;
pub mod kdtree;
pub mod latent_gmm;
pub mod linalg;
pub mod mt_solver;

pub use error::{Error, Result};
pub use geom3d::{Mat3, Mat4, PointCloud, RigidTransform, Vec3};
pub use latent_gmm::{Gamma, Gmm};
