//! Perspective face reconstruction without the neural network.
//!
//! The pipeline regresses 2D landmarks (with per-point uncertainty) and a
//! canonical 3D mesh, then joins the two through Perspective-n-Points. This
//! crate implements everything around that join so it can be verified in
//! isolation: the camera/warp geometry, an uncertainty-weighted PnP solver,
//! a differentiable PnP layer with two backward passes, PCA shape-space
//! fitting, the training losses with analytic gradients, the 6DoF
//! evaluation metrics, a synthetic scene generator, and the benchmark
//! harness driven by the `perspnp` CLI.

pub mod bench;
pub mod diff_pnp;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pca;
pub mod pnp;
pub mod synth;

pub use geometry::{
    CameraIntrinsics, EulerAngles, GeometryError, PointSet2, PointSet3, RigidPose, Similarity2D,
};
pub use pca::{CanonicalMesh, PcaCoeffs, PcaModel};
pub use pnp::{PnPProblem, PnPSolution, PnpError};
