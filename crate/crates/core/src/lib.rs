//! Data-driven mesh deformation and caricature fitting.
//!
//! Shapes are expressed against a reference mesh through per-vertex deformation
//! gradients split into a rotation logarithm and a scale/shear offset. Blending those
//! parts linearly and solving a sparse Poisson-type system reconstructs new meshes, which
//! lets a small example collection extrapolate well beyond its members. A landmark-driven
//! alternating solver fits such a shape to 68 2D points under an orthographic camera.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`/`*32` aliases
//! below name the common instantiations.

pub mod baselines;
pub mod basis_io;
pub mod collection;
pub mod deform;
pub mod error;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod projection;
pub mod reconstruction;
pub mod rotation;
pub mod scalar;
pub mod weights;

pub use deform::{BlendWeights, DeformBasis, DeformRep, VertexDeform};
pub use error::{Error, Result};
pub use io::{LandmarkDocument, LandmarkSpec, MeshDocument, LANDMARK_COUNT};
pub use mesh::{EdgeWeights, Topology, TriangleMesh};
pub use pipeline::{fit_caricature, FitConfig, FitResult, ResultDocument};
pub use projection::{CameraDocument, ProjectionParams};
pub use reconstruction::{reconstruct_from_weights, solve_p_step, Anchor, LaplacianSystem};
pub use rotation::{Rotation, ScaleShear, SkewLog};
pub use scalar::Real;
pub use weights::{energy_def, optimize_weights, LmOptions, LmReport};

pub type Mesh64 = TriangleMesh<f64>;
pub type Mesh32 = TriangleMesh<f32>;
pub type Basis64 = DeformBasis<f64>;
pub type Basis32 = DeformBasis<f32>;
pub type Weights64 = BlendWeights<f64>;
pub type Weights32 = BlendWeights<f32>;
pub type Landmarks64 = LandmarkSpec<f64>;
pub type Landmarks32 = LandmarkSpec<f32>;
pub type Camera64 = ProjectionParams<f64>;
pub type Camera32 = ProjectionParams<f32>;
pub type Fit64 = FitResult<f64>;
