//! Body-part-aware non-rigid registration of sparse human point clouds.

pub mod bodyparts;
pub mod cli;
pub mod correspond;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod register;
pub mod rigidfit;
pub mod spatial;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    compose_rigid, rigid_to_flow, warp, Descriptor, FlowField, Mat3, PartLabels, PointCloud,
    RigidTransform, Skeleton, SoftCorrespondence, Vec3,
};
