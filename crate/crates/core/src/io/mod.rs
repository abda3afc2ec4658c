//! File formats: PLY clouds and meshes, TOML skeletons and configs, and the
//! dataset directory layout.

pub mod dataset;
pub mod mesh;
pub mod ply;
pub mod scan;
pub mod text;

pub use dataset::{write_dataset, write_session, Dataset, Frame, FrameRange, Manifest, MeshFrame, Split, Splits};
pub use mesh::{read_descriptor, read_mesh_frame, write_descriptor, write_mesh_frame};
pub use ply::{read_ply, write_ply, Element, Encoding, Ply, Property, Scalar};
pub use scan::ScanRecord;
pub use text::{
    read_registration_config, read_scene_config, read_skeleton, registration_config_from_str, skeleton_from_str,
    skeleton_to_string, to_toml, write_skeleton,
};
