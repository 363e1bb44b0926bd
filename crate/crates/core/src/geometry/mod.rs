//! Part-labeled point clouds: procedural generation, farthest-point sampling,
//! rigid poses, and PLY / JSON-lines persistence.

mod cloud;
mod fps;
mod generate;
pub mod io;
mod pose;

pub use cloud::PartLabeledCloud;
pub use fps::farthest_point_sample;
pub use generate::{generate_object, Category, CategoryDims};
pub use pose::{apply_pose, PoseRanges, RigidPose};
