//! Camera simulation from LiDAR + camera logs with texture-enhanced surfel
//! maps.
//!
//! The pipeline: [`scene`] loads a log and colors/labels its points,
//! [`surfel`] turns static points into a textured surfel map, [`objects`]
//! reconstructs annotated objects, [`render`] rasterizes maps from arbitrary
//! camera poses and [`scenario`] samples novel views and scores renders.
//! [`pipeline`] ties these to the on-disk formats used by the CLI.

pub mod camera;
pub mod error;
pub mod icp;
pub mod kdtree;
pub mod objects;
pub mod par;
pub mod pipeline;
pub mod pose;
pub mod render;
pub mod scenario;
pub mod scene;
pub mod surfel;
pub mod synth;

pub use error::{Error, Result};
pub use par::Execution;
pub use pose::PoseSE3;
