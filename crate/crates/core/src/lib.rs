//! Scene-aware human mesh recovery: geometry, body model, networks and
//! optimisation, without any dependency on `std`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod math;
pub mod scene;
pub mod voxel;
pub mod bench;
pub mod body;
pub mod autodiff;
pub mod losses;
pub mod metrics;
pub mod mesh_net;
pub mod root_contact;
pub mod saopt;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Camera, FeatureMap, Provenance, Root3D};
pub use math::{Aabb, Mat3, Vec3};
pub use scene::SceneModel;
