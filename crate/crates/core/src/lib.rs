//! Sparse voxel encoder built from conjugate Hilbert serialization and
//! group attention.
//!
//! Pipeline: [`voxelizer`] turns a point cloud into a [`VoxelSet`];
//! [`spacecurve`] orders the voxels along a two-level Hilbert curve;
//! [`attention`] runs multi-head attention inside fixed-size groups of that
//! order; [`encoder`] stacks the layers with alternating strategies and
//! flattens the result into a BEV grid. [`model_io`] holds the config text
//! and binary containers.

pub mod attention;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod model_io;
pub mod rng;
pub mod spacecurve;
pub mod tensor;
pub mod verify;
pub mod voxelizer;

pub use encoder::{bev_scatter, encoder_forward, BevGrid, EncoderConfig, EncoderParams, InitMode};
pub use error::{Result, SegtError};
pub use model_io::{AnyParams, RunConfig};
pub use rng::SeededRng;
pub use spacecurve::{serialize, ExpansionConfig, SerializationPlan, Strategy};
pub use tensor::{Matrix, Precision, Real};
pub use voxelizer::{voxelize, GridSpec, PointCloud, VoxelSet};
