//! Mesh-guided cross-view correspondence and attention fusion.
//!
//! A coarse triangle mesh of the subject is ray-cast into every view, the hits
//! are pooled to feature-map resolution, and each pooled intersection point is
//! projected into all views to pick four integer sample positions per view.
//! Attention then runs over those `4 N` keys per query instead of over every
//! pixel of every view.

pub mod adaptation;
pub mod bench;
pub mod correspondence;
pub mod dataprep;
pub mod fusion;
pub mod geometry;
pub mod raster;
pub mod synth;
pub mod tensor_io;

pub use correspondence::{CorrespondenceError, CorrespondenceTable, SampleIndexSet};
pub use fusion::{FeatureStack, FusionError, FusionStats};
pub use geometry::{Camera, GeometryError, Rig, SimilarityTransform, ViewEmbedding};
pub use raster::{AggregatedRaster, Mesh, RasterError, RasterMap};
pub use tensor_io::{Tensor, TensorError};

#[cfg(test)]
#[global_allocator]
static ALLOC: bench::alloc::TrackingAllocator = bench::alloc::TrackingAllocator;
