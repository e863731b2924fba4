//! Scan ingestion, ground-truth labels, isosurface extraction and metrics.

pub mod bvh;
pub mod io;
pub mod marching;
mod mc_table;
pub mod mesh;
pub mod metrics;
pub mod scan;
pub mod winding;

pub use bvh::{Bvh, ClosestHit, PointTree};
pub use marching::{marching_cubes, Grid};
pub use mesh::{Mesh, SurfacePoint};
pub use winding::{label_cell_centers, label_occupancy, InsideTest};
pub use metrics::{chamfer_and_fscore, color_distance, GeometryScores, MetricOptions, RegionMask};
pub use scan::{sample_training_points, SampleCounts, SampleSet, Scan};
