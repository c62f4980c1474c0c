//! LiDAR place recognition from raw point clouds.
//!
//! A scan is partitioned into an egocentric polar grid, each occupied cell is
//! summarized by its centroid and the sorted eigenvalues of its covariance,
//! and a two-branch graph network (KNN edge features, shared MLPs, neighborhood
//! max-pooling, NetVLAD aggregation) maps those summaries to a unit-norm global
//! descriptor. Descriptors are stored in an exact KD-tree database and matching
//! quality is measured with precision/recall, F1max and Extended Precision.
//!
//! The crate is organized along the pipeline:
//!
//! - [`pointcloud`]: scan ingestion (KITTI odometry format), synthetic scenes,
//!   z-rotation and sector-occlusion perturbations
//! - [`segmentation`]: the sector/ring polar grid
//! - [`features`]: per-segment centroid + eigenvalue extraction
//! - [`graph`]: KNN graphs and edge features
//! - [`network`]: the descriptor network forward pass and parameter files
//! - [`training`]: pair mining, the lazy quadruplet loss, analytic gradients
//!   and an Adam training loop
//! - [`retrieval`]: the descriptor database and exact KD-tree queries
//! - [`evaluation`]: PR curves, F1max, Extended Precision, robustness runs
//! - [`toybench`]: the committed synthetic benchmark used by the test suite
//!
//! Everything is deterministic under a fixed seed; see [`derive_seed`] for how
//! one top-level seed is split across subsystems.

pub mod evaluation;
pub mod features;
pub mod graph;
pub mod network;
pub mod pointcloud;
pub mod retrieval;
pub mod segmentation;
pub mod toybench;
pub mod training;

mod rng;

pub use rng::{derive_seed, stream};
