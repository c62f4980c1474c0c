//! Per-segment features: centroid and the sorted eigenvalues of the segment's
//! covariance matrix.
//!
//! The covariance is the population form (divide by n, so single-point
//! segments are well defined) and its spectrum is rotation invariant, which is
//! what makes the eigenvalue branch of the descriptor network robust to
//! viewpoint changes. Eigenvalues are reported in descending order in raw m^2
//! units; tiny negative values from the solver are clamped to zero.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::{Point3, PointCloud};
use crate::segmentation::{segment_cloud, GridConfig, SegmentId};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot compute features of an empty segment")]
    EmptySegment,
    #[error("frame {frame_id} has no segment with at least {min_points} points")]
    UnusableFrame { frame_id: u64, min_points: usize },
    #[error("min_points must be at least 1")]
    InvalidMinPoints,
}

/// Extraction settings.
///
/// `min_points` drops segments whose covariance would be too rank-deficient
/// to mean anything. `normalize_eigenvalues` divides each eigenvalue triple
/// by its trace (an experiment knob; off by default to keep absolute scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub min_points: usize,
    pub normalize_eigenvalues: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { min_points: 5, normalize_eigenvalues: false }
    }
}

/// Centroid, descending eigenvalue triple, cell id and population of one
/// segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeature {
    pub centroid: Vector3<f64>,
    pub eigenvalues: Vector3<f64>,
    pub id: SegmentId,
    pub point_count: usize,
}

/// All qualifying segment features of one frame, in ring-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub frame_id: u64,
    features: Vec<SegmentFeature>,
}

impl FrameFeatures {
    pub fn new(frame_id: u64, features: Vec<SegmentFeature>) -> Self {
        Self { frame_id, features }
    }

    pub fn features(&self) -> &[SegmentFeature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Returns a copy with segment order permuted; feature content is
    /// untouched. Descriptors must not depend on this order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.features.len());
        Self {
            frame_id: self.frame_id,
            features: order.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }
}

/// Population covariance of a point set around its mean.
pub fn covariance(points: &[Point3]) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.to_vector()) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.to_vector() - mean;
        cov.ger(1.0 / n, &d, &d, 1.0);
    }
    Some((mean, cov))
}

/// Eigenvalues of a symmetric 3x3 matrix, sorted descending, with negatives
/// (solver noise on PSD inputs) clamped to zero.
pub fn sorted_eigenvalues(m: &Matrix3<f64>) -> Vector3<f64> {
    let mut eigs: [f64; 3] = nalgebra::SymmetricEigen::new(*m).eigenvalues.into();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Vector3::new(eigs[0].max(0.0), eigs[1].max(0.0), eigs[2].max(0.0))
}

/// Computes the feature of one segment from its points.
pub fn segment_feature(points: &[Point3], id: SegmentId) -> Result<SegmentFeature, FeatureError> {
    let (centroid, cov) = covariance(points).ok_or(FeatureError::EmptySegment)?;
    Ok(SegmentFeature {
        centroid,
        eigenvalues: sorted_eigenvalues(&cov),
        id,
        point_count: points.len(),
    })
}

/// Segments a cloud and extracts features of every cell holding at least
/// `cfg.min_points` points, in ring-major cell order. A frame with no
/// qualifying segment is unusable.
pub fn extract_frame_features(
    cloud: &PointCloud,
    grid: &GridConfig,
    cfg: &FeatureConfig,
) -> Result<FrameFeatures, FeatureError> {
    if cfg.min_points < 1 {
        return Err(FeatureError::InvalidMinPoints);
    }
    let set = segment_cloud(cloud, grid);
    let mut features = Vec::new();
    for (id, members) in set.segments() {
        if members.len() < cfg.min_points {
            continue;
        }
        let points: Vec<Point3> = members.iter().map(|&i| cloud.points()[i]).collect();
        let mut feature = segment_feature(&points, id)?;
        if cfg.normalize_eigenvalues {
            let trace = feature.eigenvalues.sum();
            if trace > 0.0 {
                feature.eigenvalues /= trace;
            }
        }
        features.push(feature);
    }
    if features.is_empty() {
        return Err(FeatureError::UnusableFrame {
            frame_id: cloud.frame_id(),
            min_points: cfg.min_points,
        });
    }
    Ok(FrameFeatures::new(cloud.frame_id(), features))
}
