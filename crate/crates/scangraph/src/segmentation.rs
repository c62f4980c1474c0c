//! Egocentric polar-grid segmentation.
//!
//! The sensor-centered disc of radius `max_range` is divided into
//! `sectors x rings` cells. A point at planar range r and azimuth theta lands
//! in ring `j` with `r` in `[(j-1)*max_range/rings, j*max_range/rings)` (the
//! outermost ring is closed at `max_range`) and sector `i` with `theta` in
//! `[(i-1)*2*pi/sectors, i*2*pi/sectors)`. Bins are half-open so every
//! in-range point gets exactly one cell; points beyond `max_range` are
//! discarded. Indices are 1-based.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::{Point3, PointCloud};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("grid must have at least one sector and ring and a positive max range")]
    InvalidGrid,
}

/// Polar grid dimensions: `sectors` azimuthal bins, `rings` radial bins,
/// `max_range` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub sectors: u32,
    pub rings: u32,
    pub max_range: f64,
}

impl GridConfig {
    pub fn new(sectors: u32, rings: u32, max_range: f64) -> Result<Self, SegmentationError> {
        let cfg = Self { sectors, rings, max_range };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SegmentationError> {
        if self.sectors < 1 || self.rings < 1 || !(self.max_range > 0.0) {
            return Err(SegmentationError::InvalidGrid);
        }
        Ok(())
    }

    pub fn ring_width(&self) -> f64 {
        self.max_range / self.rings as f64
    }

    pub fn sector_width(&self) -> f64 {
        TAU / self.sectors as f64
    }

    pub fn cell_count(&self) -> usize {
        self.sectors as usize * self.rings as usize
    }
}

impl Default for GridConfig {
    /// The 60-sector, 20-ring, 60 m grid used on KITTI-class scans.
    fn default() -> Self {
        Self { sectors: 60, rings: 20, max_range: 60.0 }
    }
}

/// 1-based cell index. Ordering is ring-major: (ring 1, sector 1),
/// (ring 1, sector 2), ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId {
    pub ring: u32,
    pub sector: u32,
}

impl SegmentId {
    pub fn new(sector: u32, ring: u32) -> Self {
        Self { ring, sector }
    }
}

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.sector, self.ring)
    }
}

/// The partition of one cloud: per-cell point indices plus the number of
/// points beyond `max_range`.
#[derive(Clone, Debug, Default)]
pub struct SegmentSet {
    segments: BTreeMap<SegmentId, Vec<usize>>,
    discarded: usize,
}

impl SegmentSet {
    /// Non-empty cells in ring-major order.
    pub fn segments(&self) -> impl Iterator<Item = (SegmentId, &[usize])> {
        self.segments.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn get(&self, id: SegmentId) -> Option<&[usize]> {
        self.segments.get(&id).map(Vec::as_slice)
    }

    pub fn non_empty_count(&self) -> usize {
        self.segments.len()
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }

    pub fn assigned_count(&self) -> usize {
        self.segments.values().map(Vec::len).sum()
    }
}

/// Maps one point to its grid cell, or None when its planar range exceeds
/// `max_range`. The exact origin goes to ring 1, sector 1.
pub fn assign_segment(p: Point3, cfg: &GridConfig) -> Option<SegmentId> {
    let range = p.planar_range();
    if range > cfg.max_range {
        return None;
    }
    let ring = ((range / cfg.ring_width()) as u32 + 1).min(cfg.rings);
    let sector = ((p.azimuth() / cfg.sector_width()) as u32 + 1).min(cfg.sectors);
    Some(SegmentId { ring, sector })
}

/// Partitions a cloud over the grid. Every in-range point lands in exactly
/// one cell; cell vectors hold indices into `cloud.points()` in input order.
pub fn segment_cloud(cloud: &PointCloud, cfg: &GridConfig) -> SegmentSet {
    let mut set = SegmentSet::default();
    for (index, p) in cloud.points().iter().enumerate() {
        match assign_segment(*p, cfg) {
            Some(id) => set.segments.entry(id).or_default().push(index),
            None => set.discarded += 1,
        }
    }
    set
}
