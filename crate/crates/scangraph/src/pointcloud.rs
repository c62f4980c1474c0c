//! Scan ingestion, synthetic scenes and the robustness perturbations.
//!
//! KITTI odometry files are the on-disk interface: velodyne `.bin` scans
//! (little-endian `f32` x, y, z, intensity per point; intensity is read and
//! discarded), pose files with 12 whitespace-separated reals per line
//! (row-major 3x4), and `times.txt` with one timestamp per line.

use std::f64::consts::TAU;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("failed to read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: size {size} is not a multiple of 16 bytes")]
    BadRecordSize { path: PathBuf, size: u64 },
    #[error("non-finite coordinate at point {index}")]
    NonFinitePoint { index: usize },
    #[error("non-finite timestamp")]
    NonFiniteTimestamp,
    #[error("pose line {line}: {reason}")]
    BadPoseLine { line: usize, reason: String },
    #[error("times line {line}: {reason}")]
    BadTimeLine { line: usize, reason: String },
    #[error("pose/time count mismatch: {poses} poses, {times} timestamps")]
    CountMismatch { poses: usize, times: usize },
    #[error("rotation at line {line} is not orthonormal with det +1")]
    NotARotation { line: usize },
    #[error("blob {index}: covariance is not symmetric positive semi-definite")]
    NotPsd { index: usize },
    #[error("rotation angle must be finite")]
    NonFiniteAngle,
}

/// A single 3D point, in meters, sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Planar range sqrt(x^2 + y^2).
    pub fn planar_range(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Full-quadrant azimuth of (x, y), normalized to [0, 2*pi).
    ///
    /// The origin maps to 0. Values that would round up to exactly 2*pi are
    /// folded back to 0 so the half-open range holds bit-for-bit.
    pub fn azimuth(self) -> f64 {
        let a = self.y.atan2(self.x);
        let a = if a < 0.0 { a + TAU } else { a };
        if a >= TAU {
            0.0
        } else {
            a
        }
    }
}

/// One LiDAR frame: an ordered list of points plus identity and time.
///
/// Construction validates that every coordinate is finite; all operations in
/// this crate preserve that invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    frame_id: u64,
    timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_id: u64, timestamp: f64) -> Result<Self, PointCloudError> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(PointCloudError::NonFinitePoint { index });
        }
        if !timestamp.is_finite() {
            return Err(PointCloudError::NonFiniteTimestamp);
        }
        Ok(Self { points, frame_id, timestamp })
    }

    /// Constructor for internal code paths that cannot produce non-finite
    /// values (rotations of finite inputs, subsequences, ...).
    pub(crate) fn from_validated(points: Vec<Point3>, frame_id: u64, timestamp: f64) -> Self {
        debug_assert!(points.iter().all(Point3::is_finite));
        Self { points, frame_id, timestamp }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn with_frame_id(mut self, frame_id: u64) -> Self {
        self.frame_id = frame_id;
        self
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        debug_assert!(timestamp.is_finite());
        self.timestamp = timestamp;
        self
    }
}

/// A ground-truth pose: orthonormal rotation (det +1 within 1e-6),
/// translation in meters, timestamp in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseStamped {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl PoseStamped {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        timestamp: f64,
    ) -> Result<Self, PointCloudError> {
        if !is_rotation(&rotation) {
            return Err(PointCloudError::NotARotation { line: 0 });
        }
        Ok(Self { rotation, translation, timestamp })
    }

    /// Translation distance to another pose.
    pub fn distance(&self, other: &PoseStamped) -> f64 {
        (self.translation - other.translation).norm()
    }
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    let gram = r.transpose() * r;
    let max_dev = (gram - Matrix3::identity()).amax();
    max_dev <= 1e-6 && (r.determinant() - 1.0).abs() <= 1e-6
}

/// Loads a KITTI velodyne scan: 16-byte records of four little-endian `f32`
/// (x, y, z, intensity). Intensity is discarded; record order is preserved.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud, PointCloudError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PointCloudError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() % 16 != 0 {
        return Err(PointCloudError::BadRecordSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (index, record) in bytes.chunks_exact(16).enumerate() {
        let x = f32::from_le_bytes(record[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(record[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(record[8..12].try_into().unwrap());
        let p = Point3::new(x as f64, y as f64, z as f64);
        if !p.is_finite() {
            return Err(PointCloudError::NonFinitePoint { index });
        }
        points.push(p);
    }
    let frame_id = frame_id_from_stem(path);
    Ok(PointCloud::from_validated(points, frame_id, 0.0))
}

fn frame_id_from_stem(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Writes a cloud in KITTI velodyne layout. The xyz fields round-trip
/// bit-exactly for clouds that came from [`load_kitti_bin`]; the intensity
/// field is written as 0.
pub fn save_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), PointCloudError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        bytes.extend_from_slice(&(p.x as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.y as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.z as f32).to_le_bytes());
        bytes.extend_from_slice(&0.0_f32.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|source| PointCloudError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads KITTI ground-truth poses and their timestamps.
///
/// Line k of the pose file (12 reals, row-major 3x4) pairs with line k of the
/// times file. Line counts must match and each rotation must be orthonormal
/// with determinant +1.
pub fn load_poses_and_times(
    pose_path: impl AsRef<Path>,
    times_path: impl AsRef<Path>,
) -> Result<Vec<PoseStamped>, PointCloudError> {
    let read = |path: &Path| {
        std::fs::read_to_string(path).map_err(|source| PointCloudError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let pose_text = read(pose_path.as_ref())?;
    let times_text = read(times_path.as_ref())?;

    let mut times = Vec::new();
    for (line, text) in nonempty_lines(&times_text) {
        let t: f64 = text.trim().parse().map_err(|e| PointCloudError::BadTimeLine {
            line,
            reason: format!("{e}"),
        })?;
        if !t.is_finite() {
            return Err(PointCloudError::BadTimeLine {
                line,
                reason: "non-finite timestamp".into(),
            });
        }
        times.push(t);
    }

    let mut poses = Vec::new();
    for (line, text) in nonempty_lines(&pose_text) {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|tok| tok.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| PointCloudError::BadPoseLine { line, reason: format!("{e}") })?;
        if values.len() != 12 {
            return Err(PointCloudError::BadPoseLine {
                line,
                reason: format!("expected 12 values, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PointCloudError::BadPoseLine { line, reason: "non-finite value".into() });
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], //
            values[4], values[5], values[6], //
            values[8], values[9], values[10],
        );
        if !is_rotation(&rotation) {
            return Err(PointCloudError::NotARotation { line });
        }
        let translation = Vector3::new(values[3], values[7], values[11]);
        poses.push((line, rotation, translation));
    }

    if poses.len() != times.len() {
        return Err(PointCloudError::CountMismatch { poses: poses.len(), times: times.len() });
    }
    Ok(poses
        .into_iter()
        .zip(times)
        .map(|((_, rotation, translation), timestamp)| PoseStamped { rotation, translation, timestamp })
        .collect())
}

fn nonempty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Rotates every point around the z-axis by `angle` radians. Frame id and
/// timestamp are preserved.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> Result<PointCloud, PointCloudError> {
    if !angle.is_finite() {
        return Err(PointCloudError::NonFiniteAngle);
    }
    let (sin, cos) = angle.sin_cos();
    let points = cloud
        .points()
        .iter()
        .map(|p| Point3::new(p.x * cos - p.y * sin, p.x * sin + p.y * cos, p.z))
        .collect();
    Ok(PointCloud::from_validated(points, cloud.frame_id(), cloud.timestamp()))
}

/// Removes every point whose azimuth lies in `[start, start + extent)`,
/// with wraparound. Surviving points keep their order.
///
/// `extent` must lie in `[0, 2*pi]`; `extent = 2*pi` empties the cloud.
pub fn occlude_sector(cloud: &PointCloud, start: f64, extent: f64) -> PointCloud {
    assert!(
        (0.0..=TAU).contains(&extent),
        "occlusion extent must be within [0, 2*pi], got {extent}"
    );
    let start = start.rem_euclid(TAU);
    let points = cloud
        .points()
        .iter()
        .filter(|p| (p.azimuth() - start).rem_euclid(TAU) >= extent)
        .copied()
        .collect();
    PointCloud::from_validated(points, cloud.frame_id(), cloud.timestamp())
}

/// One Gaussian blob of a synthetic scene.
#[derive(Clone, Debug)]
pub struct GaussianBlob {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub count: usize,
}

impl GaussianBlob {
    pub fn new(center: Vector3<f64>, covariance: Matrix3<f64>, count: usize) -> Self {
        Self { center, covariance, count }
    }

    /// Isotropic blob with standard deviation `sigma`.
    pub fn isotropic(center: Vector3<f64>, sigma: f64, count: usize) -> Self {
        Self::new(center, Matrix3::identity() * sigma * sigma, count)
    }
}

/// Draws a deterministic synthetic scene: `count` points per blob from the
/// given Gaussians, in blob order. The same spec and seed reproduce the
/// output bit-for-bit.
pub fn synth_scene(blobs: &[GaussianBlob], seed: u64) -> Result<PointCloud, PointCloudError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(blobs.iter().map(|b| b.count).sum());
    for (index, blob) in blobs.iter().enumerate() {
        let factor = psd_factor(&blob.covariance).ok_or(PointCloudError::NotPsd { index })?;
        for _ in 0..blob.count {
            let z = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            points.push(Point3::from_vector(blob.center + factor * z));
        }
    }
    Ok(PointCloud::from_validated(points, 0, 0.0))
}

/// Factors a symmetric PSD matrix as F with F * F^T = C, via its
/// eigendecomposition (handles rank-deficient covariances that a Cholesky
/// would reject). Returns None if the matrix is asymmetric or indefinite.
fn psd_factor(cov: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let scale = cov.amax().max(1.0);
    if (cov - cov.transpose()).amax() > 1e-9 * scale {
        return None;
    }
    let eig = nalgebra::SymmetricEigen::new(*cov);
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
        return None;
    }
    let sqrt = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Some(eig.eigenvectors * sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, 0, 0.0).unwrap()
    }

    #[test]
    fn load_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000007.bin");
        let mut bytes = Vec::new();
        for v in [1.0_f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let c = load_kitti_bin(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.points()[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(c.frame_id(), 7);
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, []).unwrap();
        assert!(load_kitti_bin(&path).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_bad_sizes_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [0u8; 15]).unwrap();
        assert!(matches!(load_kitti_bin(&path), Err(PointCloudError::BadRecordSize { .. })));
        assert!(matches!(
            load_kitti_bin(dir.path().join("missing.bin")),
            Err(PointCloudError::Io { .. })
        ));
    }

    #[test]
    fn load_rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.bin");
        let mut bytes = Vec::new();
        for v in [f32::NAN, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_kitti_bin(&path), Err(PointCloudError::NonFinitePoint { index: 0 })));
    }

    #[test]
    fn kitti_roundtrip_preserves_xyz_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.bin");
        let mut bytes = Vec::new();
        for v in [0.125_f32, -3.5, 7.25, 0.9, 100.0, 0.0, -0.0, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let c = load_kitti_bin(&path).unwrap();
        let out = dir.path().join("out.bin");
        save_kitti_bin(&c, &out).unwrap();
        let written = std::fs::read(&out).unwrap();
        assert_eq!(written.len(), bytes.len());
        for (a, b) in written.chunks_exact(16).zip(bytes.chunks_exact(16)) {
            assert_eq!(&a[0..12], &b[0..12]);
        }
    }

    #[test]
    fn poses_and_times_parse() {
        let dir = tempfile::tempdir().unwrap();
        let poses = dir.path().join("poses.txt");
        let times = dir.path().join("times.txt");
        std::fs::write(&poses, "1 0 0 5 0 1 0 0 0 0 1 0\n").unwrap();
        std::fs::write(&times, "2.5\n").unwrap();
        let loaded = load_poses_and_times(&poses, &times).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].rotation, Matrix3::identity());
        assert_eq!(loaded[0].translation, Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(loaded[0].timestamp, 2.5);
    }

    #[test]
    fn poses_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let poses = dir.path().join("poses.txt");
        let times = dir.path().join("times.txt");
        let line = "1 0 0 0 0 1 0 0 0 0 1 0\n";
        std::fs::write(&poses, line.repeat(3)).unwrap();
        std::fs::write(&times, "0.0\n1.0\n").unwrap();
        assert!(matches!(
            load_poses_and_times(&poses, &times),
            Err(PointCloudError::CountMismatch { poses: 3, times: 2 })
        ));
    }

    #[test]
    fn poses_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let poses = dir.path().join("poses.txt");
        let times = dir.path().join("times.txt");
        std::fs::write(&poses, "1 0 0 5\n").unwrap();
        std::fs::write(&times, "0.0\n").unwrap();
        assert!(matches!(
            load_poses_and_times(&poses, &times),
            Err(PointCloudError::BadPoseLine { line: 1, .. })
        ));
        // a non-orthonormal "rotation"
        std::fs::write(&poses, "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(
            load_poses_and_times(&poses, &times),
            Err(PointCloudError::NotARotation { line: 1 })
        ));
    }

    #[test]
    fn rotate_quarter_turn() {
        let c = cloud(vec![Point3::new(1.0, 0.0, 0.0)]);
        let r = rotate_z(&c, FRAC_PI_2).unwrap();
        assert_relative_eq!(r.points()[0].x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(r.points()[0].y, 1.0, epsilon = 1e-15);
        assert_eq!(r.points()[0].z, 0.0);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let c = cloud(vec![Point3::new(1.5, -2.0, 3.0), Point3::new(0.0, 0.0, 0.0)]);
        assert_eq!(rotate_z(&c, 0.0).unwrap(), c);
    }

    #[test]
    fn rotate_inverse_restores() {
        let c = cloud(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 0.5, -1.0)]);
        let back = rotate_z(&rotate_z(&c, 0.7).unwrap(), -0.7).unwrap();
        for (a, b) in back.points().iter().zip(c.points()) {
            assert_relative_eq!(a.x, b.x, epsilon = 1e-12);
            assert_relative_eq!(a.y, b.y, epsilon = 1e-12);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn rotate_rejects_non_finite_angle() {
        let c = cloud(vec![]);
        assert!(matches!(rotate_z(&c, f64::NAN), Err(PointCloudError::NonFiniteAngle)));
    }

    #[test]
    fn occlude_extent_zero_and_full() {
        let c = cloud(vec![Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)]);
        assert_eq!(occlude_sector(&c, 1.0, 0.0), c);
        assert!(occlude_sector(&c, 1.0, TAU).is_empty());
    }

    #[test]
    fn occlude_sector_membership() {
        let deg = |d: f64| d.to_radians();
        let at = |az: f64| Point3::new(az.cos(), az.sin(), 0.0);
        let c = cloud(vec![at(deg(10.0)), at(deg(25.0)), at(deg(50.0))]);
        let out = occlude_sector(&c, deg(10.0), deg(30.0));
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.points()[0].azimuth(), deg(50.0), epsilon = 1e-12);
    }

    #[test]
    fn occlude_wraps_around() {
        let at = |az: f64| Point3::new(az.cos(), az.sin(), 0.0);
        // sector [350deg, 20deg) removes azimuths 355 and 10, keeps 180
        let c = cloud(vec![at(355f64.to_radians()), at(10f64.to_radians()), at(PI)]);
        let out = occlude_sector(&c, 350f64.to_radians(), 30f64.to_radians());
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.points()[0].azimuth(), PI, epsilon = 1e-12);
    }

    #[test]
    fn occlusion_output_is_subsequence() {
        let c = synth_scene(&[GaussianBlob::isotropic(Vector3::zeros(), 5.0, 200)], 3).unwrap();
        let out = occlude_sector(&c, 1.0, 1.0);
        let mut it = c.points().iter();
        for p in out.points() {
            assert!(it.any(|q| q == p));
        }
    }

    #[test]
    fn synth_empty_blob() {
        let scene = synth_scene(&[GaussianBlob::isotropic(Vector3::zeros(), 1.0, 0)], 1).unwrap();
        assert!(scene.is_empty());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = vec![
            GaussianBlob::isotropic(Vector3::new(1.0, 2.0, 0.0), 0.5, 50),
            GaussianBlob::new(
                Vector3::new(-3.0, 0.0, 1.0),
                Matrix3::new(1.0, 0.2, 0.0, 0.2, 0.5, 0.0, 0.0, 0.0, 0.1),
                30,
            ),
        ];
        let a = synth_scene(&spec, 99).unwrap();
        let b = synth_scene(&spec, 99).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&spec, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_non_psd() {
        let bad = GaussianBlob::new(Vector3::zeros(), Matrix3::identity() * -1.0, 10);
        assert!(matches!(synth_scene(&[bad], 0), Err(PointCloudError::NotPsd { index: 0 })));
        let asym = GaussianBlob::new(
            Vector3::zeros(),
            Matrix3::new(1.0, 0.5, 0.0, -0.5, 1.0, 0.0, 0.0, 0.0, 1.0),
            10,
        );
        assert!(matches!(synth_scene(&[asym], 0), Err(PointCloudError::NotPsd { index: 0 })));
    }

    #[test]
    fn synth_matches_requested_covariance() {
        // leading sample eigenvalue of a (1, 1e-4, 1e-4) Gaussian stays near 1
        let cov = Matrix3::from_diagonal(&Vector3::new(1.0, 1e-4, 1e-4));
        let scene = synth_scene(&[GaussianBlob::new(Vector3::zeros(), cov, 10_000)], 7).unwrap();
        let n = scene.len() as f64;
        let mean = scene.points().iter().fold(Vector3::zeros(), |acc, p| acc + p.to_vector()) / n;
        let mut sample = Matrix3::zeros();
        for p in scene.points() {
            let d = p.to_vector() - mean;
            sample += d * d.transpose();
        }
        sample /= n;
        let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(sample).eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((eigs[0] - 1.0).abs() < 0.1, "leading eigenvalue {} drifted", eigs[0]);
    }

    #[test]
    fn rotation_preserves_distances_and_z() {
        let c = synth_scene(&[GaussianBlob::isotropic(Vector3::new(2.0, -1.0, 0.5), 2.0, 60)], 11).unwrap();
        let r = rotate_z(&c, 1.234).unwrap();
        assert_eq!(r.len(), c.len());
        for (a, b) in r.points().iter().zip(c.points()) {
            assert_eq!(a.z, b.z);
        }
        for i in (0..c.len()).step_by(7) {
            for j in (i + 1..c.len()).step_by(13) {
                let d0 = (c.points()[i].to_vector() - c.points()[j].to_vector()).norm();
                let d1 = (r.points()[i].to_vector() - r.points()[j].to_vector()).norm();
                assert!((d0 - d1).abs() <= 1e-9, "pairwise distance changed: {d0} vs {d1}");
            }
        }
    }

    #[test]
    fn azimuth_quadrants() {
        assert_eq!(Point3::new(0.0, 0.0, 0.0).azimuth(), 0.0);
        assert_relative_eq!(Point3::new(1.0, 1.0, 0.0).azimuth(), PI / 4.0);
        assert_relative_eq!(Point3::new(-1.0, 0.0, 0.0).azimuth(), PI);
        assert_relative_eq!(Point3::new(0.0, -1.0, 0.0).azimuth(), 3.0 * PI / 2.0);
        let just_below = Point3::new(1.0, -1e-300, 0.0).azimuth();
        assert!((0.0..TAU).contains(&just_below));
    }
}
