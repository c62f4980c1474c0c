//! The committed synthetic benchmark: a deterministic miniature world of
//! distinct places revisited several times under rotation, occlusion and
//! point jitter.
//!
//! Each place is a fixed arrangement of Gaussian blobs in world coordinates.
//! A "copy" of a place is one sensor visit: the sensor stands within a meter
//! of the place center at a random yaw, observes the world points in its own
//! frame, every point jittered, and a random 30-degree sector dropped. Same
//! config, same dataset, bit for bit.
//!
//! Copies of one place sit within 2 m of each other and places are 30 m
//! apart, so the default pairing thresholds label same-place pairs positive
//! and cross-place pairs negative.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::{extract_frame_features, FeatureConfig, FeatureError, FrameFeatures};
use crate::network::NetworkConfig;
use crate::pointcloud::{synth_scene, GaussianBlob, Point3, PointCloud, PoseStamped};
use crate::rng::{derive_seed, stream};
use crate::segmentation::GridConfig;
use crate::training::{LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchConfig {
    pub places: usize,
    pub copies_per_place: usize,
    /// trailing copies of each place held out of training
    pub holdout_per_place: usize,
    pub seed: u64,
    pub blobs_per_place_min: usize,
    pub blobs_per_place_max: usize,
    pub points_per_blob: usize,
    pub jitter_sigma: f64,
    pub occlusion_extent: f64,
    /// extra augmented visits generated per training copy (training split
    /// only; the committed evaluation frames are untouched)
    pub train_augment_factor: usize,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        Self {
            places: 20,
            copies_per_place: 10,
            holdout_per_place: 2,
            seed: 0,
            blobs_per_place_min: 12,
            blobs_per_place_max: 16,
            points_per_blob: 100,
            jitter_sigma: 0.03,
            occlusion_extent: TAU / 12.0,
            train_augment_factor: 4,
        }
    }
}

/// Grid used by the benchmark: coarse enough that a blob usually stays in
/// one cell, fine enough that different places occupy different cells.
pub fn toy_grid() -> GridConfig {
    GridConfig { sectors: 16, rings: 8, max_range: 40.0 }
}

pub fn toy_feature_config() -> FeatureConfig {
    // a higher floor than the library default: thin slivers of a blob cut by
    // a cell boundary would otherwise show up as spurious nodes
    FeatureConfig { min_points: 12, normalize_eigenvalues: false }
}

/// A compact network that trains in seconds on the benchmark.
pub fn toy_network_config() -> NetworkConfig {
    NetworkConfig {
        knn_k: 4,
        eu_layers: vec![vec![16, 16], vec![32]],
        eig_layers: vec![vec![16, 16], vec![32]],
        clusters: 8,
        descriptor_dim: 64,
    }
}

/// The committed training recipe for the benchmark.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        network: toy_network_config(),
        loss: LossConfig { alpha: 0.5, beta: 0.2, negatives_per_batch: 6 },
        epochs: 200,
        learning_rate: 1e-3,
        seed,
        queries_per_epoch: Some(60),
        stop_loss_ratio: Some(0.05),
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: ToyBenchConfig,
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<PoseStamped>,
    /// place id per frame
    pub place_of: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Frames used for training (the leading copies of each place).
    pub fn train_indices(&self) -> Vec<usize> {
        self.split(true)
    }

    /// Held-out frames (the trailing `holdout_per_place` copies).
    pub fn holdout_indices(&self) -> Vec<usize> {
        self.split(false)
    }

    fn split(&self, train: bool) -> Vec<usize> {
        let copies = self.config.copies_per_place;
        let cut = copies - self.config.holdout_per_place.min(copies);
        (0..self.len())
            .filter(|i| {
                let copy = i % copies;
                (copy < cut) == train
            })
            .collect()
    }

    /// Extracts segment features of every frame with the benchmark grid.
    pub fn extract_all(&self) -> Result<Vec<FrameFeatures>, FeatureError> {
        self.clouds
            .iter()
            .map(|c| extract_frame_features(c, &toy_grid(), &toy_feature_config()))
            .collect()
    }
}

/// Builds the benchmark world and all sensor visits. Frame order is
/// place-major: frame `p * copies + c` is copy c of place p.
pub fn generate(cfg: &ToyBenchConfig) -> ToyDataset {
    assert!(cfg.places >= 2, "need at least two places");
    assert!(cfg.copies_per_place >= 1);
    assert!(cfg.holdout_per_place < cfg.copies_per_place);
    let grid_cols = 5usize;
    let spacing = 30.0;

    let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::SCENES));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::AUGMENT));

    let mut clouds = Vec::with_capacity(cfg.places * cfg.copies_per_place);
    let mut poses = Vec::with_capacity(clouds.capacity());
    let mut place_of = Vec::with_capacity(clouds.capacity());

    for place in 0..cfg.places {
        let center = Vector3::new(
            (place % grid_cols) as f64 * spacing,
            (place / grid_cols) as f64 * spacing,
            0.0,
        );
        // the place's fixed world geometry
        let blob_count =
            scene_rng.random_range(cfg.blobs_per_place_min..=cfg.blobs_per_place_max);
        let mut blobs = Vec::with_capacity(blob_count);
        for _ in 0..blob_count {
            let angle = scene_rng.random::<f64>() * TAU;
            // away from the origin, where sectors are narrow and a blob
            // would smear across several cells
            let radius = 6.0 + scene_rng.random::<f64>() * 10.0;
            let height = scene_rng.random::<f64>() * 2.0;
            let blob_center = center
                + Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
            let sigma = Vector3::new(
                0.12 + scene_rng.random::<f64>() * 0.25,
                0.12 + scene_rng.random::<f64>() * 0.25,
                0.08 + scene_rng.random::<f64>() * 0.2,
            );
            let axis = Unit::new_normalize(Vector3::new(
                scene_rng.random::<f64>() - 0.5,
                scene_rng.random::<f64>() - 0.5,
                scene_rng.random::<f64>() - 0.5,
            ));
            let rot = Rotation3::from_axis_angle(&axis, scene_rng.random::<f64>() * TAU);
            let diag = Matrix3::from_diagonal(&sigma.map(|s| s * s));
            let cov = rot.matrix() * diag * rot.matrix().transpose();
            blobs.push(GaussianBlob::new(blob_center, cov, cfg.points_per_blob));
        }
        let world_seed = derive_seed(cfg.seed, stream::SCENES ^ (0x100 + place as u64));
        let world = synth_scene(&blobs, world_seed).expect("toy covariances are PSD");

        for copy in 0..cfg.copies_per_place {
            let frame_id = (place * cfg.copies_per_place + copy) as u64;
            // sensor pose: within 1 m of the place center, random yaw
            let offset_angle = augment_rng.random::<f64>() * TAU;
            let offset_radius = augment_rng.random::<f64>();
            let yaw = augment_rng.random::<f64>() * TAU;
            let position = center
                + Vector3::new(
                    offset_radius * offset_angle.cos(),
                    offset_radius * offset_angle.sin(),
                    0.0,
                );
            let rotation =
                Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix().to_owned();
            let occlusion_start = augment_rng.random::<f64>() * TAU;

            // world -> sensor frame, plus per-point jitter
            let inv = rotation.transpose();
            let points: Vec<Point3> = world
                .points()
                .iter()
                .map(|p| {
                    let jitter = Vector3::new(
                        augment_rng.sample::<f64, _>(StandardNormal),
                        augment_rng.sample::<f64, _>(StandardNormal),
                        augment_rng.sample::<f64, _>(StandardNormal),
                    ) * cfg.jitter_sigma;
                    Point3::from_vector(inv * (p.to_vector() - position) + jitter)
                })
                .collect();
            let cloud = PointCloud::new(points, frame_id, frame_id as f64 * 40.0)
                .expect("toy points are finite");
            let cloud = crate::pointcloud::occlude_sector(
                &cloud,
                occlusion_start,
                cfg.occlusion_extent,
            );
            clouds.push(cloud);
            poses.push(PoseStamped {
                rotation,
                translation: position,
                timestamp: frame_id as f64 * 40.0,
            });
            place_of.push(place);
        }
    }

    ToyDataset { config: *cfg, clouds, poses, place_of }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{build_pair_index, PairingConfig};

    #[test]
    fn generation_is_deterministic() {
        let cfg = ToyBenchConfig {
            places: 3,
            copies_per_place: 2,
            holdout_per_place: 1,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.clouds, b.clouds);
        assert_eq!(a.poses.len(), 6);
        let c = generate(&ToyBenchConfig { seed: 1, ..cfg });
        assert_ne!(a.clouds, c.clouds);
    }

    #[test]
    fn pairing_matches_place_structure() {
        let cfg = ToyBenchConfig { places: 4, copies_per_place: 3, ..Default::default() };
        let data = generate(&cfg);
        let pairs = build_pair_index(&data.poses, &PairingConfig::default());
        for i in 0..data.len() {
            for &j in pairs.positives(i) {
                assert_eq!(data.place_of[i], data.place_of[j]);
            }
            for &j in pairs.negatives(i) {
                assert_ne!(data.place_of[i], data.place_of[j]);
            }
            // every same-place partner is a positive, every other place a negative
            assert_eq!(pairs.positives(i).len(), cfg.copies_per_place - 1);
            assert_eq!(
                pairs.negatives(i).len(),
                (cfg.places - 1) * cfg.copies_per_place
            );
        }
    }

    #[test]
    fn every_frame_is_usable() {
        let cfg = ToyBenchConfig { places: 6, copies_per_place: 4, ..Default::default() };
        let data = generate(&cfg);
        let k = toy_network_config().knn_k;
        let frames = data.extract_all().unwrap();
        for (i, f) in frames.iter().enumerate() {
            assert!(
                f.len() > k,
                "frame {i} has only {} usable segments (need > {k})",
                f.len()
            );
        }
    }

    #[test]
    fn train_holdout_split_covers_everything() {
        let cfg = ToyBenchConfig { places: 3, copies_per_place: 5, holdout_per_place: 2, ..Default::default() };
        let data = generate(&cfg);
        let train = data.train_indices();
        let holdout = data.holdout_indices();
        assert_eq!(train.len(), 9);
        assert_eq!(holdout.len(), 6);
        let mut all: Vec<usize> = train.iter().chain(&holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
    }
}
