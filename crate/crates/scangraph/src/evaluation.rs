//! Retrieval-quality evaluation: precision/recall sweeps, F1max, Extended
//! Precision, the positive-plus-sampled-negative pair protocol, and the
//! rotation/occlusion robustness runs.
//!
//! Pair similarity is the negative Euclidean descriptor distance; since
//! descriptors are unit-norm this ranks identically to cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_frame_features, FeatureConfig, FeatureError};
use crate::network::{describe, Descriptor, DescriptorNet, NetworkError};
use crate::pointcloud::{occlude_sector, rotate_z, PointCloud, PointCloudError};
use crate::rng::{derive_seed, stream};
use crate::segmentation::GridConfig;
use crate::training::PairIndex;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the pair index yields no positive pair")]
    NoPositivePairs,
    #[error("the pair index yields no negative pair")]
    NoNegativePairs,
    #[error("scores must contain at least one positive and one negative label")]
    DegenerateLabels,
    #[error("non-finite similarity score")]
    NonFiniteScore,
    #[error("no descriptor for frame {frame}")]
    MissingDescriptor { frame: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error("failed to write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative,
}

/// One scored query/candidate pair with its ground-truth label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub query: u64,
    pub candidate: u64,
    pub score: f64,
    pub label: PairLabel,
}

/// One point of the PR sweep: predictions are "positive" iff score >= tau.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub sequence: Option<String>,
    pub perturbation: Option<String>,
    pub seed: u64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub curve: Vec<PrPoint>,
    pub f1_max: f64,
    pub extended_precision: f64,
    pub metadata: EvalMetadata,
}

/// Sweeps the decision threshold over every distinct score, descending.
/// Precision and recall at each point come from exact confusion counts, so
/// `precision == 1.0` holds exactly when there are no false positives.
pub fn pr_curve(scores: &[LabeledScore]) -> Result<Vec<PrPoint>, EvalError> {
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let total_positive = scores.iter().filter(|s| s.label == PairLabel::Positive).count();
    let total_negative = scores.len() - total_positive;
    if total_positive == 0 || total_negative == 0 {
        return Err(EvalError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].score.partial_cmp(&scores[a].score).unwrap());

    let mut curve = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let tau = scores[order[i]].score;
        // consume the whole group of equal scores before emitting a point
        while i < order.len() && scores[order[i]].score == tau {
            match scores[order[i]].label {
                PairLabel::Positive => tp += 1,
                PairLabel::Negative => fp += 1,
            }
            i += 1;
        }
        curve.push(PrPoint {
            threshold: tau,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_positive as f64,
        });
    }
    Ok(curve)
}

/// Maximum F1 over the curve; points with zero precision and recall
/// contribute 0. An empty curve scores 0.
pub fn f1_max(curve: &[PrPoint]) -> f64 {
    curve
        .iter()
        .map(|p| {
            if p.precision + p.recall > 0.0 {
                2.0 * p.precision * p.recall / (p.precision + p.recall)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Extended Precision: (P_R0 + R_P100)/2, where P_R0 is the best precision
/// at the smallest strictly-positive recall and R_P100 the largest recall at
/// precision exactly 1. Whenever P_R0 < 1, R_P100 is forced to 0.
pub fn extended_precision(curve: &[PrPoint]) -> f64 {
    let min_recall = curve
        .iter()
        .filter(|p| p.recall > 0.0)
        .map(|p| p.recall)
        .fold(f64::INFINITY, f64::min);
    if !min_recall.is_finite() {
        return 0.0;
    }
    let p_r0 = curve
        .iter()
        .filter(|p| p.recall == min_recall)
        .map(|p| p.precision)
        .fold(0.0, f64::max);
    let r_p100 = if p_r0 < 1.0 {
        0.0
    } else {
        curve
            .iter()
            .filter(|p| p.precision == 1.0)
            .map(|p| p.recall)
            .fold(0.0, f64::max)
    };
    (p_r0 + r_p100) / 2.0
}

/// Scores every positive pair and up to `np_multiplier` times as many
/// seeded-sampled negative pairs (the whole pool when it is smaller), with
/// the later frame of each pair as the query. Returns the labeled scores and
/// the negative count actually used.
fn score_pairs(
    query_descriptors: &BTreeMap<usize, Descriptor>,
    candidate_descriptors: &BTreeMap<usize, Descriptor>,
    pairs: &PairIndex,
    np_multiplier: usize,
    seed: u64,
) -> Result<Vec<LabeledScore>, EvalError> {
    let mut scores = Vec::new();
    let mut push = |i: usize, j: usize, label: PairLabel| -> Result<(), EvalError> {
        // j > i: the later frame queries the earlier one
        let q = query_descriptors.get(&j).ok_or(EvalError::MissingDescriptor { frame: j })?;
        let c = candidate_descriptors.get(&i).ok_or(EvalError::MissingDescriptor { frame: i })?;
        scores.push(LabeledScore {
            query: j as u64,
            candidate: i as u64,
            score: -q.distance(c),
            label,
        });
        Ok(())
    };

    let mut positive_count = 0usize;
    for i in 0..pairs.len() {
        for &j in pairs.positives(i) {
            if j > i {
                push(i, j, PairLabel::Positive)?;
                positive_count += 1;
            }
        }
    }
    if positive_count == 0 {
        return Err(EvalError::NoPositivePairs);
    }

    // per-frame counts of unordered negative pairs (i, j>i), then a flat
    // index space over them for uniform sampling
    let suffix_start: Vec<usize> =
        (0..pairs.len()).map(|i| pairs.negatives(i).partition_point(|&j| j <= i)).collect();
    let block: Vec<usize> =
        (0..pairs.len()).map(|i| pairs.negatives(i).len() - suffix_start[i]).collect();
    let mut cumulative = Vec::with_capacity(block.len() + 1);
    cumulative.push(0usize);
    for b in &block {
        cumulative.push(cumulative.last().unwrap() + b);
    }
    let pool = *cumulative.last().unwrap();
    if pool == 0 {
        return Err(EvalError::NoNegativePairs);
    }
    let wanted = np_multiplier.saturating_mul(positive_count).min(pool);

    let decode = |flat: usize| -> (usize, usize) {
        let i = cumulative.partition_point(|&c| c <= flat) - 1;
        let j = pairs.negatives(i)[suffix_start[i] + (flat - cumulative[i])];
        (i, j)
    };

    if wanted == pool {
        for flat in 0..pool {
            let (i, j) = decode(flat);
            push(i, j, PairLabel::Negative)?;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::NEGATIVE_PAIRS));
        let mut chosen = BTreeSet::new();
        while chosen.len() < wanted {
            chosen.insert(rng.random_range(0..pool));
        }
        for flat in chosen {
            let (i, j) = decode(flat);
            push(i, j, PairLabel::Negative)?;
        }
    }
    Ok(scores)
}

/// Full evaluation of one sequence: all positive pairs plus
/// `np_multiplier * Np` sampled negatives, scored by descriptor distance.
pub fn evaluate_sequence(
    descriptors: &BTreeMap<usize, Descriptor>,
    pairs: &PairIndex,
    np_multiplier: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let scores = score_pairs(descriptors, descriptors, pairs, np_multiplier, seed)?;
    report_from_scores(scores, seed, None)
}

fn report_from_scores(
    scores: Vec<LabeledScore>,
    seed: u64,
    perturbation: Option<String>,
) -> Result<EvalReport, EvalError> {
    let positive_pairs = scores.iter().filter(|s| s.label == PairLabel::Positive).count();
    let negative_pairs = scores.len() - positive_pairs;
    let curve = pr_curve(&scores)?;
    Ok(EvalReport {
        f1_max: f1_max(&curve),
        extended_precision: extended_precision(&curve),
        curve,
        metadata: EvalMetadata {
            sequence: None,
            perturbation,
            seed,
            positive_pairs,
            negative_pairs,
        },
    })
}

/// A per-query-cloud perturbation for the robustness runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    /// z-rotation by an angle drawn uniformly from [0, max_angle)
    Rotation { max_angle: f64 },
    /// drop one sector of the given angular extent at a uniform random start
    Occlusion { extent: f64 },
}

impl Perturbation {
    /// Uniform rotation over the full circle.
    pub fn random_rotation() -> Self {
        Self::Rotation { max_angle: TAU }
    }

    /// A randomly placed 30-degree occlusion.
    pub fn sector_occlusion() -> Self {
        Self::Occlusion { extent: TAU / 12.0 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Rotation { .. } => "rotation",
            Self::Occlusion { .. } => "occlusion",
        }
    }

    pub fn apply(&self, cloud: &PointCloud, rng: &mut impl Rng) -> PointCloud {
        match *self {
            Self::Rotation { max_angle } => {
                let angle = if max_angle > 0.0 { rng.random_range(0.0..max_angle) } else { 0.0 };
                rotate_z(cloud, angle).expect("finite angle")
            }
            Self::Occlusion { extent } => {
                let start = rng.random_range(0.0..TAU);
                occlude_sector(cloud, start, extent)
            }
        }
    }
}

/// Shared settings of an evaluation run.
pub struct EvalContext<'a> {
    pub pairs: &'a PairIndex,
    pub grid: &'a GridConfig,
    pub features: &'a FeatureConfig,
    pub np_multiplier: usize,
}

/// Extracts features and describes every cloud; the map key is the cloud's
/// position (which must line up with the pair index).
pub fn describe_all(
    clouds: &[PointCloud],
    net: &DescriptorNet,
    grid: &GridConfig,
    features: &FeatureConfig,
) -> Result<BTreeMap<usize, Descriptor>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, cloud) in clouds.iter().enumerate() {
        let frame = extract_frame_features(cloud, grid, features)?;
        out.insert(i, describe(&frame, net)?);
    }
    Ok(out)
}

/// Applies a seeded random perturbation to every query cloud, re-extracts
/// descriptors, and evaluates them against the unperturbed database side.
pub fn robustness_eval(
    clouds: &[PointCloud],
    net: &DescriptorNet,
    ctx: &EvalContext<'_>,
    perturbation: Perturbation,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let base = describe_all(clouds, net, ctx.grid, ctx.features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PERTURB));
    let mut perturbed = BTreeMap::new();
    for (i, cloud) in clouds.iter().enumerate() {
        let moved = perturbation.apply(cloud, &mut rng);
        let frame = extract_frame_features(&moved, ctx.grid, ctx.features)?;
        perturbed.insert(i, describe(&frame, net)?);
    }
    let scores = score_pairs(&perturbed, &base, ctx.pairs, ctx.np_multiplier, seed)?;
    report_from_scores(scores, seed, Some(perturbation.label().to_string()))
}

/// Writes the curve as `tau,precision,recall` CSV.
pub fn write_pr_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut text = String::from("tau,precision,recall\n");
    for p in curve {
        text.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    std::fs::write(path, text)
        .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}
