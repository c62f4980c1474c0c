//! Pair mining from ground-truth poses, the lazy quadruplet loss, analytic
//! gradients of the whole descriptor pipeline, and a seeded Adam training
//! loop.
//!
//! Training is deterministic: one top-level seed drives weight init, epoch
//! shuffling and quadruplet sampling through separate derived streams, and
//! gradient accumulation order is fixed.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FrameFeatures;
use crate::network::{
    describe_backward, describe_cached, DescribeCache, DescriptorNet, Fnv, NetworkConfig,
    NetworkError,
};
use crate::pointcloud::PoseStamped;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("a quadruplet needs at least one negative")]
    NoNegatives,
    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),
    #[error("dataset yields no valid quadruplet")]
    NoValidQuadruplets,
    #[error("{frames} frames but the pair index covers {indexed}")]
    DatasetMismatch { frames: usize, indexed: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("failed to write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Distance/time thresholds for labeling frame pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    /// pairs closer than this are positives
    pub positive_threshold: f64,
    /// pairs farther than this are negatives
    pub negative_threshold: f64,
    /// pairs closer in time than this never count as positives
    pub time_exclusion: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { positive_threshold: 3.0, negative_threshold: 20.0, time_exclusion: 30.0 }
    }
}

/// Per-frame positive and negative partner lists (ascending frame index).
/// Pairs between the two thresholds stay unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct PairIndex {
    config: PairingConfig,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, frame: usize) -> &[usize] {
        &self.positives[frame]
    }

    pub fn negatives(&self, frame: usize) -> &[usize] {
        &self.negatives[frame]
    }

    pub fn config(&self) -> &PairingConfig {
        &self.config
    }

    /// Number of unordered positive pairs.
    pub fn positive_pair_count(&self) -> usize {
        self.positives
            .iter()
            .enumerate()
            .map(|(i, l)| l.iter().filter(|&&j| j > i).count())
            .sum()
    }

    /// Number of unordered negative pairs.
    pub fn negative_pair_count(&self) -> usize {
        self.negatives
            .iter()
            .enumerate()
            .map(|(i, l)| l.iter().filter(|&&j| j > i).count())
            .sum()
    }
}

/// Labels every frame pair by translation distance: positive below the
/// positive threshold (unless the timestamps are closer than the exclusion
/// window), negative above the negative threshold.
pub fn build_pair_index(poses: &[PoseStamped], config: &PairingConfig) -> PairIndex {
    let n = poses.len();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = poses[i].distance(&poses[j]);
            if d < config.positive_threshold {
                if (poses[i].timestamp - poses[j].timestamp).abs() >= config.time_exclusion {
                    positives[i].push(j);
                    positives[j].push(i);
                }
            } else if d > config.negative_threshold {
                negatives[i].push(j);
                negatives[j].push(i);
            }
        }
    }
    PairIndex { config: *config, positives, negatives }
}

/// Margins and batch shape of the quadruplet loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub negatives_per_batch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.2, negatives_per_batch: 18 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(TrainingError::InvalidLossConfig("margins must be positive".into()));
        }
        if self.negatives_per_batch < 1 {
            return Err(TrainingError::InvalidLossConfig(
                "need at least one negative per batch".into(),
            ));
        }
        Ok(())
    }
}

struct LossParts {
    value: f64,
    term1: f64,
    term1_arg: usize,
    term2: f64,
    term2_arg: usize,
}

/// Both hinge terms share the query-positive distance; the second hinge
/// compares it against the distances from a cross-query negative to this
/// batch's negatives rather than against query distances.
fn loss_parts(
    query: &DVector<f64>,
    positive: &DVector<f64>,
    negatives: &[DVector<f64>],
    cross_negative: &DVector<f64>,
    cfg: &LossConfig,
) -> Result<LossParts, TrainingError> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(TrainingError::NoNegatives);
    }
    let dim = query.len();
    for v in [positive, cross_negative].into_iter().chain(negatives) {
        if v.len() != dim {
            return Err(TrainingError::DimMismatch { left: dim, right: v.len() });
        }
    }
    let d_pos = (query - positive).norm();
    let mut term1 = f64::NEG_INFINITY;
    let mut term1_arg = 0;
    let mut term2 = f64::NEG_INFINITY;
    let mut term2_arg = 0;
    for (j, neg) in negatives.iter().enumerate() {
        let v1 = cfg.alpha + d_pos - (query - neg).norm();
        if v1 > term1 {
            term1 = v1;
            term1_arg = j;
        }
        let v2 = cfg.beta + d_pos - (cross_negative - neg).norm();
        if v2 > term2 {
            term2 = v2;
            term2_arg = j;
        }
    }
    let term1 = term1.max(0.0);
    let term2 = term2.max(0.0);
    Ok(LossParts { value: term1 + term2, term1, term1_arg, term2, term2_arg })
}

/// The lazy quadruplet loss over descriptor vectors.
pub fn lazy_quadruplet_loss(
    query: &DVector<f64>,
    positive: &DVector<f64>,
    negatives: &[DVector<f64>],
    cross_negative: &DVector<f64>,
    cfg: &LossConfig,
) -> Result<f64, TrainingError> {
    loss_parts(query, positive, negatives, cross_negative, cfg).map(|p| p.value)
}

/// One training batch as frame indices into a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadrupletBatch {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub cross_negative: usize,
}

impl QuadrupletBatch {
    pub fn resolve<'a>(&self, frames: &'a [FrameFeatures]) -> Quadruplet<'a> {
        Quadruplet {
            query: &frames[self.query],
            positive: &frames[self.positive],
            negatives: self.negatives.iter().map(|&i| &frames[i]).collect(),
            cross_negative: &frames[self.cross_negative],
        }
    }
}

/// Samples a quadruplet for `query`: a uniform positive, up to
/// `negatives_per_batch` distinct negatives, and a cross negative drawn from
/// another query's negative list. All member ids are distinct and only
/// frames marked usable participate. Returns None when the query cannot
/// form a batch.
pub fn sample_quadruplet(
    index: &PairIndex,
    usable: &[bool],
    query: usize,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Option<QuadrupletBatch> {
    if !usable[query] {
        return None;
    }
    let positives: Vec<usize> =
        index.positives(query).iter().copied().filter(|&i| usable[i]).collect();
    let mut pool: Vec<usize> =
        index.negatives(query).iter().copied().filter(|&i| usable[i]).collect();
    if positives.is_empty() || pool.is_empty() {
        return None;
    }
    let positive = positives[rng.random_range(0..positives.len())];

    // partial Fisher-Yates: m distinct negatives
    let m = cfg.negatives_per_batch.min(pool.len());
    for i in 0..m {
        let pick = rng.random_range(i..pool.len());
        pool.swap(i, pick);
    }
    pool.truncate(m);
    let negatives = pool;

    let candidates: Vec<usize> = (0..index.len())
        .filter(|&q| q != query && !index.negatives(q).is_empty())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    for _ in 0..64 {
        let other = candidates[rng.random_range(0..candidates.len())];
        let list = index.negatives(other);
        let cross = list[rng.random_range(0..list.len())];
        let distinct =
            usable[cross] && cross != query && cross != positive && !negatives.contains(&cross);
        if distinct {
            return Some(QuadrupletBatch { query, positive, negatives, cross_negative: cross });
        }
    }
    None
}

/// The frames of one quadruplet, resolved from their indices.
pub struct Quadruplet<'a> {
    pub query: &'a FrameFeatures,
    pub positive: &'a FrameFeatures,
    pub negatives: Vec<&'a FrameFeatures>,
    pub cross_negative: &'a FrameFeatures,
}

/// Loss value plus a hash of every discrete routing choice made while
/// computing it (rectifier activity, pool winners, hinge/argmax selections).
/// Finite-difference probes compare signatures to stay off the kinks.
pub struct LossEval {
    pub loss: f64,
    pub routing: u64,
}

/// Forward-only evaluation of the batch loss.
pub fn quadruplet_loss_eval(
    quad: &Quadruplet,
    net: &DescriptorNet,
    cfg: &LossConfig,
) -> Result<LossEval, TrainingError> {
    let (loss, _, routing) = forward_batch(quad, net, cfg)?;
    Ok(LossEval { loss, routing })
}

/// Loss plus exact reverse-mode gradients for every parameter, flattened in
/// [`DescriptorNet::to_vec`] order. Hinges and max selections contribute
/// subgradient 0 at their kinks; ties pick the lowest index.
pub struct GradientEval {
    pub loss: f64,
    pub gradients: Vec<f64>,
    pub routing: u64,
}

pub fn gradients(
    quad: &Quadruplet,
    net: &DescriptorNet,
    cfg: &LossConfig,
) -> Result<GradientEval, TrainingError> {
    let (loss, state, routing) = forward_batch(quad, net, cfg)?;
    let BatchState { parts, query, positive, negatives, cross } = state;

    let dim = query.0.len();
    let mut g_query = DVector::zeros(dim);
    let mut g_positive = DVector::zeros(dim);
    let mut g_negatives = vec![DVector::zeros(dim); negatives.len()];
    let mut g_cross = DVector::zeros(dim);

    // d|a - b| / da = (a - b)/|a - b|, zero at coincident points
    let dist_grad = |a: &DVector<f64>, b: &DVector<f64>| {
        let diff = a - b;
        let n = diff.norm();
        if n > 1e-300 {
            diff / n
        } else {
            DVector::zeros(dim)
        }
    };

    let g_pos_dist = dist_grad(&query.0, &positive.0);
    if parts.term1 > 0.0 {
        g_query += &g_pos_dist;
        g_positive -= &g_pos_dist;
        let g = dist_grad(&query.0, &negatives[parts.term1_arg].0);
        g_query -= &g;
        g_negatives[parts.term1_arg] += &g;
    }
    if parts.term2 > 0.0 {
        g_query += &g_pos_dist;
        g_positive -= &g_pos_dist;
        let g = dist_grad(&cross.0, &negatives[parts.term2_arg].0);
        g_cross -= &g;
        g_negatives[parts.term2_arg] += &g;
    }

    let mut acc = net.zeros_like();
    let mut backprop = |grad: &DVector<f64>, cache: &DescribeCache| {
        if grad.iter().any(|&v| v != 0.0) {
            describe_backward(net, cache, grad, &mut acc);
        }
    };
    backprop(&g_query, &query.1);
    backprop(&g_positive, &positive.1);
    for (g, (_, cache)) in g_negatives.iter().zip(&negatives) {
        backprop(g, cache);
    }
    backprop(&g_cross, &cross.1);

    Ok(GradientEval { loss, gradients: acc.to_vec(), routing })
}

type MemberState = (DVector<f64>, DescribeCache);

struct BatchState {
    parts: LossParts,
    query: MemberState,
    positive: MemberState,
    negatives: Vec<MemberState>,
    cross: MemberState,
}

fn forward_batch(
    quad: &Quadruplet,
    net: &DescriptorNet,
    cfg: &LossConfig,
) -> Result<(f64, BatchState, u64), TrainingError> {
    let mut hash = Fnv::new();
    let mut member = |frame: &FrameFeatures| -> Result<MemberState, TrainingError> {
        let (desc, cache) = describe_cached(frame, net)?;
        hash.u64(cache.routing_signature());
        Ok((desc.vector().clone(), cache))
    };
    let query = member(quad.query)?;
    let positive = member(quad.positive)?;
    let mut negatives = Vec::with_capacity(quad.negatives.len());
    for frame in &quad.negatives {
        negatives.push(member(frame)?);
    }
    let cross = member(quad.cross_negative)?;

    let neg_vecs: Vec<DVector<f64>> = negatives.iter().map(|(v, _)| v.clone()).collect();
    let parts = loss_parts(&query.0, &positive.0, &neg_vecs, &cross.0, cfg)?;
    hash.bit(parts.term1 > 0.0);
    hash.u64(parts.term1_arg as u64);
    hash.bit(parts.term2 > 0.0);
    hash.u64(parts.term2_arg as u64);
    let loss = parts.value;
    let routing = hash.finish();
    Ok((loss, BatchState { parts, query, positive, negatives, cross }, routing))
}

/// Adam over a flat parameter vector.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; params],
            second_moment: vec![0.0; params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * grads[i];
            *v = self.beta2 * *v + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Everything the `train` entry point needs, serializable as one JSON
/// document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// None trains on every eligible query each epoch.
    #[serde(default)]
    pub queries_per_epoch: Option<usize>,
    /// Stop once an epoch's mean loss drops below this fraction of the
    /// first epoch's mean loss.
    #[serde(default)]
    pub stop_loss_ratio: Option<f64>,
}

fn default_learning_rate() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            epochs: 0,
            learning_rate: default_learning_rate(),
            seed: 0,
            queries_per_epoch: None,
            stop_loss_ratio: None,
        }
    }
}

pub struct TrainOutcome {
    pub network: DescriptorNet,
    /// mean batch loss per completed epoch
    pub epoch_mean_loss: Vec<f64>,
}

/// Trains a fresh network on the given frames. `frames[i]` must correspond
/// to pose i of the index behind `pairs`.
pub fn train(
    frames: &[FrameFeatures],
    pairs: &PairIndex,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    cfg.loss.validate()?;
    if frames.len() != pairs.len() {
        return Err(TrainingError::DatasetMismatch { frames: frames.len(), indexed: pairs.len() });
    }
    let mut net = DescriptorNet::init(cfg.network.clone(), derive_seed(cfg.seed, stream::INIT))?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { network: net, epoch_mean_loss: Vec::new() });
    }

    let usable: Vec<bool> = frames.iter().map(|f| f.len() > cfg.network.knn_k).collect();
    let eligible: Vec<usize> = (0..frames.len())
        .filter(|&i| usable[i] && !pairs.positives(i).is_empty() && !pairs.negatives(i).is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(TrainingError::NoValidQuadruplets);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::BATCHES));
    let mut params = net.to_vec();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.queries_per_epoch {
            order.truncate(cap.max(1));
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for &query in &order {
            let Some(batch) = sample_quadruplet(pairs, &usable, query, &cfg.loss, &mut rng) else {
                continue;
            };
            let quad = batch.resolve(frames);
            let eval = gradients(&quad, &net, &cfg.loss)?;
            if eval.gradients.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::Network(NetworkError::NonFiniteOutput));
            }
            adam.step(&mut params, &eval.gradients);
            net.set_from_slice(&params);
            total += eval.loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(TrainingError::NoValidQuadruplets);
        }
        epoch_mean_loss.push(total / batches as f64);
        if let Some(ratio) = cfg.stop_loss_ratio {
            let first = epoch_mean_loss[0];
            if first > 0.0 && epoch_mean_loss.last().unwrap() / first < ratio {
                break;
            }
        }
    }
    Ok(TrainOutcome { network: net, epoch_mean_loss })
}

/// Writes the per-epoch loss log as `epoch,mean_loss` CSV (1-based epochs).
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<(), TrainingError> {
    let path = path.as_ref();
    let mut text = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(path, text)
        .map_err(|source| TrainingError::Io { path: path.to_path_buf(), source })
}
