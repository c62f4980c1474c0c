//! The descriptor network.
//!
//! Two parallel branches ingest the frame's segment features: one the
//! centroid coordinates, the other the eigenvalue triples. Each branch builds
//! a static KNN graph over its own feature space, then stacks graph layers
//! that apply a shared MLP to every edge feature `(f_j - f_i, f_j)` and
//! max-pool over each node's neighborhood. Branch outputs are concatenated
//! per node, aggregated by NetVLAD, compressed by a fully connected layer and
//! L2-normalized into a fixed-size unit descriptor.
//!
//! Everything runs in f64 and every stage has a hand-derived backward pass,
//! so training gradients are exact (finite differences verify them in the
//! test suite).

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FrameFeatures;
use crate::graph::{edge_features, knn, GraphError, KnnGraph};

pub mod io;
mod layers;
mod netvlad;

pub use io::{load_network, save_network, NETWORK_MAGIC};
pub use layers::{max_pool, max_pool_backward, Linear, Mlp, MlpCache};
pub use netvlad::{NetVlad, NetVladCache};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("frame has {segments} usable segments; knn needs more than k = {k}")]
    InsufficientSegments { segments: usize, k: usize },
    #[error("non-finite network output (diverged parameters?)")]
    NonFiniteOutput,
    #[error("descriptor norm {norm} is not within 1e-6 of 1")]
    NotUnitNorm { norm: f64 },
    #[error("non-finite descriptor component")]
    NonFiniteDescriptor,
    #[error("parameter vector has {got} values, config needs {expected}")]
    ParamCountMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("failed to {action} {path}: {source}")]
    Io { action: &'static str, path: PathBuf, source: std::io::Error },
    #[error("{path}: not a network parameter file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated or corrupt network file")]
    Truncated { path: PathBuf },
    #[error("{path}: network file holds a non-finite parameter")]
    NonFiniteParam { path: PathBuf },
}

/// Architecture hyperparameters.
///
/// `eu_layers` / `eig_layers` give, per graph layer, the widths of that
/// layer's shared MLP. The first MLP of a branch sees edge features of width
/// 2*3; each following layer sees 2x its predecessor's output. The per-node
/// feature fed to NetVLAD has dimension `node_dim()` (both branch outputs
/// concatenated) and the final descriptor has `descriptor_dim` components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub knn_k: usize,
    pub eu_layers: Vec<Vec<usize>>,
    pub eig_layers: Vec<Vec<usize>>,
    pub clusters: usize,
    pub descriptor_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            knn_k: 10,
            eu_layers: vec![vec![64, 64], vec![128]],
            eig_layers: vec![vec![64, 64], vec![128]],
            clusters: 32,
            descriptor_dim: 256,
        }
    }
}

impl NetworkConfig {
    pub const INPUT_DIM: usize = 3;

    pub fn validate(&self) -> Result<(), NetworkError> {
        let branch_ok = |layers: &Vec<Vec<usize>>, name: &str| {
            if layers.is_empty() {
                return Err(NetworkError::InvalidConfig(format!("{name} branch has no layers")));
            }
            for (i, widths) in layers.iter().enumerate() {
                if widths.is_empty() {
                    return Err(NetworkError::InvalidConfig(format!(
                        "{name} branch layer {i} has no sublayers"
                    )));
                }
                if widths.iter().any(|&w| w == 0) {
                    return Err(NetworkError::InvalidConfig(format!(
                        "{name} branch layer {i} has a zero width"
                    )));
                }
            }
            Ok(())
        };
        branch_ok(&self.eu_layers, "euclidean")?;
        branch_ok(&self.eig_layers, "eigenvalue")?;
        if self.knn_k < 1 {
            return Err(NetworkError::InvalidConfig("knn k must be at least 1".into()));
        }
        if self.clusters < 1 {
            return Err(NetworkError::InvalidConfig("cluster count must be at least 1".into()));
        }
        if self.descriptor_dim < 1 {
            return Err(NetworkError::InvalidConfig("descriptor dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn branch_out_dim(layers: &[Vec<usize>]) -> usize {
        *layers.last().unwrap().last().unwrap()
    }

    /// Per-node feature dimension after branch concatenation.
    pub fn node_dim(&self) -> usize {
        Self::branch_out_dim(&self.eu_layers) + Self::branch_out_dim(&self.eig_layers)
    }

    /// Affine layer shapes of one branch in forward order.
    fn branch_shapes(layers: &[Vec<usize>]) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut node_dim = Self::INPUT_DIM;
        for widths in layers {
            let mut in_dim = 2 * node_dim;
            for &w in widths {
                shapes.push((w, in_dim));
                in_dim = w;
            }
            node_dim = *widths.last().unwrap();
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        let affine = |shapes: Vec<(usize, usize)>| {
            shapes.iter().map(|&(o, i)| o * i + o).sum::<usize>()
        };
        let branches = affine(Self::branch_shapes(&self.eu_layers))
            + affine(Self::branch_shapes(&self.eig_layers));
        let d = self.node_dim();
        let vlad = 2 * self.clusters * d + self.clusters;
        let fc = self.descriptor_dim * (d * self.clusters) + self.descriptor_dim;
        branches + vlad + fc
    }
}

/// A unit-norm global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: DVector<f64>,
}

impl Descriptor {
    pub fn new(values: DVector<f64>) -> Result<Self, NetworkError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteDescriptor);
        }
        let norm = values.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(NetworkError::NotUnitNorm { norm });
        }
        Ok(Self { values })
    }

    pub fn from_f32_slice(values: &[f32]) -> Result<Self, NetworkError> {
        Self::new(DVector::from_iterator(values.len(), values.iter().map(|&v| v as f64)))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        (&self.values - &other.values).norm()
    }
}

/// All trainable parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorNet {
    pub config: NetworkConfig,
    pub eu_branch: Vec<Mlp>,
    pub eig_branch: Vec<Mlp>,
    pub vlad: NetVlad,
    pub fc: Linear,
}

impl DescriptorNet {
    /// Seeded init: every weight and bias is drawn uniformly from
    /// +-1/sqrt(fan_in), in declaration order, so the same config and seed
    /// reproduce parameters bit-for-bit.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // draws happen row-major, weight then bias, in declaration order
        let mut draw = |out: usize, inp: usize| {
            let bound = 1.0 / (inp as f64).sqrt();
            let mut weight = DMatrix::zeros(out, inp);
            for r in 0..out {
                for c in 0..inp {
                    weight[(r, c)] = rng.random::<f64>() * 2.0 * bound - bound;
                }
            }
            let bias = DVector::from_fn(out, |_, _| rng.random::<f64>() * 2.0 * bound - bound);
            Linear { weight, bias }
        };
        let build_branch = |draw: &mut dyn FnMut(usize, usize) -> Linear,
                            layers: &[Vec<usize>]| {
            let mut mlps = Vec::new();
            let mut node_dim = NetworkConfig::INPUT_DIM;
            for widths in layers {
                let mut linears = Vec::new();
                let mut in_dim = 2 * node_dim;
                for &w in widths {
                    linears.push(draw(w, in_dim));
                    in_dim = w;
                }
                mlps.push(Mlp { layers: linears });
                node_dim = *widths.last().unwrap();
            }
            mlps
        };
        let eu_branch = build_branch(&mut draw, &config.eu_layers);
        let eig_branch = build_branch(&mut draw, &config.eig_layers);

        let d = config.node_dim();
        let k = config.clusters;
        let bound = 1.0 / (d as f64).sqrt();
        let mut fill = |rows: usize, cols: usize, bound: f64| {
            let mut m = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    m[(r, c)] = rng.random::<f64>() * 2.0 * bound - bound;
                }
            }
            m
        };
        let centers = fill(k, d, bound);
        let weights = fill(k, d, bound);
        let biases = {
            let m = fill(k, 1, bound);
            DVector::from_column_slice(m.as_slice())
        };
        let vlad = NetVlad { centers, weights, biases };

        let fc_in = d * k;
        let fc_bound = 1.0 / (fc_in as f64).sqrt();
        let fc_weight = fill(config.descriptor_dim, fc_in, fc_bound);
        let fc_bias = {
            let m = fill(config.descriptor_dim, 1, fc_bound);
            DVector::from_column_slice(m.as_slice())
        };
        let fc = Linear { weight: fc_weight, bias: fc_bias };

        Ok(Self { config, eu_branch, eig_branch, vlad, fc })
    }

    /// All-zero parameters with the same architecture (gradient accumulator).
    pub fn zeros(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let build = |layers: &[Vec<usize>]| {
            let mut mlps = Vec::new();
            let mut node_dim = NetworkConfig::INPUT_DIM;
            for widths in layers {
                let mut linears = Vec::new();
                let mut in_dim = 2 * node_dim;
                for &w in widths {
                    linears.push(Linear::zeros(w, in_dim));
                    in_dim = w;
                }
                mlps.push(Mlp { layers: linears });
                node_dim = *widths.last().unwrap();
            }
            mlps
        };
        let eu_branch = build(&config.eu_layers);
        let eig_branch = build(&config.eig_layers);
        let d = config.node_dim();
        let vlad = NetVlad::zeros(config.clusters, d);
        let fc = Linear::zeros(config.descriptor_dim, d * config.clusters);
        Ok(Self { config, eu_branch, eig_branch, vlad, fc })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("an existing net has a valid config")
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Flattens every parameter in declaration order (weights row-major, bias
    /// after each weight; branches, then NetVLAD centers/weights/biases, then
    /// the FC layer).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let push_linear = |out: &mut Vec<f64>, l: &Linear| {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    out.push(l.weight[(r, c)]);
                }
            }
            out.extend_from_slice(l.bias.as_slice());
        };
        for mlp in self.eu_branch.iter().chain(&self.eig_branch) {
            for l in &mlp.layers {
                push_linear(&mut out, l);
            }
        }
        for m in [&self.vlad.centers, &self.vlad.weights] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        }
        out.extend_from_slice(self.vlad.biases.as_slice());
        push_linear(&mut out, &self.fc);
        out
    }

    pub fn from_vec(config: NetworkConfig, values: &[f64]) -> Result<Self, NetworkError> {
        if values.len() != config.param_count() {
            return Err(NetworkError::ParamCountMismatch {
                got: values.len(),
                expected: config.param_count(),
            });
        }
        let mut net = Self::zeros(config)?;
        net.set_from_slice(values);
        Ok(net)
    }

    /// Overwrites every parameter from a flat slice in [`Self::to_vec`] order.
    pub fn set_from_slice(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count());
        let mut pos = 0;
        let read_linear = |l: &mut Linear, pos: &mut usize| {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    l.weight[(r, c)] = values[*pos];
                    *pos += 1;
                }
            }
            for r in 0..l.bias.len() {
                l.bias[r] = values[*pos];
                *pos += 1;
            }
        };
        for mlp in self.eu_branch.iter_mut().chain(self.eig_branch.iter_mut()) {
            for l in &mut mlp.layers {
                read_linear(l, &mut pos);
            }
        }
        for m in [&mut self.vlad.centers, &mut self.vlad.weights] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    m[(r, c)] = values[pos];
                    pos += 1;
                }
            }
        }
        for r in 0..self.vlad.biases.len() {
            self.vlad.biases[r] = values[pos];
            pos += 1;
        }
        read_linear(&mut self.fc, &mut pos);
        assert_eq!(pos, values.len());
    }
}

/// Per-graph-layer forward state kept for the backward pass.
pub(crate) struct GnnLayerCache {
    pub mlp: MlpCache,
    pub argmax: Vec<u32>,
    pub in_dim: usize,
}

pub(crate) struct BranchCache {
    pub graph: KnnGraph,
    pub layers: Vec<GnnLayerCache>,
}

pub(crate) struct DescribeCache {
    pub eu: BranchCache,
    pub eig: BranchCache,
    pub eu_out_dim: usize,
    pub eig_out_dim: usize,
    pub vlad: NetVladCache,
    pub fc_input: DMatrix<f64>,
    pub pre_norm: DVector<f64>,
    pub norm: f64,
}

impl DescribeCache {
    /// Hash of every discrete routing choice of the forward pass (rectifier
    /// activity, max-pool winners, zero-residual clusters). Two evaluations
    /// with the same signature lie on the same smooth piece of the network,
    /// which is what finite-difference checks need to know.
    pub(crate) fn routing_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for branch in [&self.eu, &self.eig] {
            for layer in &branch.layers {
                // skip activations[0]: the edge features are not a routing choice
                for act in &layer.mlp.activations[1..] {
                    for v in act.iter() {
                        h.bit(*v > 0.0);
                    }
                }
                for &a in &layer.argmax {
                    h.u32(a);
                }
            }
        }
        for n in self.vlad.norms.iter() {
            h.bit(*n > 1e-12);
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn bit(&mut self, b: bool) {
        self.byte(b as u8);
    }

    pub fn u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.byte(b);
        }
    }

    pub fn u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.byte(b);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

fn branch_forward(
    mlps: &[Mlp],
    input: DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, BranchCache), NetworkError> {
    let t = input.nrows();
    let graph = knn(&input, k)?;
    let mut layers = Vec::with_capacity(mlps.len());
    let mut x = input;
    for mlp in mlps {
        let edges = edge_features(&x, &graph)?;
        let in_dim = x.ncols();
        debug_assert_eq!(mlp.in_dim(), 2 * in_dim);
        let (h, mlp_cache) = mlp.forward_cached(edges.data);
        let (pooled, argmax) = max_pool(&h, t, k);
        layers.push(GnnLayerCache { mlp: mlp_cache, argmax, in_dim });
        x = pooled;
    }
    Ok((x, BranchCache { graph, layers }))
}

fn branch_backward(
    mlps: &[Mlp],
    cache: &BranchCache,
    mut grad: DMatrix<f64>,
    acc: &mut [Mlp],
) {
    let t = cache.graph.node_count();
    let k = cache.graph.k();
    for (l, mlp) in mlps.iter().enumerate().rev() {
        let layer = &cache.layers[l];
        let grad_h = max_pool_backward(&grad, &layer.argmax, t, k);
        let grad_edges = mlp.backward(&layer.mlp, grad_h, &mut acc[l]);
        grad = edges_backward(&grad_edges, &cache.graph, layer.in_dim);
    }
}

/// Scatters edge-feature gradients back to node features: the relative half
/// `f_j - f_i` credits j and debits i, the absolute half credits j.
fn edges_backward(grad_edges: &DMatrix<f64>, graph: &KnnGraph, d: usize) -> DMatrix<f64> {
    let t = graph.node_count();
    let k = graph.k();
    let mut gx = DMatrix::zeros(t, d);
    for i in 0..t {
        for (r, &j) in graph.neighbors(i).iter().enumerate() {
            let row = i * k + r;
            for c in 0..d {
                let g_rel = grad_edges[(row, c)];
                let g_abs = grad_edges[(row, d + c)];
                gx[(j, c)] += g_rel + g_abs;
                gx[(i, c)] -= g_rel;
            }
        }
    }
    gx
}

/// Runs the full forward pass on one frame and returns its unit descriptor.
pub fn describe(frame: &FrameFeatures, net: &DescriptorNet) -> Result<Descriptor, NetworkError> {
    describe_cached(frame, net).map(|(d, _)| d)
}

pub(crate) fn describe_cached(
    frame: &FrameFeatures,
    net: &DescriptorNet,
) -> Result<(Descriptor, DescribeCache), NetworkError> {
    let t = frame.len();
    let k = net.config.knn_k;
    if t <= k {
        return Err(NetworkError::InsufficientSegments { segments: t, k });
    }
    let centroids = DMatrix::from_fn(t, 3, |i, c| frame.features()[i].centroid[c]);
    let eigenvalues = DMatrix::from_fn(t, 3, |i, c| frame.features()[i].eigenvalues[c]);

    let (eu_out, eu_cache) = branch_forward(&net.eu_branch, centroids, k)?;
    let (eig_out, eig_cache) = branch_forward(&net.eig_branch, eigenvalues, k)?;

    let (d_eu, d_eig) = (eu_out.ncols(), eig_out.ncols());
    let nodes = DMatrix::from_fn(t, d_eu + d_eig, |i, c| {
        if c < d_eu {
            eu_out[(i, c)]
        } else {
            eig_out[(i, c - d_eu)]
        }
    });

    let (vlad_out, vlad_cache) = net.vlad.forward_cached(nodes);
    let fc_input = DMatrix::from_row_slice(1, vlad_out.len(), vlad_out.as_slice());
    let fc_out = net.fc.forward(&fc_input);
    let pre_norm = DVector::from_row_slice(fc_out.row(0).transpose().as_slice());

    if pre_norm.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::NonFiniteOutput);
    }
    let norm = pre_norm.norm();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(NetworkError::NonFiniteOutput);
    }
    let descriptor = Descriptor { values: &pre_norm / norm };
    let cache = DescribeCache {
        eu: eu_cache,
        eig: eig_cache,
        eu_out_dim: d_eu,
        eig_out_dim: d_eig,
        vlad: vlad_cache,
        fc_input,
        pre_norm,
        norm,
    };
    Ok((descriptor, cache))
}

/// Backward pass of [`describe`]: accumulates dLoss/dParams into `acc` given
/// dLoss/dDescriptor.
pub(crate) fn describe_backward(
    net: &DescriptorNet,
    cache: &DescribeCache,
    grad_descriptor: &DVector<f64>,
    acc: &mut DescriptorNet,
) {
    // L2 normalization: d = y/|y|, dy = (g - d (d.g)) / |y|
    let d = &cache.pre_norm / cache.norm;
    let proj = d.dot(grad_descriptor);
    let grad_y = (grad_descriptor - d * proj) / cache.norm;

    let grad_y_row = DMatrix::from_row_slice(1, grad_y.len(), grad_y.as_slice());
    let grad_fc_in = net.fc.backward(&cache.fc_input, &grad_y_row, &mut acc.fc);

    let grad_vlad_out =
        DVector::from_row_slice(grad_fc_in.row(0).transpose().as_slice());
    let grad_nodes = net.vlad.backward(&cache.vlad, &grad_vlad_out, &mut acc.vlad);

    let grad_eu = grad_nodes.columns(0, cache.eu_out_dim).into_owned();
    let grad_eig = grad_nodes.columns(cache.eu_out_dim, cache.eig_out_dim).into_owned();
    branch_backward(&net.eu_branch, &cache.eu, grad_eu, &mut acc.eu_branch);
    branch_backward(&net.eig_branch, &cache.eig, grad_eig, &mut acc.eig_branch);
}
