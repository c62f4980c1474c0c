//! KNN graphs over node feature vectors and the edge features fed to the
//! descriptor network's graph layers.
//!
//! The same construction serves both branches: nodes are segments, and the
//! metric is plain squared Euclidean distance in whatever space the node
//! features live in (centroid coordinates or eigenvalue triples). Graphs are
//! built once per branch per frame from the input features.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("knn needs more than k nodes: t = {nodes}, k = {k}")]
    InsufficientNodes { nodes: usize, k: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("feature matrix has {rows} rows but the graph has {nodes} nodes")]
    NodeCountMismatch { rows: usize, nodes: usize },
}

/// Exact K-nearest-neighbor graph. Neighbor lists are ordered by ascending
/// squared distance with ties broken by smaller node id; a node is never its
/// own neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }
}

/// Builds the exact KNN graph over the rows of `features` by brute-force
/// distance sort (t is at most a few hundred segments).
pub fn knn(features: &DMatrix<f64>, k: usize) -> Result<KnnGraph, GraphError> {
    if k < 1 {
        return Err(GraphError::InvalidK);
    }
    let t = features.nrows();
    if t <= k {
        return Err(GraphError::InsufficientNodes { nodes: t, k });
    }
    let mut neighbors = Vec::with_capacity(t);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(t - 1);
    for i in 0..t {
        scratch.clear();
        for j in 0..t {
            if j == i {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..features.ncols() {
                let d = features[(j, c)] - features[(i, c)];
                d2 += d * d;
            }
            scratch.push((d2, j));
        }
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        neighbors.push(scratch[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(KnnGraph { k, neighbors })
}

/// Edge features of a graph: for node i and its r-th neighbor j, row
/// `i*k + r` holds the concatenation `(f_j - f_i, f_j)` of relative and
/// absolute neighbor features.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub nodes: usize,
    pub k: usize,
    pub node_dim: usize,
    /// (nodes * k) x (2 * node_dim)
    pub data: DMatrix<f64>,
}

pub fn edge_features(features: &DMatrix<f64>, graph: &KnnGraph) -> Result<EdgeFeatures, GraphError> {
    let t = features.nrows();
    if t != graph.node_count() {
        return Err(GraphError::NodeCountMismatch { rows: t, nodes: graph.node_count() });
    }
    let d = features.ncols();
    let k = graph.k();
    let mut data = DMatrix::zeros(t * k, 2 * d);
    for i in 0..t {
        for (r, &j) in graph.neighbors(i).iter().enumerate() {
            let row = i * k + r;
            for c in 0..d {
                data[(row, c)] = features[(j, c)] - features[(i, c)];
                data[(row, d + c)] = features[(j, c)];
            }
        }
    }
    Ok(EdgeFeatures { nodes: t, k, node_dim: d, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn one_dimensional_example() {
        let m = matrix_from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![7.0]]);
        let g = knn(&m, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1, 0]);
        assert_eq!(g.neighbors(3), &[2, 1]);
    }

    #[test]
    fn k_equals_t_minus_one_takes_everyone() {
        let m = matrix_from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 5.0]]);
        let g = knn(&m, 3).unwrap();
        for i in 0..4 {
            let mut nbrs: Vec<usize> = g.neighbors(i).to_vec();
            nbrs.sort_unstable();
            let expected: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(nbrs, expected);
        }
    }

    #[test]
    fn duplicates_break_ties_by_id() {
        let m = matrix_from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![9.0]]);
        let g = knn(&m, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[0, 1]);
        assert_eq!(g.neighbors(3), &[0, 1]);
    }

    #[test]
    fn too_few_nodes_is_an_error() {
        let m = matrix_from_rows(&[vec![0.0], vec![1.0]]);
        assert!(matches!(knn(&m, 2), Err(GraphError::InsufficientNodes { nodes: 2, k: 2 })));
        assert!(matches!(knn(&m, 0), Err(GraphError::InvalidK)));
    }

    #[test]
    fn edge_feature_concatenation() {
        let m = matrix_from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![9.0, 9.0, 9.0], vec![10.0, 9.0, 9.0]]);
        let g = knn(&m, 1).unwrap();
        let e = edge_features(&m, &g).unwrap();
        // node 0's nearest neighbor is node 1
        assert_eq!(g.neighbors(0), &[1]);
        let row: Vec<f64> = e.data.row(0).iter().copied().collect();
        assert_eq!(row, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn identical_nodes_zero_relative_part() {
        let m = matrix_from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![8.0, 8.0]]);
        let g = knn(&m, 1).unwrap();
        let e = edge_features(&m, &g).unwrap();
        let row: Vec<f64> = e.data.row(0).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.0, 2.0, -1.0]);
    }

    fn brute_force_neighbors(m: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
        let t = m.nrows();
        (0..t)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..t)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d2 = (m.row(j) - m.row(i)).iter().map(|v| v * v).sum::<f64>();
                        (d2, j)
                    })
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all[..k].iter().map(|&(_, j)| j).collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(5..60);
            let d = rng.random_range(1..6);
            let k = rng.random_range(1..t.min(12));
            let m = DMatrix::from_fn(t, d, |_, _| rng.random::<f64>() * 10.0);
            let g = knn(&m, k).unwrap();
            let expected = brute_force_neighbors(&m, k);
            for i in 0..t {
                prop_assert_eq!(g.neighbors(i), &expected[i][..]);
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(6..30);
            let k = 3usize;
            let m = DMatrix::from_fn(t, 3, |_, _| rng.random::<f64>());
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut rng);
            // permuted[p[i]] = original[i]
            let mut inv = vec![0usize; t];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let pm = DMatrix::from_fn(t, 3, |i, j| m[(inv[i], j)]);
            let g = knn(&m, k).unwrap();
            let pg = knn(&pm, k).unwrap();
            for i in 0..t {
                let mapped: std::collections::BTreeSet<usize> =
                    g.neighbors(i).iter().map(|&j| perm[j]).collect();
                let direct: std::collections::BTreeSet<usize> =
                    pg.neighbors(perm[i]).iter().copied().collect();
                prop_assert_eq!(mapped, direct);
            }
        }

        #[test]
        fn relative_half_is_translation_invariant(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = 8;
            let d = 3;
            let m = DMatrix::from_fn(t, d, |_, _| rng.random::<f64>() * 5.0);
            let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 100.0).collect();
            let shifted = DMatrix::from_fn(t, d, |i, j| m[(i, j)] + shift[j]);
            let g = knn(&m, 3).unwrap();
            let e0 = edge_features(&m, &g).unwrap();
            let e1 = edge_features(&shifted, &g).unwrap();
            let mut absolute_half_moved = false;
            for r in 0..e0.data.nrows() {
                for c in 0..d {
                    prop_assert!((e0.data[(r, c)] - e1.data[(r, c)]).abs() < 1e-9);
                    if (e0.data[(r, d + c)] - e1.data[(r, d + c)]).abs() > 1e-9 {
                        absolute_half_moved = true;
                    }
                }
            }
            prop_assert!(absolute_half_moved);
        }
    }
}
