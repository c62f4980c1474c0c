//! Dense layers of the descriptor network, with hand-derived backward passes.
//!
//! Activations are stored row-wise: each row is one sample (an edge or a
//! node). Every layer's backward takes the gradient of the loss with respect
//! to its output, accumulates parameter gradients into a mirror structure of
//! the same shape, and returns the gradient with respect to its input.

use nalgebra::{DMatrix, DVector};

/// Affine map y = W x + b with `weight` of shape out x in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: DMatrix::zeros(out_dim, in_dim), bias: DVector::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Applies the layer to every row of `x` (n x in) giving n x out.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        y
    }

    /// Backward of [`Self::forward`]: accumulates dW, db into `acc` and
    /// returns the input gradient.
    pub fn backward(
        &self,
        input: &DMatrix<f64>,
        grad_out: &DMatrix<f64>,
        acc: &mut Linear,
    ) -> DMatrix<f64> {
        acc.weight += grad_out.transpose() * input;
        acc.bias += grad_out.row_sum().transpose();
        grad_out * &self.weight
    }
}

/// A shared multilayer perceptron: affine layers with a rectifier after each.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs seen by each affine layer during the forward pass, plus the final
/// post-rectifier output. `activations[l]` is the input of layer l;
/// `activations.last()` is the MLP output.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub activations: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for layer in &self.layers {
            let mut y = layer.forward(activations.last().unwrap());
            y.apply(|v| *v = v.max(0.0));
            activations.push(y);
        }
        let out = activations.last().unwrap().clone();
        (out, MlpCache { activations })
    }

    /// Backward through every layer. The rectifier uses subgradient 0 at the
    /// kink (gradient passes only where the stored output is > 0).
    pub fn backward(
        &self,
        cache: &MlpCache,
        mut grad_out: DMatrix<f64>,
        acc: &mut Mlp,
    ) -> DMatrix<f64> {
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let post = &cache.activations[l + 1];
            grad_out.zip_apply(post, |g, p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            grad_out = layer.backward(&cache.activations[l], &grad_out, &mut acc.layers[l]);
        }
        grad_out
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp { layers: self.layers.iter().map(|l| Linear::zeros(l.out_dim(), l.in_dim())).collect() }
    }
}

/// Elementwise max over each node's k contiguous edge rows. Returns the
/// pooled t x w matrix and the chosen edge offset per (node, channel),
/// row-major; ties pick the lowest offset.
pub fn max_pool(edges: &DMatrix<f64>, nodes: usize, k: usize) -> (DMatrix<f64>, Vec<u32>) {
    let w = edges.ncols();
    assert_eq!(edges.nrows(), nodes * k);
    let mut out = DMatrix::zeros(nodes, w);
    let mut argmax = vec![0u32; nodes * w];
    for i in 0..nodes {
        for c in 0..w {
            let mut best = edges[(i * k, c)];
            let mut best_r = 0u32;
            for r in 1..k {
                let v = edges[(i * k + r, c)];
                if v > best {
                    best = v;
                    best_r = r as u32;
                }
            }
            out[(i, c)] = best;
            argmax[i * w + c] = best_r;
        }
    }
    (out, argmax)
}

/// Routes each output gradient back to the edge row that won the max.
pub fn max_pool_backward(
    grad_out: &DMatrix<f64>,
    argmax: &[u32],
    nodes: usize,
    k: usize,
) -> DMatrix<f64> {
    let w = grad_out.ncols();
    let mut grad_edges = DMatrix::zeros(nodes * k, w);
    for i in 0..nodes {
        for c in 0..w {
            let r = argmax[i * w + c] as usize;
            grad_edges[(i * k + r, c)] = grad_out[(i, c)];
        }
    }
    grad_edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::test_support::finite_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_mlp(rng: &mut impl Rng, dims: &[usize]) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: random_matrix(rng, w[1], w[0]),
                bias: DVector::from_fn(w[1], |_, _| rng.random::<f64>() * 0.5 - 0.25),
            })
            .collect();
        Mlp { layers }
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let layer = Linear {
            weight: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 2.0, 1.0, 0.5]),
            bias: DVector::from_column_slice(&[0.5, -1.0]),
        };
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let y = layer.forward(&x);
        assert_eq!(y[(0, 0)], 1.0 - 3.0 + 0.5);
        assert_eq!(y[(0, 1)], 2.0 + 2.0 + 1.5 - 1.0);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = random_mlp(&mut rng, &[4, 6, 3]);
        let x = random_matrix(&mut rng, 5, 4);
        // scalar objective: weighted sum of MLP outputs
        let probe = random_matrix(&mut rng, 5, 3);

        let (out, cache) = mlp.forward_cached(x.clone());
        let mut acc = mlp.zeros_like();
        let grad_in = mlp.backward(&cache, probe.clone(), &mut acc);
        let _ = out;

        // check input gradient
        let fd_in = finite_difference(&x, 1e-6, |m| mlp.forward(m.clone()).dot(&probe));
        assert!(
            (&grad_in - &fd_in).amax() < 1e-6,
            "input gradient off by {}",
            (&grad_in - &fd_in).amax()
        );

        // check each parameter gradient
        for l in 0..mlp.layers.len() {
            let fd_w = finite_difference(&mlp.layers[l].weight, 1e-6, |wm| {
                let mut probe_mlp = mlp.clone();
                probe_mlp.layers[l].weight = wm.clone();
                probe_mlp.forward(x.clone()).dot(&probe)
            });
            assert!(
                (&acc.layers[l].weight - &fd_w).amax() < 1e-6,
                "layer {l} weight gradient off"
            );
        }
    }

    #[test]
    fn maxpool_forward_and_routing() {
        // 2 nodes, k = 2, 2 channels
        let edges = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 3.0, 2.0, -1.0, -2.0, -1.5, 0.0]);
        let (out, argmax) = max_pool(&edges, 2, 2);
        assert_eq!(out, DMatrix::from_row_slice(2, 2, &[3.0, 5.0, -1.0, 0.0]));
        assert_eq!(argmax, vec![1, 0, 0, 1]);

        let grad_out = DMatrix::from_row_slice(2, 2, &[10.0, 20.0, 30.0, 40.0]);
        let back = max_pool_backward(&grad_out, &argmax, 2, 2);
        assert_eq!(
            back,
            DMatrix::from_row_slice(4, 2, &[0.0, 20.0, 10.0, 0.0, 30.0, 0.0, 0.0, 40.0])
        );
    }

    #[test]
    fn maxpool_tie_picks_lowest_offset() {
        let edges = DMatrix::from_row_slice(2, 1, &[7.0, 7.0]);
        let (_, argmax) = max_pool(&edges, 1, 2);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn single_neighbor_pool_is_identity() {
        let edges = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, _) = max_pool(&edges, 3, 1);
        assert_eq!(out, edges);
    }
}
