//! NetVLAD aggregation: soft-assigns each node feature to K learned cluster
//! centers, sums assignment-weighted residuals per cluster, L2-normalizes
//! each cluster column (intra-normalization) and flattens to a D*K vector.

use nalgebra::{DMatrix, DVector};

const NORM_EPS: f64 = 1e-12;

/// Learned parameters: K cluster centers (rows of `centers`), the soft
/// assignment weights (K x D) and biases (K).
#[derive(Clone, Debug, PartialEq)]
pub struct NetVlad {
    pub centers: DMatrix<f64>,
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct NetVladCache {
    /// t x D node features
    pub input: DMatrix<f64>,
    /// t x K row-wise softmax of the assignment logits
    pub assignments: DMatrix<f64>,
    /// K x D per-cluster residual sums before intra-normalization
    pub residuals: DMatrix<f64>,
    /// per-cluster residual norms
    pub norms: DVector<f64>,
}

impl NetVlad {
    pub fn zeros(clusters: usize, dim: usize) -> Self {
        Self {
            centers: DMatrix::zeros(clusters, dim),
            weights: DMatrix::zeros(clusters, dim),
            biases: DVector::zeros(clusters),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.clusters() * self.dim()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.forward_cached(x.clone()).0
    }

    /// Output layout is cluster-major: entry `c*D + d` is component d of the
    /// normalized residual of cluster c.
    pub fn forward_cached(&self, x: DMatrix<f64>) -> (DVector<f64>, NetVladCache) {
        let (t, dim) = (x.nrows(), x.ncols());
        let clusters = self.clusters();
        assert_eq!(dim, self.dim(), "node feature dim does not match NetVLAD dim");
        assert!(t >= 1);

        // row-wise softmax of w_c . x_i + b_c, stabilized by the row max
        let mut assignments = &x * self.weights.transpose();
        for mut row in assignments.row_iter_mut() {
            row += self.biases.transpose();
            let max = row.max();
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row /= sum;
        }

        // V_c = sum_i a_ic (x_i - C_c)
        let mut residuals = assignments.transpose() * &x;
        let totals = assignments.row_sum();
        for c in 0..clusters {
            for d in 0..dim {
                residuals[(c, d)] -= totals[c] * self.centers[(c, d)];
            }
        }

        let norms = DVector::from_fn(clusters, |c, _| residuals.row(c).norm());
        let mut out = DVector::zeros(clusters * dim);
        for c in 0..clusters {
            if norms[c] > NORM_EPS {
                for d in 0..dim {
                    out[c * dim + d] = residuals[(c, d)] / norms[c];
                }
            }
        }
        (out, NetVladCache { input: x, assignments, residuals, norms })
    }

    /// Accumulates parameter gradients into `acc` and returns the gradient
    /// with respect to the t x D input.
    pub fn backward(
        &self,
        cache: &NetVladCache,
        grad_out: &DVector<f64>,
        acc: &mut NetVlad,
    ) -> DMatrix<f64> {
        let dim = self.dim();
        let clusters = self.clusters();
        let t = cache.input.nrows();

        // through intra-normalization: dV_c = (g_c - U_c (U_c . g_c)) / |V_c|
        let mut grad_residuals = DMatrix::zeros(clusters, dim);
        for c in 0..clusters {
            let n = cache.norms[c];
            if n <= NORM_EPS {
                continue;
            }
            let g = grad_out.rows(c * dim, dim);
            let u = cache.residuals.row(c) / n;
            let proj = u.transpose().dot(&g);
            for d in 0..dim {
                grad_residuals[(c, d)] = (g[d] - u[d] * proj) / n;
            }
        }

        // V_c = sum_i a_ic x_i - (sum_i a_ic) C_c
        let totals = cache.assignments.row_sum();
        for c in 0..clusters {
            for d in 0..dim {
                acc.centers[(c, d)] -= totals[c] * grad_residuals[(c, d)];
            }
        }
        // via the residual term directly
        let mut grad_input = &cache.assignments * &grad_residuals;
        // via the assignments: da_ic = dV_c . (x_i - C_c)
        let mut grad_assign = &cache.input * grad_residuals.transpose();
        let center_dot =
            DVector::from_fn(clusters, |c, _| grad_residuals.row(c).dot(&self.centers.row(c)));
        for i in 0..t {
            for c in 0..clusters {
                grad_assign[(i, c)] -= center_dot[c];
            }
        }
        // softmax backward per row: ds = a .* (da - (a . da))
        let mut grad_logits = grad_assign;
        for i in 0..t {
            let a = cache.assignments.row(i);
            let inner = a.dot(&grad_logits.row(i));
            for c in 0..clusters {
                grad_logits[(i, c)] = a[c] * (grad_logits[(i, c)] - inner);
            }
        }
        acc.weights += grad_logits.transpose() * &cache.input;
        acc.biases += grad_logits.row_sum().transpose();
        grad_input += &grad_logits * &self.weights;
        grad_input
    }

    pub fn zeros_like(&self) -> NetVlad {
        NetVlad::zeros(self.clusters(), self.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::test_support::finite_difference;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vlad(rng: &mut impl Rng, clusters: usize, dim: usize) -> NetVlad {
        NetVlad {
            centers: DMatrix::from_fn(clusters, dim, |_, _| rng.random::<f64>() - 0.5),
            weights: DMatrix::from_fn(clusters, dim, |_, _| rng.random::<f64>() - 0.5),
            biases: DVector::from_fn(clusters, |_, _| rng.random::<f64>() * 0.2),
        }
    }

    #[test]
    fn single_cluster_degenerates_to_normalized_residual_sum() {
        let vlad = NetVlad {
            centers: DMatrix::from_row_slice(1, 2, &[0.5, -0.5]),
            weights: DMatrix::from_row_slice(1, 2, &[3.0, -1.0]),
            biases: DVector::from_column_slice(&[0.7]),
        };
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
        let out = vlad.forward(&x);
        // a_1 == 1 regardless of logits, so V = sum_i (x_i - C_1)
        let expected = DVector::from_column_slice(&[1.5, 4.5]).normalize();
        assert_relative_eq!((out - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_column_is_zero_when_inputs_sit_on_the_center() {
        let vlad = NetVlad {
            centers: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -5.0, 0.0]),
            // strong logits pin every point to cluster 0
            weights: DMatrix::from_row_slice(2, 2, &[50.0, 50.0, -50.0, -50.0]),
            biases: DVector::from_column_slice(&[0.0, 0.0]),
        };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let (out, cache) = vlad.forward_cached(x);
        assert!(cache.norms[0] < 1e-9);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn two_point_two_cluster_hand_computation() {
        let vlad = NetVlad {
            centers: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            weights: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            biases: DVector::from_column_slice(&[0.0, 0.5]),
        };
        let x = DMatrix::from_row_slice(2, 1, &[2.0, -1.0]);
        let out = vlad.forward(&x);

        // hand evaluation of the soft-assignment formula
        let softmax = |l0: f64, l1: f64| {
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            (e0 / (e0 + e1), e1 / (e0 + e1))
        };
        let (a00, a01) = softmax(2.0, -2.0 + 0.5);
        let (a10, a11) = softmax(-1.0, 1.0 + 0.5);
        let v0 = a00 * (2.0 - 0.0) + a10 * (-1.0 - 0.0);
        let v1 = a01 * (2.0 - 1.0) + a11 * (-1.0 - 1.0);
        assert_relative_eq!(out[0], v0 / v0.abs(), epsilon = 1e-12);
        assert_relative_eq!(out[1], v1 / v1.abs(), epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vlad = random_vlad(&mut rng, 3, 4);
        let x = DMatrix::from_fn(5, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let probe = DVector::from_fn(12, |_, _| rng.random::<f64>() - 0.5);

        let (_, cache) = vlad.forward_cached(x.clone());
        let mut acc = vlad.zeros_like();
        let grad_in = vlad.backward(&cache, &probe, &mut acc);

        let fd_in = finite_difference(&x, 1e-6, |m| vlad.forward(m).dot(&probe));
        assert!((&grad_in - &fd_in).amax() < 1e-6, "input grad off by {}", (&grad_in - &fd_in).amax());

        let fd_centers = finite_difference(&vlad.centers, 1e-6, |m| {
            let mut v = vlad.clone();
            v.centers = m.clone();
            v.forward(&x).dot(&probe)
        });
        assert!((&acc.centers - &fd_centers).amax() < 1e-6);

        let fd_weights = finite_difference(&vlad.weights, 1e-6, |m| {
            let mut v = vlad.clone();
            v.weights = m.clone();
            v.forward(&x).dot(&probe)
        });
        assert!((&acc.weights - &fd_weights).amax() < 1e-6);

        let bias_matrix = DMatrix::from_column_slice(3, 1, vlad.biases.as_slice());
        let fd_biases = finite_difference(&bias_matrix, 1e-6, |m| {
            let mut v = vlad.clone();
            v.biases = DVector::from_column_slice(m.as_slice());
            v.forward(&x).dot(&probe)
        });
        for c in 0..3 {
            assert!((acc.biases[c] - fd_biases[(c, 0)]).abs() < 1e-6);
        }
    }
}
