//! Exact Bayesian linear regression on a finite feature map.
//!
//! Model: `y = Phi^T w + eps`, `w ~ N(0, lambda^2 I)`, `eps ~ N(0, sigma^2 I)`
//! with `Phi` of shape `D x n` (one feature column per data point). All
//! inference happens in the `D x D` primal space through the precision
//! `A = sigma^-2 Phi Phi^T + lambda^-2 I`, factored once per fit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FedError, Result};
use crate::linalg::{self, CholeskyFactor, DenseMatrix};

#[derive(Clone, Debug)]
pub struct BlrPosterior {
    pub a: DenseMatrix,
    pub a_chol: CholeskyFactor,
    pub w_bar: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    /// Includes the observation noise `sigma^2`.
    pub variance: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// Maps predictions on a standardised target scale back to raw units.
    pub fn rescale(&self, mean: f64, scale: f64) -> Self {
        Self {
            mean: self.mean.iter().map(|m| m * scale + mean).collect(),
            variance: self.variance.iter().map(|v| v * scale * scale).collect(),
        }
    }
}

fn check_hypers(sigma: f64, lambda: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite() && lambda > 0.0 && lambda.is_finite()) {
        return Err(FedError::InvalidConfig(format!(
            "sigma and lambda must be positive and finite (got {sigma}, {lambda})"
        )));
    }
    Ok(())
}

fn check_data(phi: &DenseMatrix, y: &[f64]) -> Result<()> {
    if phi.cols() != y.len() {
        return Err(FedError::DimensionMismatch(format!(
            "feature matrix has {} columns but there are {} targets",
            phi.cols(),
            y.len()
        )));
    }
    Ok(())
}

/// Precision `sigma^-2 S + lambda^-2 I` from a scatter matrix `S`.
pub fn precision_from_scatter(scatter: &DenseMatrix, sigma: f64, lambda: f64) -> Result<DenseMatrix> {
    check_hypers(sigma, lambda)?;
    if !scatter.is_square() {
        return Err(FedError::DimensionMismatch("scatter matrix must be square".into()));
    }
    let mut a = scatter.scale(sigma.powi(-2));
    a.add_to_diagonal(lambda.powi(-2));
    Ok(a)
}

impl BlrPosterior {
    /// Posterior from sufficient statistics `S = Phi Phi^T` and `b = Phi y`.
    pub fn from_statistics(scatter: &DenseMatrix, phi_y: &[f64], sigma: f64, lambda: f64) -> Result<Self> {
        let a = precision_from_scatter(scatter, sigma, lambda)?;
        if phi_y.len() != a.rows() {
            return Err(FedError::DimensionMismatch(format!(
                "projected targets have length {}, precision is {}x{}",
                phi_y.len(),
                a.rows(),
                a.rows()
            )));
        }
        let a_chol = linalg::cholesky(&a)?;
        let w = linalg::solve_psd(&a_chol, &DenseMatrix::column(phi_y))?;
        let w_bar = w.into_vec().into_iter().map(|v| v / (sigma * sigma)).collect();
        Ok(Self { a, a_chol, w_bar, sigma, lambda })
    }

    /// Assembles a posterior whose mean was computed elsewhere.
    pub fn from_parts(
        a: DenseMatrix,
        a_chol: CholeskyFactor,
        w_bar: Vec<f64>,
        sigma: f64,
        lambda: f64,
    ) -> Result<Self> {
        if a.rows() != a_chol.dim() || w_bar.len() != a.rows() {
            return Err(FedError::DimensionMismatch("posterior parts disagree in dimension".into()));
        }
        Ok(Self { a, a_chol, w_bar, sigma, lambda })
    }

    pub fn dim(&self) -> usize {
        self.w_bar.len()
    }
}

pub fn blr_fit(phi: &DenseMatrix, y: &[f64], sigma: f64, lambda: f64) -> Result<BlrPosterior> {
    check_data(phi, y)?;
    let b = phi.matmul(&DenseMatrix::column(y))?;
    BlrPosterior::from_statistics(&phi.gram_rows(), b.as_slice(), sigma, lambda)
}

/// Predictive mean `w_bar^T phi*` and variance `sigma^2 + phi*^T A^-1 phi*`
/// for every column of `phi_star`.
pub fn blr_predict(post: &BlrPosterior, phi_star: &DenseMatrix) -> Result<PredictiveDistribution> {
    if phi_star.rows() != post.dim() {
        return Err(FedError::DimensionMismatch(format!(
            "query features have {} rows, posterior has dimension {}",
            phi_star.rows(),
            post.dim()
        )));
    }
    let mean = phi_star.transpose_matmul(&DenseMatrix::column(&post.w_bar))?.into_vec();
    let half = post.a_chol.forward_substitute(phi_star)?;
    let s2 = post.sigma * post.sigma;
    let variance =
        (0..phi_star.cols()).map(|j| s2 + (0..half.rows()).map(|i| half[(i, j)] * half[(i, j)]).sum::<f64>()).collect();
    Ok(PredictiveDistribution { mean, variance })
}

/// Exact log evidence `log N(y; 0, lambda^2 Phi^T Phi + sigma^2 I)`,
/// evaluated in the primal space.
pub fn blr_log_marginal(phi: &DenseMatrix, y: &[f64], sigma: f64, lambda: f64) -> Result<f64> {
    check_data(phi, y)?;
    check_hypers(sigma, lambda)?;
    let n = y.len() as f64;
    let d = phi.rows() as f64;
    let a = precision_from_scatter(&phi.gram_rows(), sigma, lambda)?;
    let l = linalg::cholesky(&a)?;
    let b = phi.matmul(&DenseMatrix::column(y))?;
    let half = l.forward_substitute(&b)?;
    let quad: f64 = half.as_slice().iter().map(|v| v * v).sum();
    let yty = linalg::dot(y, y);
    let s2 = sigma * sigma;
    Ok(-0.5 * n * (2.0 * PI).ln() - n * sigma.ln() - d * lambda.ln() - 0.5 * linalg::logdet(&l) - 0.5 * yty / s2
        + 0.5 * quad / (s2 * s2))
}

/// The same log evidence recorded on a tape, differentiable in `phi`,
/// `log_sigma` and `log_lambda` (each `1 x 1`).
pub fn log_marginal_on_tape(tape: &mut Tape, phi: Var, y: &[f64], log_sigma: Var, log_lambda: Var) -> Result<Var> {
    let (d, n) = tape.value(phi).shape();
    if n != y.len() {
        return Err(FedError::DimensionMismatch(format!(
            "feature matrix has {n} columns but there are {} targets",
            y.len()
        )));
    }
    let yv = tape.leaf(DenseMatrix::column(y));
    let m2s = tape.scale(-2.0, log_sigma);
    let s2inv = tape.exp(m2s);
    let m2l = tape.scale(-2.0, log_lambda);
    let l2inv = tape.exp(m2l);

    let phit = tape.transpose(phi);
    let gram = tape.matmul(phi, phit)?;
    let data_term = tape.scale_by(s2inv, gram)?;
    let eye = tape.leaf(DenseMatrix::identity(d));
    let prior_term = tape.scale_by(l2inv, eye)?;
    let a = tape.add(data_term, prior_term)?;
    let l = tape.cholesky(a)?;
    let logdet = tape.logdet(l)?;

    let b = tape.matmul(phi, yv)?;
    let x = tape.solve_psd(l, b)?;
    let bx = tape.mul(b, x)?;
    let quad = tape.sum(bx);
    let s4inv = tape.mul(s2inv, s2inv)?;
    let fit = tape.scale_by(s4inv, quad)?;

    let yty = linalg::dot(y, y);
    let nf = n as f64;
    let terms = [
        tape.scale(-nf, log_sigma),
        tape.scale(-(d as f64), log_lambda),
        tape.scale(-0.5, logdet),
        tape.scale(-0.5 * yty, s2inv),
        tape.scale(0.5, fit),
        tape.constant_scalar(-0.5 * nf * (2.0 * PI).ln()),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// GP prediction from kernel matrices: `k_train` (`n x n`), `k_cross`
/// (`n x n*`, train against query) and the query self-covariances
/// `k_star_diag` (`n*`). Variances include `sigma^2`.
pub fn gp_predict_dual(
    k_train: &DenseMatrix,
    k_cross: &DenseMatrix,
    k_star_diag: &[f64],
    y: &[f64],
    sigma: f64,
) -> Result<PredictiveDistribution> {
    let n = y.len();
    if k_train.shape() != (n, n) || k_cross.rows() != n || k_cross.cols() != k_star_diag.len() {
        return Err(FedError::DimensionMismatch(format!(
            "dual prediction shapes: K {:?}, K_cross {:?}, k_star {}, y {n}",
            k_train.shape(),
            k_cross.shape(),
            k_star_diag.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(FedError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let mut c = k_train.clone();
    c.add_to_diagonal(s2);
    let l = linalg::cholesky(&c)?;
    let alpha = linalg::solve_psd(&l, &DenseMatrix::column(y))?;
    let mean = k_cross.transpose_matmul(&alpha)?.into_vec();
    let half = l.forward_substitute(k_cross)?;
    let variance = k_star_diag
        .iter()
        .enumerate()
        .map(|(j, &kss)| kss - (0..n).map(|i| half[(i, j)] * half[(i, j)]).sum::<f64>() + s2)
        .collect();
    Ok(PredictiveDistribution { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate_with_gradient, finite_difference_gradient};
    use crate::params::{ParamLayout, ParamVector, LOG_LAMBDA, LOG_SIGMA};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Gauss-Jordan inverse, deliberately unrelated to the Cholesky path.
    fn naive_inverse(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut m = DenseMatrix::hstack(&[a, &DenseMatrix::identity(n)]).unwrap();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs())).unwrap();
            for k in 0..2 * n {
                let t = m[(col, k)];
                m[(col, k)] = m[(piv, k)];
                m[(piv, k)] = t;
            }
            let p = m[(col, col)];
            for k in 0..2 * n {
                m[(col, k)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for k in 0..2 * n {
                        m[(r, k)] -= f * m[(col, k)];
                    }
                }
            }
        }
        DenseMatrix::from_fn(n, n, |r, c| m[(r, n + c)])
    }

    /// Multivariate normal log density from the naive inverse and eigenvalues.
    fn dense_log_density(cov: &DenseMatrix, y: &[f64]) -> f64 {
        let n = y.len();
        let inv = naive_inverse(cov);
        let quad: f64 = (0..n).map(|i| (0..n).map(|j| y[i] * inv[(i, j)] * y[j]).sum::<f64>()).sum();
        let logdet: f64 = linalg::symmetric_eigenvalues(cov).unwrap().iter().map(|v| v.ln()).sum();
        -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + quad)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_point_by_hand() {
        let post = blr_fit(&DenseMatrix::scalar(1.0), &[1.0], 1.0, 1.0).unwrap();
        assert!((post.a[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((post.w_bar[0] - 0.5).abs() < 1e-15);
        let pred = blr_predict(&post, &DenseMatrix::scalar(1.0)).unwrap();
        assert!((pred.mean[0] - 0.5).abs() < 1e-15);
        assert!((pred.variance[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_data_recovers_prior() {
        let post = blr_fit(&DenseMatrix::zeros(3, 0), &[], 0.7, 2.0).unwrap();
        assert_eq!(post.w_bar, vec![0.0; 3]);
        assert!(post.a.max_abs_diff(&DenseMatrix::from_diag(&[0.25; 3])) < 1e-15);
        let q = DenseMatrix::column(&[1.0, -2.0, 0.5]);
        let pred = blr_predict(&post, &q).unwrap();
        assert_eq!(pred.mean[0], 0.0);
        assert!((pred.variance[0] - (0.49 + 4.0 * 5.25)).abs() < 1e-12);
        let zero = blr_predict(&post, &DenseMatrix::zeros(3, 1)).unwrap();
        assert!((zero.variance[0] - 0.49).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(blr_fit(&DenseMatrix::zeros(2, 3), &[1.0], 1.0, 1.0), Err(FedError::DimensionMismatch(_))));
        let post = blr_fit(&DenseMatrix::zeros(2, 1), &[1.0], 1.0, 1.0).unwrap();
        assert!(matches!(blr_predict(&post, &DenseMatrix::zeros(3, 1)), Err(FedError::DimensionMismatch(_))));
    }

    #[test]
    fn fit_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = random(6, 20, &mut rng);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (s, l) = (0.4, 1.7);
        let post = blr_fit(&phi, &y, s, l).unwrap();
        let mut a = phi.matmul(&phi.transpose()).unwrap().scale(1.0 / (s * s));
        a.add_to_diagonal(1.0 / (l * l));
        let inv = naive_inverse(&a);
        let w = inv.matmul(&phi).unwrap().matmul(&DenseMatrix::column(&y)).unwrap().scale(1.0 / (s * s));
        let diff: f64 = w.as_slice().iter().zip(&post.w_bar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10 * w.max_abs().max(1.0));
    }

    #[test]
    fn log_marginal_small_cases() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let v = blr_log_marginal(&DenseMatrix::scalar(0.0), &[0.0], 1.0, 1.0).unwrap();
        assert!((v + half_log_2pi).abs() < 1e-14);
        let v = blr_log_marginal(&DenseMatrix::scalar(1.0), &[0.0], 1.0, 1.0).unwrap();
        assert!((v + 0.5 * (4.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn dual_one_point_by_hand() {
        let p = gp_predict_dual(&DenseMatrix::scalar(1.0), &DenseMatrix::scalar(1.0), &[1.0], &[2.0], 1.0).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.variance[0] - 1.5).abs() < 1e-15);
        let empty =
            gp_predict_dual(&DenseMatrix::zeros(0, 0), &DenseMatrix::zeros(0, 2), &[0.3, 2.0], &[], 0.5).unwrap();
        assert_eq!(empty.mean, vec![0.0, 0.0]);
        assert_eq!(empty.variance, vec![0.55, 2.25]);
    }

    #[test]
    fn tape_log_marginal_matches_direct_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = ParamLayout::new();
        layout.push("phi", 4, 7).unwrap();
        layout.push(LOG_SIGMA, 1, 1).unwrap();
        layout.push(LOG_LAMBDA, 1, 1).unwrap();
        let mut vals: Vec<f64> = (0..28).map(|_| rng.random_range(-1.0..1.0)).collect();
        vals.extend([-0.3, 0.2]);
        let params = ParamVector::from_values(layout, vals).unwrap();
        let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |t: &mut Tape, b: &crate::autodiff::BoundParams| {
            log_marginal_on_tape(t, b.get("phi")?, &y, b.get(LOG_SIGMA)?, b.get(LOG_LAMBDA)?)
        };
        let (v, g) = evaluate_with_gradient(&params, loss).unwrap();
        let direct = blr_log_marginal(
            &params.block_matrix("phi").unwrap(),
            &y,
            params.sigma().unwrap(),
            params.lambda().unwrap(),
        )
        .unwrap();
        assert!((v - direct).abs() < 1e-10);
        let fd = finite_difference_gradient(&params, 1e-6, loss).unwrap();
        assert!(crate::autodiff::relative_error(&g, &fd) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn log_marginal_equals_dual_density(seed in 0u64..10_000, d in 1usize..8, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(d, n, &mut rng);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = rng.random_range(0.2..2.0);
            let l = rng.random_range(0.2..2.0);
            let mut cov = phi.transpose_matmul(&phi).unwrap().scale(l * l);
            cov.add_to_diagonal(s * s);
            let primal = blr_log_marginal(&phi, &y, s, l).unwrap();
            prop_assert!((primal - dense_log_density(&cov, &y)).abs() < 1e-8);
        }

        #[test]
        fn primal_dual_predictions_agree(seed in 0u64..10_000, d in 1usize..10, n in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(d, n, &mut rng);
            let star = random(d, 4, &mut rng);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = rng.random_range(0.2..2.0);
            let l = rng.random_range(0.2..2.0);
            let primal = blr_predict(&blr_fit(&phi, &y, s, l).unwrap(), &star).unwrap();
            let l2 = l * l;
            let k = phi.transpose_matmul(&phi).unwrap().scale(l2);
            let kx = phi.transpose_matmul(&star).unwrap().scale(l2);
            let kss: Vec<f64> = (0..4).map(|j| l2 * linalg::dot(&star.col(j), &star.col(j))).collect();
            let dual = gp_predict_dual(&k, &kx, &kss, &y, s).unwrap();
            for j in 0..4 {
                prop_assert!((primal.mean[j] - dual.mean[j]).abs() < 1e-8);
                prop_assert!((primal.variance[j] - dual.variance[j]).abs() < 1e-8);
            }
        }

        #[test]
        fn zero_feature_point_changes_nothing(seed in 0u64..10_000, y0 in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(3, 10, &mut rng);
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = blr_fit(&phi, &y, 0.5, 1.0).unwrap();
            let phi2 = DenseMatrix::hstack(&[&phi, &DenseMatrix::zeros(3, 1)]).unwrap();
            let mut y2 = y.clone();
            y2.push(y0);
            let more = blr_fit(&phi2, &y2, 0.5, 1.0).unwrap();
            for (a, b) in base.w_bar.iter().zip(&more.w_bar) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn predictive_variance_shrinks_with_data(seed in 0u64..10_000, extra in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random(4, 8 + extra, &mut rng);
            let y: Vec<f64> = (0..8 + extra).map(|_| rng.random_range(-1.0..1.0)).collect();
            let star = random(4, 3, &mut rng);
            let idx: Vec<usize> = (0..8).collect();
            let small = blr_fit(&phi.select_cols(&idx), &y[..8], 0.3, 1.2).unwrap();
            let big = blr_fit(&phi, &y, 0.3, 1.2).unwrap();
            let vs = blr_predict(&small, &star).unwrap().variance;
            let vb = blr_predict(&big, &star).unwrap().variance;
            for (s, b) in vs.iter().zip(&vb) {
                prop_assert!(*b <= *s + 1e-12);
                prop_assert!(*b >= 0.09 - 1e-12);
            }
        }
    }
}
