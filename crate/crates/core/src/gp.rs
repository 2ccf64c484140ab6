//! Gaussian process regression with a Matérn ν=5/2 ARD kernel.
//!
//! Targets are standardized inside [`fit`]; the kernel hyperparameters are
//! fixed constants (no marginal-likelihood optimization). Inputs stay in
//! their raw units so length scales are expressed in the same units as the
//! search variables.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

/// First jitter tried when the Gram matrix is not numerically positive definite.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter before `fit` gives up.
pub const JITTER_MAX: f64 = 1e-2;

/// Std below this value (standardized units) makes the std gradient undefined.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// One positive length scale per input dimension.
    pub length_scales: Vec<f64>,
    /// Signal variance on standardized targets.
    pub signal_variance: f64,
    /// Observation noise variance on standardized targets.
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(length_scales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let params = Self {
            length_scales,
            signal_variance,
            noise_variance,
        };
        params.validate()?;
        Ok(params)
    }

    /// Length scales `[19.9, 26.5, 21.15]`, unit signal variance, noise 0.01.
    pub fn paper() -> Self {
        Self {
            length_scales: vec![19.9, 26.5, 21.15],
            signal_variance: 1.0,
            noise_variance: 0.01,
        }
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty() {
            return Err(invalid_arg("kernel needs at least one length scale"));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(invalid_arg(format!("length scale must be positive, got {l}")));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(invalid_arg(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid_arg(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((ai, bi), l)| {
                let d = (ai - bi) / l;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.scaled_distance(a, b);
        let sr = SQRT5 * r;
        self.signal_variance * (1.0 + sr + 5.0 * r * r / 3.0) * (-sr).exp()
    }

    /// Gradient of `k(x, b)` with respect to `x`, written into `out`.
    fn grad_wrt_first(&self, x: &[f64], b: &[f64], out: &mut [f64]) {
        let r = self.scaled_distance(x, b);
        // dk/dr / r, which stays finite at r = 0
        let factor = -self.signal_variance * 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp();
        for (d, o) in out.iter_mut().enumerate() {
            let l = self.length_scales[d];
            *o = factor * (x[d] - b[d]) / (l * l);
        }
    }
}

fn check_dim(params: &KernelParams, x: &[f64], what: &str) -> Result<()> {
    if x.len() != params.dim() {
        return Err(invalid_arg(format!(
            "{what} has dimension {} but kernel expects {}",
            x.len(),
            params.dim()
        )));
    }
    Ok(())
}

/// Matérn ν=5/2 covariance between `a` and `b`.
pub fn matern52(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params, a, "first argument")?;
    check_dim(params, b, "second argument")?;
    Ok(params.eval(a, b))
}

/// Gram matrix `K(X, X)` without noise.
pub fn gram_matrix(xs: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = params.eval(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// A fitted Gaussian process posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    xs: Vec<Vec<f64>>,
    y_raw: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    kernel: KernelParams,
    prior_mean: f64,
    jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGradient {
    pub mean: f64,
    pub std: f64,
    pub dmean: Vec<f64>,
    pub dstd: Vec<f64>,
    /// Set when the std is too small to differentiate; `dstd` is zero then.
    pub degenerate: bool,
}

/// Fits a GP to `(xs, ys)`.
///
/// `prior_mean_raw` is the constant prior mean in raw target units; `None`
/// places it at the sample mean (zero after standardization).
pub fn fit(
    xs: &[Vec<f64>],
    ys: &[f64],
    kernel: &KernelParams,
    prior_mean_raw: Option<f64>,
) -> Result<GpModel> {
    kernel.validate()?;
    if xs.is_empty() {
        return Err(invalid_arg("GP fit needs at least one observation"));
    }
    if xs.len() != ys.len() {
        return Err(invalid_arg(format!(
            "{} inputs but {} targets",
            xs.len(),
            ys.len()
        )));
    }
    for x in xs {
        check_dim(kernel, x, "training input")?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("training input contains non-finite values"));
        }
    }
    if let Some(y) = ys.iter().find(|y| !y.is_finite()) {
        return Err(invalid_arg(format!("non-finite target {y}")));
    }

    let n = ys.len();
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if n < 2 || !(var.sqrt() > 0.0) { 1.0 } else { var.sqrt() };
    let prior_mean = prior_mean_raw.map_or(0.0, |m| (m - y_mean) / y_std);

    let mut k = gram_matrix(xs, kernel);
    for i in 0..n {
        k[(i, i)] += kernel.noise_variance;
    }

    let mut jitter = 0.0;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            let diag_ok = c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite());
            if diag_ok {
                break c;
            }
        }
        if jitter == 0.0 {
            jitter = JITTER_START;
        } else if jitter < JITTER_MAX * 0.5 {
            jitter *= 10.0;
        } else {
            let eig = k.clone().symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Err(Error::NumericalFailure(format!(
                "Cholesky failed with jitter up to {JITTER_MAX:e}: n={n}, eigenvalues in [{min:e}, {max:e}]"
            )));
        }
    };

    let z = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_std - prior_mean));
    let alpha = chol.solve(&z);

    Ok(GpModel {
        xs: xs.to_vec(),
        y_raw: ys.to_vec(),
        y_mean,
        y_std,
        chol,
        alpha,
        kernel: kernel.clone(),
        prior_mean,
        jitter,
    })
}

impl GpModel {
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn targets(&self) -> &[f64] {
        &self.y_raw
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    /// Prior mean in standardized units.
    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    /// Diagonal jitter that was needed for the factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor of `K + (noise + jitter)·I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.kernel.eval(x, xi)))
    }

    /// Posterior mean and std of the latent function at `x`, in raw units.
    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        check_dim(&self.kernel, x, "query point")?;
        let ks = self.cross_cov(x);
        let mean_z = self.prior_mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var_z = (self.kernel.signal_variance - v.norm_squared()).max(0.0);
        Ok(Posterior {
            mean: self.y_mean + self.y_std * mean_z,
            std: self.y_std * var_z.sqrt(),
        })
    }

    /// Posterior values plus their gradients with respect to `x`.
    pub fn posterior_gradient(&self, x: &[f64]) -> Result<PosteriorGradient> {
        check_dim(&self.kernel, x, "query point")?;
        let k = self.dim();
        let ks = self.cross_cov(x);
        let mean_z = self.prior_mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var_z = (self.kernel.signal_variance - v.norm_squared()).max(0.0);
        let std_z = var_z.sqrt();
        // K^{-1} k*
        let w = self
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&v)
            .expect("Cholesky factor has a positive diagonal");

        let mut dmean_z = vec![0.0; k];
        let mut dvar_z = vec![0.0; k];
        let mut dk = vec![0.0; k];
        for (i, xi) in self.xs.iter().enumerate() {
            self.kernel.grad_wrt_first(x, xi, &mut dk);
            for d in 0..k {
                dmean_z[d] += self.alpha[i] * dk[d];
                dvar_z[d] -= 2.0 * w[i] * dk[d];
            }
        }

        let degenerate = std_z < DEGENERATE_STD;
        let dstd = if degenerate {
            vec![0.0; k]
        } else {
            dvar_z
                .iter()
                .map(|g| self.y_std * g / (2.0 * std_z))
                .collect()
        };
        Ok(PosteriorGradient {
            mean: self.y_mean + self.y_std * mean_z,
            std: self.y_std * std_z,
            dmean: dmean_z.iter().map(|g| self.y_std * g).collect(),
            dstd,
            degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box_point(rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![
            rng.random_range(150.0..250.0),
            rng.random_range(330.0..450.0),
            rng.random_range(730.0..830.0),
        ]
    }

    #[test]
    fn kernel_at_identical_points_is_signal_variance() {
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let a = [173.2, 401.0, 799.9];
        assert_eq!(matern52(&a, &a, &p).unwrap(), 1.0);
    }

    #[test]
    fn kernel_is_symmetric() {
        let p = KernelParams::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_box_point(&mut rng);
            let b = random_box_point(&mut rng);
            assert_eq!(matern52(&a, &b, &p).unwrap(), matern52(&b, &a, &p).unwrap());
        }
    }

    #[test]
    fn kernel_corner_to_corner_matches_closed_form() {
        // r = sqrt((100/19.9)^2 + (120/26.5)^2 + (100/21.15)^2), evaluated by hand
        let r: f64 = ((100.0f64 / 19.9).powi(2) + (120.0f64 / 26.5).powi(2) + (100.0f64 / 21.15).powi(2)).sqrt();
        let expected = (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp();
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let v = matern52(&[150.0, 330.0, 730.0], &[250.0, 450.0, 830.0], &p).unwrap();
        assert!((v - expected).abs() <= 1e-12 * expected.max(1e-300), "{v} vs {expected}");
        assert!(v > 0.0 && v <= 1.0);
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let p = KernelParams::paper();
        assert!(matches!(
            matern52(&[1.0, 2.0], &[1.0, 2.0, 3.0], &p),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kernel_params_validation() {
        assert!(KernelParams::new(vec![1.0, 0.0], 1.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], 1.0, -1e-3).is_err());
        assert!(KernelParams::new(vec![], 1.0, 0.0).is_err());
    }

    #[test]
    fn gram_matrix_factorizes_for_twenty_points() {
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let xs: Vec<_> = (0..20).map(|_| random_box_point(&mut rng)).collect();
            let ys: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            assert!(fit(&xs, &ys, &p, None).is_ok());
        }
    }

    #[test]
    fn single_point_interpolates() {
        let p = KernelParams::paper();
        let m = fit(&[vec![200.0, 400.0, 780.0]], &[500.0], &p, None).unwrap();
        assert_eq!(m.alpha().len(), 1);
        let post = m.posterior(&[200.0, 400.0, 780.0]).unwrap();
        assert!((post.mean - 500.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_rows_use_jitter() {
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let xs = vec![vec![200.0, 400.0, 780.0], vec![200.0, 400.0, 780.0], vec![180.0, 350.0, 760.0]];
        let m = fit(&xs, &[1.0, 1.2, 0.3], &p, None).unwrap();
        assert!(m.jitter() >= JITTER_START);
        assert!(m.posterior(&[190.0, 390.0, 790.0]).unwrap().mean.is_finite());
    }

    #[test]
    fn cholesky_reconstructs_gram_matrix() {
        let p = KernelParams::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<_> = (0..5).map(|_| random_box_point(&mut rng)).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-100.0..900.0)).collect();
        let m = fit(&xs, &ys, &p, None).unwrap();
        let l = m.cholesky_factor();
        for i in 0..5 {
            assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..5 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
        let rebuilt = &l * l.transpose();
        let mut k = gram_matrix(&xs, &p);
        for i in 0..5 {
            k[(i, i)] += p.noise_variance;
        }
        let rel = (&rebuilt - &k).norm() / k.norm();
        assert!(rel <= 1e-10, "relative reconstruction error {rel}");
    }

    #[test]
    fn noiseless_training_point_is_interpolated() {
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let xs = vec![vec![160.0, 340.0, 740.0], vec![200.0, 390.0, 780.0], vec![240.0, 440.0, 820.0]];
        let ys = [310.0, 720.0, 450.0];
        let m = fit(&xs, &ys, &p, None).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            let post = m.posterior(x).unwrap();
            assert!(((post.mean - y) / y).abs() <= 1e-6);
            assert!(post.std <= 1e-5 * m.y_std());
        }
    }

    #[test]
    fn far_from_data_reverts_to_prior() {
        let p = KernelParams::paper();
        let xs = vec![vec![160.0, 340.0, 740.0], vec![200.0, 390.0, 780.0]];
        let m = fit(&xs, &[100.0, 300.0], &p, Some(0.0)).unwrap();
        let post = m.posterior(&[5000.0, 5000.0, 5000.0]).unwrap();
        assert!((post.mean - 0.0).abs() <= 1e-3 * m.y_std());
        let prior_std = p.signal_variance.sqrt() * m.y_std();
        assert!(((post.std - prior_std) / prior_std).abs() <= 1e-3);
        let g = m.posterior_gradient(&[5000.0, 5000.0, 5000.0]).unwrap();
        assert!(g.dmean.iter().chain(&g.dstd).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn degenerate_std_gradient_is_flagged() {
        let p = KernelParams::new(vec![19.9, 26.5, 21.15], 1.0, 0.0).unwrap();
        let m = fit(&[vec![200.0, 400.0, 780.0]], &[1.0], &p, None).unwrap();
        let g = m.posterior_gradient(&[200.0, 400.0, 780.0]).unwrap();
        assert!(g.degenerate);
        assert!(g.dstd.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fit_rejects_bad_input() {
        let p = KernelParams::paper();
        assert!(fit(&[], &[], &p, None).is_err());
        assert!(fit(&[vec![1.0, 2.0]], &[1.0], &p, None).is_err());
        assert!(fit(&[vec![1.0, 2.0, 3.0]], &[f64::NAN], &p, None).is_err());
    }
}
