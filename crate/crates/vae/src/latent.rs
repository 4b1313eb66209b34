//! Diagonal-Gaussian posterior, reparameterization and KL to the standard
//! normal prior.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mean: Array1<f64>,
    pub logvar: Array1<f64>,
    /// Standard-normal draw behind `sample`.
    pub eps: Array1<f64>,
    pub sample: Array1<f64>,
}

impl LatentCode {
    pub fn new(mean: Array1<f64>, logvar: Array1<f64>, eps: Array1<f64>) -> Self {
        let sample = reparameterize(&mean.view(), &logvar.view(), &eps.view());
        Self { mean, logvar, eps, sample }
    }

    /// Posterior mean as the code, with `eps = 0`.
    pub fn deterministic(mean: Array1<f64>, logvar: Array1<f64>) -> Self {
        let eps = Array1::zeros(mean.len());
        Self::new(mean, logvar, eps)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.mean.view(), &self.logvar.view())
    }
}

/// `mean + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(mean: &ArrayView1<f64>, logvar: &ArrayView1<f64>, eps: &ArrayView1<f64>) -> Array1<f64> {
    ndarray::Zip::from(mean).and(logvar).and(eps).map_collect(|&m, &lv, &e| m + (0.5 * lv).exp() * e)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// `½ Σ (exp(logvar) + mean² − 1 − logvar)`.
pub fn kl_divergence(mean: &ArrayView1<f64>, logvar: &ArrayView1<f64>) -> f64 {
    mean.iter().zip(logvar).map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv)).sum()
}

/// Gradients of `kl_divergence` w.r.t. `(mean, logvar)`.
pub fn kl_gradient(mean: &ArrayView1<f64>, logvar: &ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    (mean.to_owned(), logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0)))
}

/// Backpropagates a sample gradient `dz` to `(dmean, dlogvar)`.
pub fn reparameterize_backward(dz: &ArrayView1<f64>, logvar: &ArrayView1<f64>, eps: &ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let dlogvar = ndarray::Zip::from(dz).and(logvar).and(eps).map_collect(|&g, &lv, &e| g * e * 0.5 * (0.5 * lv).exp());
    (dz.to_owned(), dlogvar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use sfgs_core::rng::CounterRng;

    #[test]
    fn reparameterization_examples() {
        let mean = array![0.3, -1.0, 2.0];
        let logvar = array![0.0, 0.0, 0.0];
        assert_eq!(reparameterize(&mean.view(), &logvar.view(), &array![0.0, 0.0, 0.0].view()), mean);
        assert_eq!(reparameterize(&mean.view(), &logvar.view(), &array![1.0, 0.0, 0.0].view()), array![1.3, -1.0, 2.0]);
    }

    #[test]
    fn sample_variance_matches_exp_logvar() {
        let mut rng = CounterRng::new(3, 0);
        let mean = array![0.5, -0.2];
        let logvar = array![0.7, -1.3];
        let n = 100_000;
        let mut sum = Array1::<f64>::zeros(2);
        let mut sum_sq = Array1::<f64>::zeros(2);
        for _ in 0..n {
            let z = reparameterize(&mean.view(), &logvar.view(), &standard_normal(&mut rng, 2).view());
            sum += &z;
            sum_sq += &z.mapv(|v| v * v);
        }
        for d in 0..2 {
            let m = sum[d] / n as f64;
            let var = sum_sq[d] / n as f64 - m * m;
            assert!((var / logvar[d].exp() - 1.0).abs() < 0.03, "{var}");
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_divergence(&array![0.0, 0.0].view(), &array![0.0, 0.0].view()), 0.0);
        assert_eq!(kl_divergence(&array![1.0, 0.0].view(), &array![0.0, 0.0].view()), 0.5);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = CounterRng::new(4, 0);
        for _ in 0..3 {
            let mean = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
            let logvar = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..0.5));
            let n = 1_000_000;
            // E_q[log q(z) − log p(z)], both diagonal Gaussians.
            let mut total = 0.0;
            for _ in 0..n {
                let eps = standard_normal(&mut rng, 3);
                let z = reparameterize(&mean.view(), &logvar.view(), &eps.view());
                let log_q: f64 = (0..3).map(|d| -0.5 * (eps[d] * eps[d] + logvar[d])).sum();
                let log_p: f64 = z.iter().map(|v| -0.5 * v * v).sum();
                total += log_q - log_p;
            }
            let mc = total / n as f64;
            let exact = kl_divergence(&mean.view(), &logvar.view());
            assert!((mc / exact - 1.0).abs() < 0.02, "{mc} vs {exact}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mean = array![0.4, -0.7];
        let logvar = array![0.2, -0.9];
        let eps = array![1.1, -0.3];
        let (gm, glv) = kl_gradient(&mean.view(), &logvar.view());
        let dz = array![0.6, -1.4];
        let (rm, rlv) = reparameterize_backward(&dz.view(), &logvar.view(), &eps.view());
        let h = 1e-6;
        for d in 0..2 {
            let mut lp = logvar.clone();
            let mut lm = logvar.clone();
            lp[d] += h;
            lm[d] -= h;
            let fd = (kl_divergence(&mean.view(), &lp.view()) - kl_divergence(&mean.view(), &lm.view())) / (2.0 * h);
            assert!((fd - glv[d]).abs() < 1e-8);
            let f = |lv: &Array1<f64>| reparameterize(&mean.view(), &lv.view(), &eps.view()).dot(&dz);
            assert!(((f(&lp) - f(&lm)) / (2.0 * h) - rlv[d]).abs() < 1e-8);
        }
        assert_eq!(gm, mean);
        assert_eq!(rm, dz);
    }
}
