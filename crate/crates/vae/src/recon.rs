//! Transport reconstruction term and its gradient under a fixed plan.

use nalgebra::{DMatrix, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sfgs_core::manifold::{CloudMeta, FieldCloud, FieldPoint, SamplingConfig, SamplingScheme};
use sfgs_core::mdist::{assignment, cost_matrix, median, sinkhorn, GroundMetricConfig};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub metric: GroundMetricConfig,
    /// Equal-size clouds up to this many points use the exact assignment.
    pub exact_max_points: usize,
    /// Entropic regularization as a fraction of the median cost.
    pub sinkhorn_eps_scale: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            metric: GroundMetricConfig::default(),
            exact_max_points: 64,
            sinkhorn_eps_scale: 1e-2,
            sinkhorn_max_iters: 2000,
            sinkhorn_tol: 1e-6,
        }
    }
}

/// A decoded submanifold field: per-point positions and colors plus one
/// global opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// `P' × 3`.
    pub positions: Array2<f64>,
    /// `P' × 3`, in `[0, 1]`.
    pub colors: Array2<f64>,
    pub alpha: f64,
}

impl Decoded {
    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_cloud(&self, radius: f64) -> FieldCloud {
        let points = (0..self.len())
            .map(|j| FieldPoint {
                position: Vector3::new(self.positions[(j, 0)], self.positions[(j, 1)], self.positions[(j, 2)]),
                rgb: [self.colors[(j, 0)], self.colors[(j, 1)], self.colors[(j, 2)]],
                alpha: self.alpha,
            })
            .collect();
        let sampling = SamplingConfig { n: 0, radius, scheme: SamplingScheme::Decoded, offset: true };
        FieldCloud::new(points, CloudMeta { sampling, transform: None })
    }
}

#[derive(Debug, Clone)]
pub struct TransportLoss {
    /// `⟨Γ, C⟩`.
    pub value: f64,
    pub d_positions: Array2<f64>,
    pub d_colors: Array2<f64>,
    pub d_alpha: f64,
    pub exact: bool,
}

/// Optimal coupling between `target` and `decoded` under `cfg`.
pub fn transport_plan(costs: &DMatrix<f64>, cfg: &ReconConfig) -> (DMatrix<f64>, bool) {
    let (n, m) = costs.shape();
    if n == m && n <= cfg.exact_max_points {
        let perm = assignment::solve(costs);
        let mut plan = DMatrix::zeros(n, m);
        for (i, &j) in perm.iter().enumerate() {
            plan[(i, j)] = 1.0 / n as f64;
        }
        (plan, true)
    } else {
        let eps = (cfg.sinkhorn_eps_scale * median(costs.iter().copied())).max(1e-12);
        let out = sinkhorn::solve(costs, eps, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol);
        (sinkhorn::round_to_marginals(&out.coupling), false)
    }
}

/// Transport cost between an input cloud and a decoded field, with the
/// gradient of that cost w.r.t. the decoded outputs holding the plan fixed.
pub fn transport_loss(target: &FieldCloud, decoded: &Decoded, cfg: &ReconConfig) -> Result<TransportLoss> {
    let out = decoded.to_cloud(target.meta.sampling.radius);
    let costs = cost_matrix(target, &out, &cfg.metric)?;
    let (plan, exact) = transport_plan(&costs, cfg);
    let value = plan.component_mul(&costs).sum();

    let lambda = cfg.metric.lambda;
    let alpha_hat = if cfg.metric.include_alpha { decoded.alpha } else { 1.0 };
    let m = decoded.len();
    let mut d_positions = Array2::zeros((m, 3));
    let mut d_colors = Array2::zeros((m, 3));
    let mut d_alpha = 0.0;
    for (i, p) in target.points.iter().enumerate() {
        let a = if cfg.metric.include_alpha { p.alpha } else { 1.0 };
        for j in 0..m {
            let w = plan[(i, j)];
            if w == 0.0 {
                continue;
            }
            for k in 0..3 {
                d_positions[(j, k)] += 2.0 * w * (decoded.positions[(j, k)] - p.position[k]);
                let feature_grad = 2.0 * lambda * w * (alpha_hat * decoded.colors[(j, k)] - a * p.rgb[k]);
                d_colors[(j, k)] += alpha_hat * feature_grad;
                if cfg.metric.include_alpha {
                    d_alpha += feature_grad * decoded.colors[(j, k)];
                }
            }
        }
    }
    Ok(TransportLoss { value, d_positions, d_colors, d_alpha, exact })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfgs_core::mdist::w2_exact;
    use sfgs_core::rng::CounterRng;
    use rand::Rng;

    fn random_decoded(rng: &mut CounterRng, m: usize) -> Decoded {
        Decoded {
            positions: Array2::from_shape_simple_fn((m, 3), || rng.random_range(-1.0..1.0)),
            colors: Array2::from_shape_simple_fn((m, 3), || rng.random_range(0.0..1.0)),
            alpha: rng.random_range(0.1..0.9),
        }
    }

    #[test]
    fn zero_for_identical_clouds_and_matches_exact_solver() {
        let mut rng = CounterRng::new(1, 0);
        let d = random_decoded(&mut rng, 6);
        let cloud = d.to_cloud(1.0);
        let same = transport_loss(&cloud, &d, &ReconConfig::default()).unwrap();
        assert_eq!(same.value, 0.0);
        let other = random_decoded(&mut rng, 6);
        let loss = transport_loss(&cloud, &other, &ReconConfig::default()).unwrap();
        let exact = w2_exact(&cloud, &other.to_cloud(1.0), &GroundMetricConfig::default()).unwrap().cost;
        assert!((loss.value - exact).abs() < 1e-12);
        assert!(loss.exact);
    }

    #[test]
    fn fixed_plan_gradient_matches_finite_differences() {
        let mut rng = CounterRng::new(2, 0);
        let target = random_decoded(&mut rng, 5).to_cloud(1.0);
        let d = random_decoded(&mut rng, 5);
        for cfg in [ReconConfig::default(), ReconConfig { metric: GroundMetricConfig { lambda: 0.5, include_alpha: false }, ..Default::default() }] {
            let loss = transport_loss(&target, &d, &cfg).unwrap();
            let f = |d: &Decoded| transport_loss(&target, d, &cfg).unwrap().value;
            let h = 1e-6;
            for j in 0..5 {
                for k in 0..3 {
                    let mut p = d.clone();
                    let mut q = d.clone();
                    p.positions[(j, k)] += h;
                    q.positions[(j, k)] -= h;
                    assert!(((f(&p) - f(&q)) / (2.0 * h) - loss.d_positions[(j, k)]).abs() < 1e-7);
                    let mut p = d.clone();
                    let mut q = d.clone();
                    p.colors[(j, k)] += h;
                    q.colors[(j, k)] -= h;
                    assert!(((f(&p) - f(&q)) / (2.0 * h) - loss.d_colors[(j, k)]).abs() < 1e-7);
                }
            }
            let mut p = d.clone();
            let mut q = d.clone();
            p.alpha += h;
            q.alpha -= h;
            assert!(((f(&p) - f(&q)) / (2.0 * h) - loss.d_alpha).abs() < 1e-7);
        }
    }

    #[test]
    fn large_clouds_use_entropic_plan() {
        let mut rng = CounterRng::new(3, 0);
        let target = random_decoded(&mut rng, 70).to_cloud(1.0);
        let d = random_decoded(&mut rng, 70);
        let loss = transport_loss(&target, &d, &ReconConfig::default()).unwrap();
        assert!(!loss.exact);
        let exact = w2_exact(&target, &d.to_cloud(1.0), &GroundMetricConfig::default()).unwrap().cost;
        assert!(loss.value >= exact - 1e-9 && loss.value <= exact * 1.1);
    }
}
