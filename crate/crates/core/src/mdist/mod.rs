//! Manifold Distance: Wasserstein-2 between discretized submanifold fields
//! under the ground cost `‖x − y‖² + λ ‖c_x − c_y‖²`.

pub mod assignment;
pub mod sinkhorn;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{sample_params, FieldCloud, SamplingConfig};
use crate::primitives::GaussianParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundMetricConfig {
    pub lambda: f64,
    /// Premultiply colors by per-point opacity before comparing them.
    pub include_alpha: bool,
}

impl Default for GroundMetricConfig {
    fn default() -> Self {
        Self { lambda: 1.0, include_alpha: true }
    }
}

impl GroundMetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Entropic,
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: DMatrix<f64>,
    /// Row-to-column matching when the plan is a scaled permutation.
    pub assignment: Option<Vec<usize>>,
}

impl TransportPlan {
    pub fn from_assignment(assignment: Vec<usize>) -> Self {
        let n = assignment.len();
        let mut coupling = DMatrix::zeros(n, n);
        for (i, &j) in assignment.iter().enumerate() {
            coupling[(i, j)] = 1.0 / n as f64;
        }
        Self { coupling, assignment: Some(assignment) }
    }

    /// Largest absolute deviation of any row or column sum from uniform.
    pub fn marginal_error(&self) -> f64 {
        let (n, m) = self.coupling.shape();
        let rows = (0..n).map(|i| (self.coupling.row(i).sum() - 1.0 / n as f64).abs());
        let cols = (0..m).map(|j| (self.coupling.column(j).sum() - 1.0 / m as f64).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn cost(&self, costs: &DMatrix<f64>) -> f64 {
        match &self.assignment {
            Some(a) => assignment::assignment_cost(costs, a) / a.len() as f64,
            None => self.coupling.component_mul(costs).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transport {
    /// `⟨Γ, C⟩`, the squared distance.
    pub cost: f64,
    pub plan: TransportPlan,
    pub solver: Solver,
    pub converged: bool,
    pub marginal_error: f64,
}

impl Transport {
    pub fn distance(&self) -> f64 {
        self.cost.max(0.0).sqrt()
    }
}

fn point_features(cloud: &FieldCloud, cfg: &GroundMetricConfig) -> Vec<[f64; 6]> {
    cloud
        .points
        .iter()
        .map(|p| {
            let w = if cfg.include_alpha { p.alpha } else { 1.0 };
            [p.position.x, p.position.y, p.position.z, w * p.rgb[0], w * p.rgb[1], w * p.rgb[2]]
        })
        .collect()
}

pub fn cost_matrix(a: &FieldCloud, b: &FieldCloud, cfg: &GroundMetricConfig) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("empty cloud".into()));
    }
    cfg.validate()?;
    let fa = point_features(a, cfg);
    let fb = point_features(b, cfg);
    Ok(DMatrix::from_fn(fa.len(), fb.len(), |i, j| {
        let (x, y) = (&fa[i], &fb[j]);
        let spatial: f64 = (0..3).map(|k| (x[k] - y[k]).powi(2)).sum();
        let color: f64 = (3..6).map(|k| (x[k] - y[k]).powi(2)).sum();
        spatial + cfg.lambda * color
    }))
}

pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exact empirical W2². Equal sizes are solved as an assignment; otherwise
/// the problem goes to Sinkhorn at `1e-3` of the median cost followed by
/// rounding onto the marginals.
pub fn w2_exact(a: &FieldCloud, b: &FieldCloud, cfg: &GroundMetricConfig) -> Result<Transport> {
    let costs = cost_matrix(a, b, cfg)?;
    if a.len() != b.len() {
        let eps = (1e-3 * median(costs.iter().copied())).max(1e-12);
        return Ok(sinkhorn_on_costs(&costs, eps, 20_000, 1e-9));
    }
    let plan = TransportPlan::from_assignment(assignment::solve(&costs));
    Ok(Transport { cost: plan.cost(&costs), marginal_error: plan.marginal_error(), plan, solver: Solver::Exact, converged: true })
}

/// Entropic approximation. The returned cost is the transport part
/// `⟨Γ, C⟩` of the rounded plan, without the entropy term.
pub fn w2_sinkhorn(a: &FieldCloud, b: &FieldCloud, cfg: &GroundMetricConfig, epsilon: f64, max_iters: usize, tol: f64) -> Result<Transport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let costs = cost_matrix(a, b, cfg)?;
    Ok(sinkhorn_on_costs(&costs, epsilon, max_iters, tol))
}

fn sinkhorn_on_costs(costs: &DMatrix<f64>, epsilon: f64, max_iters: usize, tol: f64) -> Transport {
    let out = sinkhorn::solve(costs, epsilon, max_iters, tol);
    let plan = TransportPlan { coupling: sinkhorn::round_to_marginals(&out.coupling), assignment: None };
    Transport {
        cost: plan.cost(costs),
        plan,
        solver: Solver::Entropic,
        converged: out.converged,
        marginal_error: out.marginal_error,
    }
}

/// Both W2 and W2² between two clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdistValue {
    pub distance: f64,
    pub distance_sq: f64,
}

pub fn cloud_mdist(a: &FieldCloud, b: &FieldCloud, cfg: &GroundMetricConfig) -> Result<MdistValue> {
    let t = w2_exact(a, b, cfg)?;
    Ok(MdistValue { distance: t.distance(), distance_sq: t.cost })
}

/// Manifold Distance between two primitives sampled with the same grid.
pub fn mdist(a: &GaussianParams, b: &GaussianParams, sampling: &SamplingConfig, cfg: &GroundMetricConfig) -> Result<MdistValue> {
    cloud_mdist(&sample_params(a, sampling)?, &sample_params(b, sampling)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{FieldPoint, SamplingScheme};
    use crate::primitives::Quat;
    use crate::rng::CounterRng;
    use crate::sgrf::{make_equivalent_flip, make_equivalent_qsign};
    use crate::sh;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cloud(points: &[([f64; 3], [f64; 3])]) -> FieldCloud {
        let rows: Vec<[f64; 7]> = points.iter().map(|(p, c)| [p[0], p[1], p[2], c[0], c[1], c[2], 1.0]).collect();
        FieldCloud::from_rows(&rows, SamplingConfig { scheme: SamplingScheme::Decoded, ..SamplingConfig::default() })
    }

    fn random_params(rng: &mut CounterRng) -> GaussianParams {
        let q = Quat::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let s = Vector3::new(rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0));
        GaussianParams::new(Vector3::zeros(), q, s, sh::sample_band_coeffs(rng, 3, 3, 4.0, 0.05).unwrap(), rng.random_range(-5.0..10.0)).unwrap()
    }

    fn random_cloud(rng: &mut CounterRng, n: usize) -> FieldCloud {
        sample_params(&random_params(rng), &SamplingConfig::with_n(n)).unwrap()
    }

    #[test]
    fn cost_examples() {
        let a = cloud(&[([0.0; 3], [0.2; 3])]);
        let b = cloud(&[([1.0, 0.0, 0.0], [0.2; 3])]);
        assert_eq!(cost_matrix(&a, &b, &GroundMetricConfig::default()).unwrap()[(0, 0)], 1.0);
        let c = cloud(&[([0.0; 3], [1.2, 0.2, 0.2])]);
        let cfg = GroundMetricConfig { lambda: 2.0, include_alpha: false };
        assert!((cost_matrix(&a, &c, &cfg).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);
        let mut rng = CounterRng::new(1, 0);
        let r = random_cloud(&mut rng, 6);
        let self_cost = cost_matrix(&r, &r, &GroundMetricConfig::default()).unwrap();
        assert!(self_cost.diagonal().iter().all(|v| *v == 0.0));
        assert!(cost_matrix(&a, &cloud(&[]), &cfg).is_err());
        assert!(cost_matrix(&a, &b, &GroundMetricConfig { lambda: -1.0, include_alpha: true }).is_err());
    }

    #[test]
    fn exact_beats_greedy_on_crossing_pairs() {
        // Greedy takes a0-b0 (cost 0.01) and is then forced into a1-b1 (cost 9).
        let a = cloud(&[([0.0, 0.0, 0.0], [0.0; 3]), ([2.0, 0.0, 0.0], [0.0; 3])]);
        let b = cloud(&[([0.1, 0.0, 0.0], [0.0; 3]), ([-1.0, 0.0, 0.0], [0.0; 3])]);
        let costs = cost_matrix(&a, &b, &GroundMetricConfig::default()).unwrap();
        let greedy = (costs[(0, 0)] + costs[(1, 1)]) / 2.0;
        let swapped = (costs[(0, 1)] + costs[(1, 0)]) / 2.0;
        let brute = greedy.min(swapped);
        let t = w2_exact(&a, &b, &GroundMetricConfig::default()).unwrap();
        assert!((t.cost - brute).abs() < 1e-12);
        assert!(t.cost < greedy);
        assert!(t.plan.marginal_error() < 1e-12);
    }

    #[test]
    fn identical_and_equivalent_primitives() {
        let mut rng = CounterRng::new(2, 0);
        let cfg = GroundMetricConfig::default();
        let sampling = SamplingConfig::default();
        for _ in 0..20 {
            let p = random_params(&mut rng);
            assert_eq!(mdist(&p, &p, &sampling, &cfg).unwrap().distance, 0.0);
            assert_eq!(mdist(&p, &make_equivalent_qsign(&p), &sampling, &cfg).unwrap().distance, 0.0);
            let flip = mdist(&p, &make_equivalent_flip(&p), &sampling, &cfg).unwrap();
            assert!(flip.distance_sq <= 1e-9 && flip.distance <= 1e-5, "{flip:?}");
        }
    }

    #[test]
    fn unequal_sizes_route_to_entropic() {
        let mut rng = CounterRng::new(3, 0);
        let a = random_cloud(&mut rng, 5);
        let b = random_cloud(&mut rng, 6);
        let t = w2_exact(&a, &b, &GroundMetricConfig::default()).unwrap();
        assert_eq!(t.solver, Solver::Entropic);
        assert!(t.plan.marginal_error() < 1e-6);
        assert!(t.cost > 0.0);
    }

    #[test]
    fn sinkhorn_on_identical_clouds_is_bounded_by_entropy() {
        let mut rng = CounterRng::new(4, 0);
        let a = random_cloud(&mut rng, 6);
        let cfg = GroundMetricConfig::default();
        let med = median(cost_matrix(&a, &a, &cfg).unwrap().iter().copied());
        let mut last = f64::INFINITY;
        for scale in [0.1, 0.03, 0.01, 0.003] {
            let eps = scale * med;
            let t = w2_sinkhorn(&a, &a, &cfg, eps, 50_000, 1e-10).unwrap();
            assert!(t.cost <= eps * (a.len() as f64).ln() + 1e-9, "{} > {}", t.cost, eps * 36f64.ln());
            assert!(t.cost <= last + 1e-12);
            assert!(t.plan.marginal_error() < 1e-6);
            last = t.cost;
        }
        assert!(last < 1e-3 * med);
    }

    #[test]
    fn sinkhorn_close_to_exact_and_monotone_in_epsilon() {
        let mut rng = CounterRng::new(5, 0);
        let cfg = GroundMetricConfig::default();
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 6);
            let b = random_cloud(&mut rng, 6);
            let exact = w2_exact(&a, &b, &cfg).unwrap().cost;
            let med = median(cost_matrix(&a, &b, &cfg).unwrap().iter().copied());
            let t = w2_sinkhorn(&a, &b, &cfg, 0.01 * med, 50_000, 1e-10).unwrap();
            assert!(((t.cost - exact) / exact).abs() <= 0.05, "{} vs {}", t.cost, exact);
            let mut gap = 0.0;
            for k in 0..5 {
                let eps = 0.005 * med * 2f64.powi(k);
                let g = w2_sinkhorn(&a, &b, &cfg, eps, 50_000, 1e-11).unwrap().cost - exact;
                assert!(g >= gap - 1e-9 * exact, "gap shrank: {g} < {gap}");
                gap = g;
            }
        }
    }

    #[test]
    fn symmetric_and_triangle() {
        let mut rng = CounterRng::new(6, 0);
        let cfg = GroundMetricConfig::default();
        for _ in 0..100 {
            let (a, b, c) = (random_cloud(&mut rng, 6), random_cloud(&mut rng, 6), random_cloud(&mut rng, 6));
            let ab = cloud_mdist(&a, &b, &cfg).unwrap().distance;
            let ba = cloud_mdist(&b, &a, &cfg).unwrap().distance;
            let bc = cloud_mdist(&b, &c, &cfg).unwrap().distance;
            let ac = cloud_mdist(&a, &c, &cfg).unwrap().distance;
            assert!((ab - ba).abs() <= 1e-9);
            assert!(ac <= ab + bc + 1e-6);
        }
    }

    #[test]
    fn position_noise_response() {
        let mut rng = CounterRng::new(7, 0);
        let cfg = GroundMetricConfig::default();
        let base = sample_params(
            &GaussianParams::new(Vector3::zeros(), Quat::IDENTITY, Vector3::zeros(), sh::ShCoeffs::zeros(3), 2.0).unwrap(),
            &SamplingConfig::with_n(6),
        )
        .unwrap();
        let sigma = 1e-3;
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut noisy = base.clone();
            for p in &mut noisy.points {
                p.position += Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma;
            }
            total += w2_exact(&base, &noisy, &cfg).unwrap().cost;
        }
        let mean = total / trials as f64;
        let expected = 3.0 * sigma * sigma;
        assert!(mean >= expected * 0.8 && mean <= expected * 1.2, "{mean} vs {expected}");
    }

    #[test]
    fn plan_marginals_of_assignment() {
        let plan = TransportPlan::from_assignment(vec![2, 0, 1]);
        assert!(plan.marginal_error() < 1e-15);
        let _ = FieldPoint { position: Vector3::zeros(), rgb: [0.0; 3], alpha: 1.0 };
    }
}
