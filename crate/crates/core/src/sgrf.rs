//! Single-Gaussian radiance field: `φ(x, d) = ρ(x) · α · Color(Rᵀ d)`.
//!
//! Colors are evaluated in the primitive's local frame, so rotating the
//! frame together with the SH coefficients leaves the field unchanged. The
//! two constructors below produce such equivalent parameter sets.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::primitives::{quat_to_rot, rot_to_quat, GaussianParams};
use crate::rng::CounterRng;
use crate::sh::{eval_color, zflip_transform};

/// Half turn about the local z axis.
pub fn r_flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))
}

pub fn sgrf_eval(params: &GaussianParams, x: &Vector3<f64>, d: &Vector3<f64>, offset: bool) -> Result<[f64; 3]> {
    let rotation = params.rotation();
    let scales = params.s.map(f64::exp);
    if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidCovariance);
    }
    let local = rotation.transpose() * (x - params.mu);
    let mahalanobis_sq = local.component_div(&scales).norm_squared();
    let density = (-0.5 * mahalanobis_sq).exp();
    let weight = density * params.alpha();
    let color = eval_color(&params.c, &(rotation.transpose() * d), offset);
    Ok(color.map(|c| weight * c))
}

/// Same primitive with the quaternion negated.
pub fn make_equivalent_qsign(params: &GaussianParams) -> GaussianParams {
    params.with_q(-params.q()).expect("negated unit quaternion is valid")
}

/// Same field with the local frame turned by a half turn about its z axis and
/// the SH coefficients transformed to match.
pub fn make_equivalent_flip(params: &GaussianParams) -> GaussianParams {
    let rotation = quat_to_rot(params.q()) * r_flip();
    let q = rot_to_quat(&rotation).expect("product of rotations is a rotation");
    let mut out = params.with_q(q).expect("unit quaternion");
    out.c = zflip_transform(&params.c);
    out
}

/// Monte-Carlo probe set for comparing fields.
#[derive(Debug, Clone)]
pub struct FieldProbe {
    pub positions: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    pub seed: u64,
}

impl FieldProbe {
    /// `count` probes with `x ~ N(μ, 4Σ)` and `d` uniform on the sphere.
    pub fn around(params: &GaussianParams, count: usize, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed, 0);
        let transform = params.rotation() * Matrix3::from_diagonal(&params.s.map(f64::exp));
        let mut positions = Vec::with_capacity(count);
        let mut directions = Vec::with_capacity(count);
        for _ in 0..count {
            let z = gaussian3(&mut rng);
            positions.push(params.mu + transform * z * 2.0);
            directions.push(uniform_direction(&mut rng));
        }
        Self { positions, directions, seed }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn uniform_direction<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = gaussian3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldComparison {
    pub equal: bool,
    pub max_deviation: f64,
}

/// Compares two fields over a probe set with the sup norm.
pub fn fields_equal(a: &GaussianParams, b: &GaussianParams, probe: &FieldProbe, tol: f64, offset: bool) -> Result<FieldComparison> {
    if probe.is_empty() {
        return Err(Error::InvalidInput("empty probe set".into()));
    }
    let max_deviation = probe
        .positions
        .par_iter()
        .zip(&probe.directions)
        .map(|(x, d)| {
            let fa = sgrf_eval(a, x, d, offset)?;
            let fb = sgrf_eval(b, x, d, offset)?;
            Ok((0..3).map(|i| (fa[i] - fb[i]).abs()).fold(0.0, f64::max))
        })
        .try_reduce(|| 0.0, |x, y| Ok(x.max(y)))?;
    Ok(FieldComparison { equal: max_deviation <= tol, max_deviation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::Quat;
    use crate::sh::{self, ShCoeffs};

    fn random_params(rng: &mut CounterRng) -> GaussianParams {
        let q = Quat::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let s = Vector3::new(rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5));
        let mu = gaussian3(rng);
        GaussianParams::new(mu, q, s, sh::sample_band_coeffs(rng, 3, 3, 4.0, 0.05).unwrap(), rng.random_range(-5.0..10.0)).unwrap()
    }

    /// Explicit inverse and direct SH double sum.
    fn naive_eval(p: &GaussianParams, x: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
        let cov = p.covariance();
        let inv = cov.try_inverse().unwrap();
        let dx = x - p.mu;
        let rho = (-0.5 * (dx.transpose() * inv * dx)[(0, 0)]).exp();
        let local = p.rotation().transpose() * d;
        let basis = sh::eval_sh_basis(&local, 3).unwrap();
        let alpha = 1.0 / (1.0 + (-p.o).exp());
        std::array::from_fn(|ch| {
            let raw: f64 = (0..16).map(|k| p.c.get(ch, k) * basis[k]).sum();
            rho * alpha * (raw + 0.5).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn density_at_center_and_at_mahalanobis_two() {
        let p = GaussianParams::new(Vector3::new(1.0, 2.0, 3.0), Quat::IDENTITY, Vector3::zeros(), ShCoeffs::dc(3, [0.3, 0.1, -0.2]), 1.0).unwrap();
        let d = Vector3::z();
        let at_mu = sgrf_eval(&p, &p.mu, &d, true).unwrap();
        let color = eval_color(&p.c, &d, true);
        for ch in 0..3 {
            assert!((at_mu[ch] - p.alpha() * color[ch]).abs() < 1e-15);
        }
        let x = p.mu + Vector3::new(2f64.sqrt(), 0.0, 0.0);
        let off = sgrf_eval(&p, &x, &d, true).unwrap();
        for ch in 0..3 {
            assert!((off[ch] - at_mu[ch] * (-1f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_evaluator() {
        let mut rng = CounterRng::new(8, 0);
        for _ in 0..200 {
            let p = random_params(&mut rng);
            let probe = FieldProbe::around(&p, 10, rng.random());
            for (x, d) in probe.positions.iter().zip(&probe.directions) {
                let a = sgrf_eval(&p, x, d, true).unwrap();
                let b = naive_eval(&p, x, d);
                for ch in 0..3 {
                    assert!((a[ch] - b[ch]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn qsign_equivalence() {
        let p = GaussianParams::new(Vector3::zeros(), Quat::IDENTITY, Vector3::zeros(), ShCoeffs::zeros(3), 0.0).unwrap();
        let n = make_equivalent_qsign(&p);
        assert_eq!(n.q(), Quat::new(-1.0, 0.0, 0.0, 0.0));
        assert_eq!(make_equivalent_qsign(&n), p);
        assert_ne!(n, p);
        let mut rng = CounterRng::new(4, 0);
        let r = random_params(&mut rng);
        let probe = FieldProbe::around(&r, 100, 1);
        let cmp = fields_equal(&r, &make_equivalent_qsign(&r), &probe, 1e-12, true).unwrap();
        assert!(cmp.equal, "{cmp:?}");
    }

    #[test]
    fn flip_of_identity() {
        let mut rng = CounterRng::new(10, 0);
        let mut p = random_params(&mut rng);
        p = p.with_q(Quat::IDENTITY).unwrap();
        let f = make_equivalent_flip(&p);
        // Half turn about z is (0, 0, 0, 1).
        assert!(f.q().l1_distance(Quat::new(0.0, 0.0, 0.0, 1.0)) < 1e-15);
        assert_eq!(f.c, zflip_transform(&p.c));
        let probe = FieldProbe::around(&p, 1000, 2);
        assert!(fields_equal(&p, &f, &probe, 1e-9, true).unwrap().equal);
    }

    #[test]
    fn flip_equivalence_on_random_primitives() {
        let mut rng = CounterRng::new(11, 0);
        for i in 0..100 {
            let p = random_params(&mut rng);
            let f = make_equivalent_flip(&p);
            assert!((p.covariance() - f.covariance()).abs().max() <= 1e-12);
            assert!(p.l1_distance(&f) > 1e-3);
            let probe = FieldProbe::around(&p, 1000, i);
            let cmp = fields_equal(&p, &f, &probe, 1e-9, false).unwrap();
            assert!(cmp.equal, "{cmp:?}");
        }
    }

    #[test]
    fn perturbed_scale_is_detected() {
        let mut rng = CounterRng::new(12, 0);
        let p = random_params(&mut rng);
        let mut scaled = p.clone();
        scaled.s *= 1.1;
        let probe = FieldProbe::around(&p, 1000, 3);
        assert!(!fields_equal(&p, &scaled, &probe, 1e-3, true).unwrap().equal);
        assert!(fields_equal(&p, &p, &probe, 0.0, true).unwrap().equal);
    }

    #[test]
    fn isotropic_rotation_freedom() {
        let mut rng = CounterRng::new(13, 0);
        for i in 0..20 {
            let t = rng.random_range(-2.0..0.5);
            let dc = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = GaussianParams::new(gaussian3(&mut rng), Quat::IDENTITY, Vector3::from_element(t), ShCoeffs::dc(3, dc), 0.3).unwrap();
            let q = Quat::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let rotated = p.with_q(q).unwrap();
            let probe = FieldProbe::around(&p, 500, i);
            assert!(fields_equal(&p, &rotated, &probe, 1e-9, true).unwrap().equal);
        }
    }

    #[test]
    fn empty_probe_rejected() {
        let mut rng = CounterRng::new(1, 0);
        let p = random_params(&mut rng);
        let probe = FieldProbe { positions: vec![], directions: vec![], seed: 0 };
        assert!(fields_equal(&p, &p, &probe, 0.0, true).is_err());
    }
}
