//! Gaussian primitive parameters, activations and rotation algebra.
//!
//! Quaternions are stored in `(w, x, y, z)` order, matching the `rot_0..rot_3`
//! properties of 3DGS PLY exports.

use std::ops::Neg;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::ShCoeffs;

/// Quaternions whose norm is within this distance of one are treated as
/// already normalized. This keeps float32 round trips through PLY and dataset
/// files bit-stable.
pub const UNIT_TOLERANCE: f64 = 4.0 * f32::EPSILON as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm_squared(self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidParameter(format!("quaternion has norm {n}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Representative with `w > 0`, or with the first nonzero component
    /// positive when `w == 0`.
    pub fn canonical(self) -> Self {
        let first = self.to_array().into_iter().find(|v| *v != 0.0).unwrap_or(0.0);
        if first < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn l1_distance(self, other: Quat) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Rotation matrix of a nonzero quaternion.
///
/// Uses the `2 / |q|²` scaling so the result is orthonormal for any nonzero
/// input, and every entry is built from pairwise products so `q` and `-q`
/// yield bitwise-identical matrices.
pub fn quat_to_rot(q: Quat) -> Matrix3<f64> {
    let Quat { w, x, y, z } = q;
    let s = 2.0 / q.norm_squared();
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - s * (yy + zz),
        s * (xy - wz),
        s * (xz + wy),
        s * (xy + wz),
        1.0 - s * (xx + zz),
        s * (yz - wx),
        s * (xz - wy),
        s * (yz + wx),
        1.0 - s * (xx + yy),
    )
}

/// Unit quaternion of a proper rotation, in canonical sign.
///
/// Shepperd's method: the largest of `trace, R00, R11, R22` selects the
/// pivot component so the square root never sees a small argument.
pub fn rot_to_quat(r: &Matrix3<f64>) -> Result<Quat> {
    let deviation = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(deviation <= 1e-6) {
        return Err(Error::InvalidRotation { deviation });
    }
    let det = r.determinant();
    if det < 0.0 {
        return Err(Error::Reflection { det });
    }
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidRotation { deviation: (det - 1.0).abs() });
    }

    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let pivots = [trace, r[(0, 0)], r[(1, 1)], r[(2, 2)]];
    let (pivot, _) = pivots
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });

    let q = match pivot {
        0 => {
            let t = (1.0 + trace).sqrt() * 2.0;
            Quat::new(
                0.25 * t,
                (r[(2, 1)] - r[(1, 2)]) / t,
                (r[(0, 2)] - r[(2, 0)]) / t,
                (r[(1, 0)] - r[(0, 1)]) / t,
            )
        }
        1 => {
            let t = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(2, 1)] - r[(1, 2)]) / t,
                0.25 * t,
                (r[(0, 1)] + r[(1, 0)]) / t,
                (r[(0, 2)] + r[(2, 0)]) / t,
            )
        }
        2 => {
            let t = (1.0 - r[(0, 0)] + r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(0, 2)] - r[(2, 0)]) / t,
                (r[(0, 1)] + r[(1, 0)]) / t,
                0.25 * t,
                (r[(1, 2)] + r[(2, 1)]) / t,
            )
        }
        _ => {
            let t = (1.0 - r[(0, 0)] - r[(1, 1)] + r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(1, 0)] - r[(0, 1)]) / t,
                (r[(0, 2)] + r[(2, 0)]) / t,
                (r[(1, 2)] + r[(2, 1)]) / t,
                0.25 * t,
            )
        }
    };
    Ok(q.normalized()?.canonical())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Native parameter tuple of one primitive: center, rotation, log-scales,
/// SH color coefficients and opacity logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vector3<f64>,
    q: Quat,
    pub s: Vector3<f64>,
    pub c: ShCoeffs,
    pub o: f64,
}

impl GaussianParams {
    /// Builds a primitive, normalizing `q` unless it is already unit length
    /// within [`UNIT_TOLERANCE`].
    pub fn new(mu: Vector3<f64>, q: Quat, s: Vector3<f64>, c: ShCoeffs, o: f64) -> Result<Self> {
        let n = q.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidParameter(format!("quaternion has norm {n}")));
        }
        let q = if (n - 1.0).abs() <= UNIT_TOLERANCE { q } else { q.normalized()? };
        Ok(Self { mu, q, s, c, o })
    }

    pub fn q(&self) -> Quat {
        self.q
    }

    /// Replaces the rotation, normalizing as in [`GaussianParams::new`].
    pub fn with_q(&self, q: Quat) -> Result<Self> {
        Self::new(self.mu, q, self.s, self.c.clone(), self.o)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rot(self.q)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.rotation(), &self.s.map(f64::exp))
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.o)
    }

    /// L1 distance between the flattened parameter vectors.
    pub fn l1_distance(&self, other: &GaussianParams) -> f64 {
        let a = self.to_vec();
        let b = other.to_vec();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
    }

    /// Flattened layout `[mu | q | s | c (channel-major) | o]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(11 + 3 * self.c.len());
        v.extend(self.mu.iter());
        v.extend(self.q.to_array());
        v.extend(self.s.iter());
        for ch in 0..3 {
            v.extend(self.c.channel(ch));
        }
        v.push(self.o);
        v
    }

    pub fn from_slice(v: &[f64], l_max: usize) -> Result<Self> {
        let k = crate::sh::coeff_count(l_max)?;
        let expected = 11 + 3 * k;
        if v.len() != expected {
            return Err(Error::Shape { expected, actual: v.len() });
        }
        let c = ShCoeffs::from_channels(l_max, [&v[10..10 + k], &v[10 + k..10 + 2 * k], &v[10 + 2 * k..10 + 3 * k]])?;
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Quat::new(v[3], v[4], v[5], v[6]),
            Vector3::new(v[7], v[8], v[9]),
            c,
            v[expected - 1],
        )
    }
}

fn covariance_from(rotation: &Matrix3<f64>, scales: &Vector3<f64>) -> Matrix3<f64> {
    let var = scales.component_mul(scales);
    Matrix3::from_fn(|i, j| (0..3).map(|k| rotation[(i, k)] * rotation[(j, k)] * var[k]).sum())
}

/// Activated primitive: covariance, opacity and the linear map
/// `rotation * diag(scales)` that carries the unit sphere onto the
/// `r = 1` iso-probability ellipsoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub scales: Vector3<f64>,
    pub c: ShCoeffs,
    pub alpha: f64,
}

impl ActivatedGaussian {
    /// Builds an activated primitive from an explicit covariance. The local
    /// frame is taken from its eigendecomposition.
    pub fn from_covariance(mu: Vector3<f64>, sigma: Matrix3<f64>, c: ShCoeffs, alpha: f64) -> Result<Self> {
        let norm = sigma.abs().max();
        if !norm.is_finite() || (sigma - sigma.transpose()).abs().max() > 1e-12 * norm {
            return Err(Error::InvalidCovariance);
        }
        let eig = SymmetricEigen::new(sigma);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidCovariance);
        }
        let mut rotation = eig.eigenvectors;
        if rotation.determinant() < 0.0 {
            rotation.set_column(2, &(-rotation.column(2)));
        }
        Ok(Self { mu, sigma, rotation, scales: eig.eigenvalues.map(f64::sqrt), c, alpha })
    }

    /// The sphere-to-ellipsoid map `R diag(σ)`.
    pub fn transform(&self) -> Matrix3<f64> {
        self.rotation * Matrix3::from_diagonal(&self.scales)
    }

    pub fn is_spd(&self) -> bool {
        self.scales.iter().all(|&s| s > 0.0 && s.is_finite()) && self.sigma.iter().all(|v| v.is_finite())
    }
}

pub fn activate(params: &GaussianParams) -> Result<ActivatedGaussian> {
    if !(params.q.norm() > 0.0) {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    let rotation = params.rotation();
    let scales = params.s.map(f64::exp);
    Ok(ActivatedGaussian {
        mu: params.mu,
        sigma: covariance_from(&rotation, &scales),
        rotation,
        scales,
        c: params.c.clone(),
        alpha: params.alpha(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

    fn params(q: Quat, s: Vector3<f64>, o: f64) -> GaussianParams {
        GaussianParams::new(Vector3::zeros(), q, s, ShCoeffs::zeros(3), o).unwrap()
    }

    /// Hamilton product rotation `q v q*`, written independently of the
    /// matrix formula.
    fn rotate_by_quat(q: Quat, v: Vector3<f64>) -> Vector3<f64> {
        let mul = |a: [f64; 4], b: [f64; 4]| {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        };
        let qa = q.to_array();
        let conj = [qa[0], -qa[1], -qa[2], -qa[3]];
        let r = mul(mul(qa, [0.0, v.x, v.y, v.z]), conj);
        Vector3::new(r[1], r[2], r[3])
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized().unwrap())
    }

    #[test]
    fn identity_activation() {
        let g = activate(&params(Quat::IDENTITY, Vector3::zeros(), 0.0)).unwrap();
        assert!((g.sigma - Matrix3::identity()).abs().max() < 1e-15);
        assert_eq!(g.alpha, 0.5);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let q = Quat::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        let g = activate(&params(q, Vector3::new(LN_2, 0.0, 0.0), 0.0)).unwrap();
        // R = [[0,-1,0],[1,0,0],[0,0,1]], diag(4,1,1) -> diag(1,4,1)
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!((g.sigma - expected).abs().max() < 1e-12);
        assert!((g.sigma - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn opacity_saturates() {
        let g = activate(&params(Quat::IDENTITY, Vector3::zeros(), 10.0)).unwrap();
        assert!((g.alpha - 1.0).abs() < 1e-4);
    }

    #[test]
    fn zero_quaternion_rejected() {
        let err = GaussianParams::new(Vector3::zeros(), Quat::new(0.0, 0.0, 0.0, 0.0), Vector3::zeros(), ShCoeffs::zeros(0), 0.0);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        assert_eq!(quat_to_rot(Quat::IDENTITY), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let q = Quat::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        let v = quat_to_rot(q) * Vector3::x();
        let oracle = rotate_by_quat(q, Vector3::x());
        assert!((v - Vector3::y()).norm() < 1e-15);
        assert!((v - oracle).norm() < 1e-15);
    }

    #[test]
    fn reflection_and_non_orthogonal_rejected() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(rot_to_quat(&refl), Err(Error::Reflection { .. })));
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(rot_to_quat(&skew), Err(Error::InvalidRotation { .. })));
    }

    #[test]
    fn canonical_sign_with_zero_w() {
        let q = Quat::new(0.0, 0.0, -1.0, 0.0);
        assert_eq!(q.canonical(), Quat::new(0.0, 0.0, 1.0, 0.0));
        let r = quat_to_rot(q);
        assert_eq!(rot_to_quat(&r).unwrap(), Quat::new(0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn flat_vector_round_trip() {
        let p = params(Quat::new(0.5, 0.5, -0.5, 0.5), Vector3::new(-1.0, -2.0, -3.0), 1.5);
        let back = GaussianParams::from_slice(&p.to_vec(), 3).unwrap();
        assert_eq!(p, back);
        assert_eq!(p.to_vec().len(), 59);
    }

    proptest! {
        #[test]
        fn matrix_agrees_with_hamilton_product(q in arb_quat(), v in prop::array::uniform3(-2.0..2.0f64)) {
            let v = Vector3::from(v);
            let diff = (quat_to_rot(q) * v - rotate_by_quat(q, v)).norm();
            prop_assert!(diff < 1e-12);
        }

        #[test]
        fn rotation_round_trip(q in arb_quat()) {
            let r = quat_to_rot(q);
            let back = rot_to_quat(&r).unwrap();
            prop_assert!((quat_to_rot(back) - r).abs().max() < 1e-9);
            let canon = q.canonical();
            prop_assert!(back.l1_distance(canon) < 1e-9);
            prop_assert_eq!(rot_to_quat(&quat_to_rot(-q)).unwrap(), back);
        }

        #[test]
        fn sign_invariance_and_unit_determinant(q in arb_quat()) {
            prop_assert_eq!(quat_to_rot(q), quat_to_rot(-q));
            prop_assert!((quat_to_rot(q).determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn covariance_spectrum_matches_scales(q in arb_quat(), s in prop::array::uniform3(-3.0..1.0f64)) {
            let s = Vector3::from(s);
            let g = activate(&params(q, s, 0.0)).unwrap();
            let sym = (g.sigma - g.sigma.transpose()).abs().max();
            prop_assert!(sym <= 1e-12 * g.sigma.abs().max());
            let mut eig: Vec<f64> = SymmetricEigen::new(g.sigma).eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
            }
        }
    }
}
