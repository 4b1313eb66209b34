//! Discretized submanifold fields: colored samples of the iso-probability
//! ellipsoid of a primitive, and recovery of parameters from such a cloud.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{activate, logit, rot_to_quat, ActivatedGaussian, GaussianParams};
use crate::sh::{self, ShCoeffs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingScheme {
    /// `n x n` grid over `u in [0, 2π)`, `v in [0, π]`, poles included.
    #[default]
    Angular,
    /// `n²` points on a Fibonacci sphere (area-uniform).
    Fibonacci,
    /// Produced by a decoder; no underlying grid.
    Decoded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n: usize,
    pub radius: f64,
    pub scheme: SamplingScheme,
    /// Shift colors by `+0.5` and clip to `[0, 1]`.
    pub offset: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n: 12, radius: 1.0, scheme: SamplingScheme::Angular, offset: true }
    }
}

impl SamplingConfig {
    pub fn with_n(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn point_count(&self) -> usize {
        self.n * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub position: Vector3<f64>,
    pub rgb: [f64; 3],
    pub alpha: f64,
}

impl FieldPoint {
    pub fn to_row(&self) -> [f64; 7] {
        let p = self.position;
        [p.x, p.y, p.z, self.rgb[0], self.rgb[1], self.rgb[2], self.alpha]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self { position: Vector3::new(r[0], r[1], r[2]), rgb: [r[3], r[4], r[5]], alpha: r[6] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudMeta {
    pub sampling: SamplingConfig,
    /// Sphere-to-ellipsoid map the positions were generated with.
    pub transform: Option<Matrix3<f64>>,
}

/// `P` records of `(x, y, z, r, g, b, α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCloud {
    pub points: Vec<FieldPoint>,
    pub meta: CloudMeta,
}

impl FieldCloud {
    pub fn new(points: Vec<FieldPoint>, meta: CloudMeta) -> Self {
        Self { points, meta }
    }

    /// Cloud built from raw 7-wide rows, e.g. loaded from disk or decoded.
    pub fn from_rows(rows: &[[f64; 7]], sampling: SamplingConfig) -> Self {
        Self { points: rows.iter().map(|r| FieldPoint::from_row(r)).collect(), meta: CloudMeta { sampling, transform: None } }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rows(&self) -> Vec<[f64; 7]> {
        self.points.iter().map(FieldPoint::to_row).collect()
    }

    pub fn mean_alpha(&self) -> f64 {
        self.points.iter().map(|p| p.alpha).sum::<f64>() / self.points.len() as f64
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().map(|p| p.position).sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

/// Unit directions of the sampling scheme, `n²` of them.
pub fn sphere_directions(n: usize, scheme: SamplingScheme) -> Vec<Vector3<f64>> {
    match scheme {
        SamplingScheme::Angular | SamplingScheme::Decoded => {
            let mut out = Vec::with_capacity(n * n);
            for i in 0..n {
                let u = 2.0 * PI * i as f64 / n as f64;
                let (su, cu) = u.sin_cos();
                for j in 0..n {
                    let v = PI * j as f64 / (n - 1) as f64;
                    let (sv, cv) = v.sin_cos();
                    out.push(Vector3::new(sv * cu, sv * su, cv));
                }
            }
            out
        }
        SamplingScheme::Fibonacci => fibonacci_sphere(n * n),
    }
}

pub fn fibonacci_sphere(count: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (golden * k as f64).sin_cos();
            Vector3::new(rho * c, rho * s, z)
        })
        .collect()
}

/// Samples the `r`-level iso-probability ellipsoid of `g`.
///
/// The grid is laid out in the canonical frame of the covariance (see
/// [`canonical_axes`]), so equivalent parameterizations of one field give the
/// same points. Positions are `μ + r F diag(σ') d` over the sphere directions
/// `d`, colors are the SH field evaluated at the matching local direction,
/// and the opacity is replicated.
pub fn sample_field(g: &ActivatedGaussian, config: &SamplingConfig) -> Result<FieldCloud> {
    if config.n < 3 {
        return Err(Error::InvalidInput(format!("grid size must be at least 3, got {}", config.n)));
    }
    if !(config.radius > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {}", config.radius)));
    }
    if !g.is_spd() {
        return Err(Error::InvalidCovariance);
    }
    let axes = canonical_axes(&g.scales, &g.rotation);
    let mut transform = Matrix3::zeros();
    for (j, &(src, sign)) in axes.iter().enumerate() {
        transform.set_column(j, &(g.rotation.column(src) * (sign * g.scales[src])));
    }
    let mut basis = [0.0; 16];
    let k = g.c.len();
    let points = sphere_directions(config.n, config.scheme)
        .into_iter()
        .map(|d| {
            let mut local = Vector3::zeros();
            for (j, &(src, sign)) in axes.iter().enumerate() {
                local[src] = sign * d[j];
            }
            sh::eval_sh_basis_into(&local, g.c.l_max(), &mut basis);
            FieldPoint {
                position: g.mu + transform * d * config.radius,
                rgb: sh::color_from_basis(&g.c, &basis[..k], config.offset),
                alpha: g.alpha,
            }
        })
        .collect();
    Ok(FieldCloud { points, meta: CloudMeta { sampling: *config, transform: Some(transform) } })
}

/// Canonical orientation of an ellipsoid given its axis lengths and the
/// matching unit axes (columns of `axes`): axes sorted by descending length,
/// each signed so its largest-magnitude component is positive, and the last
/// one flipped if needed to make the frame right-handed. Entry `j` names the
/// source column and sign of canonical axis `j`. The result depends only on
/// the ellipsoid unless two lengths tie.
pub fn canonical_axes(lengths: &Vector3<f64>, axes: &Matrix3<f64>) -> [(usize, f64); 3] {
    let signed: Vec<(usize, f64, Vector3<f64>)> = (0..3)
        .map(|i| {
            let v: Vector3<f64> = axes.column(i).into();
            let pivot = v.iter().copied().fold(0.0f64, |best, c| if c.abs() > best.abs() { c } else { best });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            (i, sign, v * sign)
        })
        .collect();
    let mut order: Vec<&(usize, f64, Vector3<f64>)> = signed.iter().collect();
    order.sort_by(|a, b| {
        lengths[b.0].total_cmp(&lengths[a.0]).then_with(|| a.2.iter().zip(b.2.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut out = [(order[0].0, order[0].1), (order[1].0, order[1].1), (order[2].0, order[2].1)];
    if order[0].2.cross(&order[1].2).dot(&order[2].2) < 0.0 {
        out[2].1 = -out[2].1;
    }
    out
}

pub fn sample_params(params: &GaussianParams, config: &SamplingConfig) -> Result<FieldCloud> {
    sample_field(&activate(params)?, config)
}

pub fn sample_batch(params: &[GaussianParams], config: &SamplingConfig) -> Result<Vec<FieldCloud>> {
    params.par_iter().map(|p| sample_params(p, config)).collect()
}

/// Principal frame of a centered point set: eigenvectors of the second-moment
/// matrix in the orientation given by [`canonical_axes`].
fn principal_frame(centered: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
    let moment = centered.iter().map(|y| y * y.transpose()).sum::<Matrix3<f64>>() / centered.len() as f64;
    let eig = SymmetricEigen::new(moment);
    let top = eig.eigenvalues.max();
    if !(top > 0.0) || !(eig.eigenvalues.min() > top * 1e-20) {
        return Err(Error::DegenerateGeometry(format!("point cloud spans fewer than 3 dimensions (eigenvalues {:?})", eig.eigenvalues.as_slice())));
    }
    let axes = canonical_axes(&eig.eigenvalues, &eig.eigenvectors);
    let mut frame = Matrix3::zeros();
    for (j, &(src, sign)) in axes.iter().enumerate() {
        frame.set_column(j, &(eig.eigenvectors.column(src) * sign));
    }
    Ok(frame)
}

/// Ellipsoid through centered points by a least-squares algebraic fit
/// `yᵀ A y + bᵀ y = 1`, rescaled to `(y − δ)ᵀ Σ⁻¹ (y − δ) = r²`. When `A` is
/// positive definite this returns the center offset `δ`, the eigenframe of
/// `Σ⁻¹` (oriented by [`canonical_axes`]) and the axis lengths. Unlike the
/// centroid and second-moment frame it does not depend on how the samples
/// are spread over the surface.
fn fit_quadric(centered: &[Vector3<f64>], radius: f64) -> Option<(Vector3<f64>, Matrix3<f64>, Vector3<f64>)> {
    let mut a = DMatrix::<f64>::from_fn(centered.len(), 9, |k, j| {
        let y = &centered[k];
        match j {
            0 => y.x * y.x,
            1 => y.y * y.y,
            2 => y.z * y.z,
            3 => 2.0 * y.x * y.y,
            4 => 2.0 * y.x * y.z,
            5 => 2.0 * y.y * y.z,
            6 => y.x,
            7 => y.y,
            _ => y.z,
        }
    });
    let mut scale = [0.0; 9];
    for j in 0..9 {
        scale[j] = a.column(j).norm();
        if !(scale[j] > 0.0) || !scale[j].is_finite() {
            return None;
        }
        a.column_mut(j).unscale_mut(scale[j]);
    }
    let svd = a.svd(true, true);
    if !(svd.singular_values.min() > 1e-10 * svd.singular_values.max()) {
        return None;
    }
    let w = svd.solve(&DVector::<f64>::from_element(centered.len(), 1.0), 0.0).ok()?;
    let v: Vec<f64> = (0..9).map(|j| w[j] / scale[j]).collect();
    let quad = Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]);
    let lin = Vector3::new(v[6], v[7], v[8]);
    let delta = -0.5 * quad.try_inverse()? * lin;
    let kappa = radius * radius / (1.0 + delta.dot(&(quad * delta)));
    let eig = SymmetricEigen::new(quad * kappa);
    if !(kappa > 0.0) || !eig.eigenvalues.iter().all(|&l| l > 0.0 && l.is_finite()) {
        return None;
    }
    let lengths = eig.eigenvalues.map(|l| l.sqrt().recip());
    let axes = canonical_axes(&lengths, &eig.eigenvectors);
    let mut frame = Matrix3::zeros();
    let mut sigma = Vector3::zeros();
    for (j, &(src, sign)) in axes.iter().enumerate() {
        frame.set_column(j, &(eig.eigenvectors.column(src) * sign));
        sigma[j] = lengths[src];
    }
    Some((delta, frame, sigma))
}

/// Per-axis semi-axis lengths `σ` such that `Σ_j (y_j / σ_j)² = r²` in the
/// least-squares sense over axis-frame coordinates `y`.
fn fit_axis_lengths(local: &[Vector3<f64>], radius: f64) -> Result<Vector3<f64>> {
    let n = local.len();
    let mut a = DMatrix::<f64>::from_fn(n, 3, |k, j| local[k][j] * local[k][j]);
    let mut scale = [0.0; 3];
    for j in 0..3 {
        let norm = a.column(j).norm();
        if !(norm > 0.0) {
            return Err(Error::DegenerateGeometry(format!("no extent along principal axis {j}")));
        }
        scale[j] = norm;
        a.column_mut(j).unscale_mut(norm);
    }
    let b = DVector::<f64>::from_element(n, radius * radius);
    let w = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::DegenerateGeometry(format!("axis fit failed: {e}")))?;
    let mut sigma = Vector3::zeros();
    for j in 0..3 {
        let inv_sq = w[j] / scale[j];
        if !(inv_sq > 0.0) || !inv_sq.is_finite() {
            return Err(Error::DegenerateGeometry(format!("non-positive inverse square axis length {inv_sq} on axis {j}")));
        }
        sigma[j] = inv_sq.sqrt().recip();
    }
    Ok(sigma)
}

/// Recovers primitive parameters from a cloud.
///
/// Center, frame and axis lengths come from an algebraic ellipsoid fit
/// through the positions. When that fit is not a positive definite quadric
/// (noisy or degenerate clouds), the center is the centroid, the frame comes
/// from PCA of the centered positions, and the axis lengths are fit to the
/// iso-probability quadratic form in that frame. SH coefficients are fit over
/// ellipsoid-normalized directions and opacity is the logit of the mean
/// per-point alpha.
pub fn recover_params(cloud: &FieldCloud, l_max: usize, ridge: f64) -> Result<GaussianParams> {
    let k = sh::coeff_count(l_max)?;
    let unknowns = k.max(10);
    if cloud.len() < unknowns {
        return Err(Error::Underdetermined { points: cloud.len(), unknowns });
    }
    let centroid = cloud.centroid();
    let mut centered: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p.position - centroid).collect();
    let radius = cloud.meta.sampling.radius;
    let (mu, frame, sigma) = match fit_quadric(&centered, radius) {
        Some((delta, frame, sigma)) => {
            centered.iter_mut().for_each(|y| *y -= delta);
            (centroid + delta, frame, sigma)
        }
        None => {
            let frame = principal_frame(&centered)?;
            let local: Vec<Vector3<f64>> = centered.iter().map(|y| frame.transpose() * y).collect();
            (centroid, frame, fit_axis_lengths(&local, radius)?)
        }
    };
    let local: Vec<Vector3<f64>> = centered.iter().map(|y| frame.transpose() * y).collect();

    let dirs = local
        .iter()
        .map(|y| {
            let d = y.component_div(&sigma);
            let n = d.norm();
            if n > 0.0 {
                Ok(d / n)
            } else {
                Err(Error::DegenerateGeometry("sample coincides with the center".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let colors: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.rgb).collect();
    let c: ShCoeffs = if cloud.meta.sampling.offset {
        sh::fit_sh_censored(&dirs, &colors, l_max, ridge)?
    } else {
        sh::fit_sh(&dirs, &colors, l_max, ridge, false)?
    };

    let alpha = cloud.mean_alpha().clamp(1e-6, 1.0 - 1e-6);
    GaussianParams::new(mu, rot_to_quat(&frame)?, sigma.map(f64::ln), c, logit(alpha))
}

pub fn recover_batch(clouds: &[FieldCloud], l_max: usize, ridge: f64) -> Vec<Result<GaussianParams>> {
    clouds.par_iter().map(|c| recover_params(c, l_max, ridge)).collect()
}
