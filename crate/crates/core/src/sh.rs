//! Real spherical harmonics up to degree 3.
//!
//! Basis ordering and constants follow the 3DGS rasterizer: band `l = 0..=3`,
//! and within a band `m = -l..=l`. The constants carry the Condon-Shortley
//! phase, which is why the band-1 terms read `-y, z, -x`.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen, Vector3, QR};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_DEGREE: usize = 3;

/// Offset applied to raw SH output before clipping to `[0, 1]`.
pub const COLOR_OFFSET: f64 = 0.5;

pub const DEFAULT_RIDGE: f64 = 1e-8;

pub fn coeff_count(l_max: usize) -> Result<usize> {
    if l_max > MAX_DEGREE {
        return Err(Error::UnsupportedDegree(l_max));
    }
    Ok((l_max + 1) * (l_max + 1))
}

/// Degree `l` of the coefficient at flat index `k`.
pub fn band_of(k: usize) -> usize {
    (k as f64).sqrt() as usize
}

/// Order `m` of the coefficient at flat index `k`.
pub fn order_of(k: usize) -> isize {
    let l = band_of(k);
    k as isize - (l * l + l) as isize
}

/// Per-channel SH coefficients, `3 x K`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoeffs {
    l_max: usize,
    channels: [Vec<f64>; 3],
}

impl ShCoeffs {
    pub fn zeros(l_max: usize) -> Self {
        let k = coeff_count(l_max).expect("degree <= 3");
        Self { l_max, channels: [vec![0.0; k], vec![0.0; k], vec![0.0; k]] }
    }

    pub fn from_channels(l_max: usize, channels: [&[f64]; 3]) -> Result<Self> {
        let k = coeff_count(l_max)?;
        for ch in channels {
            if ch.len() != k {
                return Err(Error::Shape { expected: k, actual: ch.len() });
            }
        }
        Ok(Self { l_max, channels: channels.map(<[f64]>::to_vec) })
    }

    /// Coefficients with only the band-0 term set per channel.
    pub fn dc(l_max: usize, dc: [f64; 3]) -> Self {
        let mut c = Self::zeros(l_max);
        for (ch, v) in dc.into_iter().enumerate() {
            c.channels[ch][0] = v;
        }
        c
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Coefficients per channel, `K`.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.channels[ch]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        &mut self.channels[ch]
    }

    pub fn get(&self, ch: usize, k: usize) -> f64 {
        self.channels[ch][k]
    }

    pub fn set(&mut self, ch: usize, k: usize, v: f64) {
        self.channels[ch][k] = v;
    }

    pub fn max_abs_diff(&self, other: &ShCoeffs) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Pads or truncates to another degree; new entries are zero.
    pub fn resized(&self, l_max: usize) -> Result<Self> {
        let k = coeff_count(l_max)?;
        let mut out = Self::zeros(l_max);
        for ch in 0..3 {
            let n = k.min(self.len());
            out.channels[ch][..n].copy_from_slice(&self.channels[ch][..n]);
        }
        Ok(out)
    }
}

/// Evaluates `[Y_0^0(d), Y_1^-1(d), ..., Y_L^L(d)]` into `out`.
pub fn eval_sh_basis_into(d: &Vector3<f64>, l_max: usize, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = SH_C0;
    if l_max < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if l_max < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if l_max < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

pub fn eval_sh_basis(d: &Vector3<f64>, l_max: usize) -> Result<Vec<f64>> {
    let k = coeff_count(l_max)?;
    check_unit(d)?;
    let mut out = vec![0.0; k];
    eval_sh_basis_into(d, l_max, &mut out);
    Ok(out)
}

fn check_unit(d: &Vector3<f64>) -> Result<()> {
    let n = d.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("direction has norm {n}, expected unit")));
    }
    Ok(())
}

fn apply_offset(raw: f64) -> f64 {
    (raw + COLOR_OFFSET).clamp(0.0, 1.0)
}

/// RGB color of `coeffs` seen from direction `d`. With `offset` the raw SH
/// value is shifted by `+0.5` and clipped to `[0, 1]`.
pub fn eval_color(coeffs: &ShCoeffs, d: &Vector3<f64>, offset: bool) -> [f64; 3] {
    let mut basis = [0.0; 16];
    eval_sh_basis_into(d, coeffs.l_max, &mut basis);
    color_from_basis(coeffs, &basis[..coeffs.len()], offset)
}

pub(crate) fn color_from_basis(coeffs: &ShCoeffs, basis: &[f64], offset: bool) -> [f64; 3] {
    std::array::from_fn(|ch| {
        let raw: f64 = coeffs.channels[ch].iter().zip(basis).map(|(c, b)| c * b).sum();
        if offset {
            apply_offset(raw)
        } else {
            raw
        }
    })
}

/// Action of a half turn about the local z axis on the coefficients:
/// `(l, m)` is multiplied by `(-1)^|m|`.
pub fn zflip_transform(coeffs: &ShCoeffs) -> ShCoeffs {
    let mut out = coeffs.clone();
    for ch in &mut out.channels {
        for (k, v) in ch.iter_mut().enumerate() {
            if order_of(k).unsigned_abs() % 2 == 1 {
                *v = -*v;
            }
        }
    }
    out
}

/// Draws band-structured coefficients: band `l <= active` has per-entry std
/// `beta^-l`, bands above `active` are padded with std `sigma_void`.
pub fn sample_band_coeffs<R: Rng + ?Sized>(
    rng: &mut R,
    active: usize,
    l_max: usize,
    beta: f64,
    sigma_void: f64,
) -> Result<ShCoeffs> {
    let k = coeff_count(l_max)?;
    if active > l_max {
        return Err(Error::InvalidParameter(format!("active degree {active} exceeds l_max {l_max}")));
    }
    if !(beta > 1.0) {
        return Err(Error::InvalidParameter(format!("band decay beta must exceed 1, got {beta}")));
    }
    let mut out = ShCoeffs::zeros(l_max);
    for ch in 0..3 {
        for idx in 0..k {
            let l = band_of(idx);
            let std = if l <= active { beta.powi(-(l as i32)) } else { sigma_void };
            let eps: f64 = rng.sample(StandardNormal);
            out.channels[ch][idx] = std * eps;
        }
    }
    Ok(out)
}

/// Least-squares SH fit with ridge regularization, solved per channel through
/// the Cholesky factor of the normal equations. With `offset` the `+0.5`
/// color convention is removed before fitting.
pub fn fit_sh(dirs: &[Vector3<f64>], colors: &[[f64; 3]], l_max: usize, ridge: f64, offset: bool) -> Result<ShCoeffs> {
    let design = Design::new(dirs, colors, l_max)?;
    let mut out = ShCoeffs::zeros(l_max);
    let rows: Vec<usize> = (0..dirs.len()).collect();
    for ch in 0..3 {
        let targets: Vec<f64> = colors.iter().map(|c| if offset { c[ch] - COLOR_OFFSET } else { c[ch] }).collect();
        out.channels[ch] = design.solve(&rows, &targets, ridge)?;
    }
    Ok(out)
}

/// Re-solves of the censored fit with the ridge centered on the previous
/// solution.
const CENSORED_REFINEMENTS: usize = 8;

/// SH fit for colors produced with offset and clipping on.
///
/// Samples sitting exactly on 0 or 1 are censored: the fit minimizes the
/// ridge-regularized squared error over the unclipped samples subject to
/// every clipped sample predicting at or beyond its bound. The inequality
/// constrained problem is reduced to least distance form and solved with
/// nonnegative least squares. Unclipped data reduces to [`fit_sh`].
pub fn fit_sh_censored(dirs: &[Vector3<f64>], colors: &[[f64; 3]], l_max: usize, ridge: f64) -> Result<ShCoeffs> {
    let design = Design::new(dirs, colors, l_max)?;
    let k = design.k;
    let mut out = ShCoeffs::zeros(l_max);
    for ch in 0..3 {
        let values: Vec<f64> = colors.iter().map(|c| c[ch]).collect();
        let side = |v: f64| if v >= 1.0 { 1.0 } else if v <= 0.0 { -1.0 } else { 0.0 };
        let free: Vec<usize> = (0..values.len()).filter(|&i| side(values[i]) == 0.0).collect();
        let targets: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0) - COLOR_OFFSET).collect();
        if free.len() == values.len() {
            out.channels[ch] = design.solve(&free, &targets, ridge)?;
            continue;
        }
        if !(ridge > 0.0) {
            return Err(Error::InvalidParameter(format!("censored fit needs a positive ridge, got {ridge}")));
        }
        let mut e = DMatrix::<f64>::zeros(free.len() + k, k);
        let mut f = DVector::<f64>::zeros(free.len() + k);
        for (r, &i) in free.iter().enumerate() {
            e.row_mut(r).copy_from_slice(design.row(i));
            f[r] = targets[i];
        }
        for c in 0..k {
            e[(free.len() + c, c)] = ridge.sqrt();
        }
        let clipped: Vec<usize> = (0..values.len()).filter(|&i| side(values[i]) != 0.0).collect();
        let mut g = DMatrix::<f64>::zeros(clipped.len(), k);
        let mut h = DVector::<f64>::zeros(clipped.len());
        for (r, &i) in clipped.iter().enumerate() {
            let dir = side(values[i]);
            for (c, v) in design.row(i).iter().enumerate() {
                g[(r, c)] = dir * v;
            }
            h[r] = dir * targets[i];
        }
        // Iterated Tikhonov: re-centering the ridge on the previous solution
        // removes its shrinkage on weakly determined directions.
        let qr = e.qr();
        let mut x = DVector::<f64>::zeros(k);
        for _ in 0..CENSORED_REFINEMENTS {
            f.rows_mut(free.len(), k).copy_from(&(&x * ridge.sqrt()));
            x = constrained_least_squares(&qr, &f, &g, &h)?;
        }
        out.channels[ch] = x.iter().copied().collect();
    }
    Ok(out)
}

/// `argmin ‖E x − f‖` subject to `G x ≥ h` for `E = QR` of full column rank,
/// through the least distance reduction `z = R x − Qᵀ f`.
fn constrained_least_squares(qr: &QR<f64, Dyn, Dyn>, f: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    let (q, r) = (qr.q(), qr.r());
    let k = r.ncols();
    let f1 = q.transpose() * f;
    let r_inv = r.try_inverse().ok_or_else(|| Error::IllConditioned { condition: f64::INFINITY })?;
    let gh = g * &r_inv;
    let hh = h - &gh * &f1;
    // Least distance: min ‖z‖ with Ĝ z ≥ ĥ, via NNLS on [Ĝᵀ; ĥᵀ] u ≈ e_{k+1}.
    let m = gh.nrows();
    let mut a = DMatrix::<f64>::zeros(k + 1, m);
    a.view_mut((0, 0), (k, m)).copy_from(&gh.transpose());
    a.row_mut(k).copy_from(&hh.transpose());
    let mut b = DVector::<f64>::zeros(k + 1);
    b[k] = 1.0;
    let u = nnls(&a, &b);
    let res = &a * &u - &b;
    if !(res[k].abs() > 1e-14) {
        return Err(Error::InvalidInput("censored SH fit: constraints are infeasible".into()));
    }
    let z = DVector::from_iterator(k, (0..k).map(|j| -res[j] / res[k]));
    Ok(r_inv * (z + f1))
}

/// Lawson-Hanson nonnegative least squares.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let tol = 10.0 * f64::EPSILON * a.norm() * a.nrows().max(n) as f64;
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let solve = |set: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| set[j]).collect();
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
        let sol = sub.svd(true, true).solve(b, 0.0).expect("SVD with both factors");
        let mut full = DVector::zeros(n);
        for (c, &j) in idx.iter().enumerate() {
            full[j] = sol[c];
        }
        full
    };
    for _ in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &x);
        let Some(t) = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j])) else { break };
        passive[t] = true;
        loop {
            if !passive.iter().any(|&p| p) {
                x.fill(0.0);
                break;
            }
            let s = solve(&passive);
            if (0..n).all(|j| !passive[j] || s[j] > 0.0) {
                x = s;
                break;
            }
            let (block, alpha) = (0..n)
                .filter(|&j| passive[j] && s[j] <= 0.0)
                .map(|j| (j, x[j] / (x[j] - s[j])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("some passive entry is non-positive");
            x += (s - &x) * alpha;
            x[block] = 0.0;
            for j in 0..n {
                if passive[j] && x[j] <= 0.0 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}

struct Design {
    k: usize,
    basis: Vec<f64>,
}

impl Design {
    fn new(dirs: &[Vector3<f64>], colors: &[[f64; 3]], l_max: usize) -> Result<Self> {
        let k = coeff_count(l_max)?;
        if dirs.len() != colors.len() {
            return Err(Error::Shape { expected: dirs.len(), actual: colors.len() });
        }
        if dirs.len() < k {
            return Err(Error::Underdetermined { points: dirs.len(), unknowns: k });
        }
        let mut basis = vec![0.0; dirs.len() * k];
        for (d, row) in dirs.iter().zip(basis.chunks_exact_mut(k)) {
            check_unit(d)?;
            eval_sh_basis_into(d, l_max, row);
        }
        Ok(Self { k, basis })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.k..(i + 1) * self.k]
    }

    fn solve(&self, rows: &[usize], targets: &[f64], ridge: f64) -> Result<Vec<f64>> {
        let k = self.k;
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for &i in rows {
            let row = self.row(i);
            for a in 0..k {
                rhs[a] += row[a] * targets[i];
                for b in 0..=a {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
            gram[(a, a)] += ridge;
        }
        let condition = condition_estimate(&gram);
        if !(condition < 1e12) {
            return Err(Error::IllConditioned { condition });
        }
        let chol = gram.cholesky().ok_or(Error::IllConditioned { condition })?;
        Ok(chol.solve(&rhs).iter().copied().collect())
    }
}

fn condition_estimate(gram: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
