//! Random Gaussian primitives with band-structured SH colors.
//!
//! Record `i` of a dataset is a pure function of `(seed, i)`.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{sample_params, FieldCloud, SamplingConfig};
use crate::primitives::{GaussianParams, Quat};
use crate::rng::CounterRng;
use crate::sh::{sample_band_coeffs, MAX_DEGREE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: u64,
    /// Active SH degree; bands above it are padded with `sigma_void` noise.
    pub active_degree: usize,
    pub l_max: usize,
    pub beta: f64,
    pub sigma_void: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub o_min: f64,
    pub o_max: f64,
    /// Angular grid size; clouds have `n²` points.
    pub n: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 500_000,
            active_degree: 3,
            l_max: 3,
            beta: 4.0,
            sigma_void: 0.05,
            s_min: -8.0,
            s_max: 0.0,
            o_min: -5.0,
            o_max: 10.0,
            n: 12,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.s_min < self.s_max) {
            return bad(format!("s_min {} must be below s_max {}", self.s_min, self.s_max));
        }
        if !(self.o_min < self.o_max) {
            return bad(format!("o_min {} must be below o_max {}", self.o_min, self.o_max));
        }
        if self.l_max > MAX_DEGREE {
            return Err(Error::UnsupportedDegree(self.l_max));
        }
        if self.active_degree > self.l_max {
            return bad(format!("active degree {} exceeds l_max {}", self.active_degree, self.l_max));
        }
        if !(self.beta > 1.0) {
            return bad(format!("beta must exceed 1, got {}", self.beta));
        }
        if !(self.sigma_void >= 0.0) {
            return bad(format!("sigma_void must be non-negative, got {}", self.sigma_void));
        }
        if self.n < 2 {
            return bad(format!("grid size must be at least 2, got {}", self.n));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig::with_n(self.n)
    }
}

/// Haar-uniform rotation from a normalized 4-d Gaussian, with canonical sign.
pub fn uniform_quat<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    loop {
        let q = Quat::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if q.norm() > 1e-6 {
            return q.normalized().expect("nonzero").canonical();
        }
    }
}

/// Draws one primitive from its own `(seed, index)` stream.
pub fn gen_primitive(cfg: &GenConfig, index: u64) -> Result<GaussianParams> {
    let mut rng = CounterRng::new(cfg.seed, index);
    let q = uniform_quat(&mut rng);
    let s = Vector3::from_fn(|_, _| rng.random_range(cfg.s_min..cfg.s_max));
    let c = sample_band_coeffs(&mut rng, cfg.active_degree, cfg.l_max, cfg.beta, cfg.sigma_void)?;
    let o = rng.random_range(cfg.o_min..cfg.o_max);
    GaussianParams::new(Vector3::zeros(), q, s, c, o)
}

/// Rounds every parameter to `f32`, the precision used on disk.
pub fn quantize_f32(params: &GaussianParams) -> Result<GaussianParams> {
    let v: Vec<f64> = params.to_vec().into_iter().map(|x| x as f32 as f64).collect();
    GaussianParams::from_slice(&v, params.c.l_max())
}

#[derive(Debug, Clone)]
pub struct GenRecord {
    pub index: u64,
    /// Already quantized to `f32`.
    pub params: GaussianParams,
    pub cloud: Option<FieldCloud>,
}

/// Record `index`: quantized parameters and, optionally, the cloud sampled
/// from them. Sampling from the quantized values lets a reader regenerate
/// stored clouds exactly.
pub fn gen_record(cfg: &GenConfig, index: u64, with_cloud: bool) -> Result<GenRecord> {
    let params = quantize_f32(&gen_primitive(cfg, index)?)?;
    let cloud = if with_cloud { Some(sample_params(&params, &cfg.sampling())?) } else { None };
    Ok(GenRecord { index, params, cloud })
}

/// Generates the dataset in parallel chunks and hands records to `sink` in
/// index order. Errors from the sink abort generation; the number of records
/// already delivered is returned alongside.
pub fn gen_dataset<E, F>(cfg: &GenConfig, with_cloud: bool, chunk: usize, mut sink: F) -> std::result::Result<u64, (u64, E)>
where
    E: From<Error>,
    F: FnMut(GenRecord) -> std::result::Result<(), E>,
{
    cfg.validate().map_err(|e| (0, e.into()))?;
    let chunk = chunk.max(1) as u64;
    let mut written = 0u64;
    let mut start = 0u64;
    while start < cfg.count {
        let end = (start + chunk).min(cfg.count);
        let batch: Vec<Result<GenRecord>> = (start..end).into_par_iter().map(|i| gen_record(cfg, i, with_cloud)).collect();
        for rec in batch {
            let rec = rec.map_err(|e| (written, e.into()))?;
            sink(rec).map_err(|e| (written, e))?;
            written += 1;
        }
        start = end;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::activate;
    use crate::sh::band_of;

    fn cfg(count: u64, seed: u64) -> GenConfig {
        GenConfig { count, seed, ..GenConfig::default() }
    }

    #[test]
    fn opacity_mean_and_zero_mean_position() {
        let c = cfg(100_000, 1);
        let os: Vec<f64> = (0..c.count).into_par_iter().map(|i| gen_primitive(&c, i).unwrap()).map(|p| {
            assert_eq!(p.mu, Vector3::zeros());
            p.o
        }).collect();
        let n = os.len() as f64;
        let mean = os.iter().sum::<f64>() / n;
        let var = os.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 2.5).abs() <= 3.0 * (var / n).sqrt(), "{mean}");
        assert!(os.iter().all(|o| (-5.0..10.0).contains(o)));
    }

    #[test]
    fn rotation_trace_matches_haar() {
        let c = cfg(100_000, 2);
        let traces: Vec<f64> = (0..c.count).into_par_iter().map(|i| gen_primitive(&c, i).unwrap().rotation().trace()).collect();
        let n = traces.len() as f64;
        let mean = traces.iter().sum::<f64>() / n;
        let var = traces.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Haar measure: E[tr R] = 0 and E[(tr R)²] = 1 (character orthogonality).
        assert!(mean.abs() <= 3.0 * (var / n).sqrt(), "{mean}");
        let second = traces.iter().map(|t| t * t).sum::<f64>() / n;
        let se = (traces.iter().map(|t| (t * t - second).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((second - 1.0).abs() <= 3.0 * se, "{second}");
    }

    #[test]
    fn band_two_spread_and_activation() {
        let c = cfg(20_000, 3);
        let params: Vec<GaussianParams> = (0..c.count).into_par_iter().map(|i| gen_primitive(&c, i).unwrap()).collect();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for p in &params {
            assert!(activate(p).is_ok());
            assert!(p.s.iter().all(|s| (-8.0..0.0).contains(s)));
            for ch in 0..3 {
                for k in (0..16).filter(|k| band_of(*k) == 2) {
                    sum_sq += p.c.get(ch, k).powi(2);
                    count += 1;
                }
            }
        }
        let std = (sum_sq / count as f64).sqrt();
        assert!((std / (1.0 / 16.0) - 1.0).abs() < 0.03, "{std}");
    }

    #[test]
    fn deterministic_per_index() {
        let c = cfg(10, 42);
        assert_eq!(gen_primitive(&c, 7).unwrap(), gen_primitive(&c, 7).unwrap());
        assert_ne!(gen_primitive(&c, 7).unwrap(), gen_primitive(&c, 8).unwrap());
        let other = cfg(10, 43);
        assert_ne!(gen_primitive(&c, 7).unwrap(), gen_primitive(&other, 7).unwrap());
    }

    #[test]
    fn stored_clouds_regenerate_bitwise() {
        let c = cfg(50, 5);
        let mut recs = Vec::new();
        let n = gen_dataset::<Error, _>(&c, true, 16, |r| {
            recs.push(r);
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 50);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.index, i as u64);
            let stored: Vec<f32> = r.params.to_vec().iter().map(|v| *v as f32).collect();
            let reread = GaussianParams::from_slice(&stored.iter().map(|v| *v as f64).collect::<Vec<_>>(), 3).unwrap();
            assert_eq!(reread, r.params);
            let again = sample_params(&reread, &c.sampling()).unwrap();
            let a: Vec<[f64; 7]> = again.rows();
            assert_eq!(a, r.cloud.as_ref().unwrap().rows());
        }
    }

    #[test]
    fn sink_failure_reports_partial_count() {
        let c = cfg(20, 6);
        let mut seen = 0;
        let err = gen_dataset::<Error, _>(&c, false, 4, |_| {
            seen += 1;
            if seen > 5 {
                Err(Error::InvalidInput("disk full".into()))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert_eq!(err.0, 5);
    }

    #[test]
    fn invalid_configs() {
        assert!(GenConfig { s_min: 0.0, s_max: 0.0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { o_min: 1.0, o_max: 0.0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { active_degree: 3, l_max: 2, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }
}
