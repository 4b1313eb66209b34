//! Reconstruction metrics, latent interpolation and latent-noise robustness.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfgs_core::manifold::{FieldCloud, SamplingConfig};
use sfgs_core::mdist::{cloud_mdist, mdist, GroundMetricConfig};
use sfgs_core::primitives::GaussianParams;
use sfgs_core::rng::CounterRng;

use crate::error::{Result, VaeError};
use crate::latent::standard_normal;
use crate::model::{Reconstruction, TrainItem, VaeModel};

const PERTURB_PURPOSE: u64 = 0x9e27;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub std_err: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std = var.sqrt();
        Self {
            count: n,
            mean,
            median: sfgs_core::mdist::median(values.iter().copied()),
            std,
            std_err: std / (n as f64).sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    /// Input cloud versus reconstructed cloud.
    pub mdist: f64,
    pub mdist_sq: f64,
    /// Original primitive versus recovered parameters, both sampled on the
    /// evaluation grid; `None` when recovery failed.
    pub recover_mdist: Option<f64>,
    pub param_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub metric: GroundMetricConfig,
    pub sampling: SamplingConfig,
    pub mdist: Stats,
    pub mdist_sq: Stats,
    pub recover_mdist: Stats,
    pub param_l1: Stats,
    pub recover_failures: usize,
    pub samples: Vec<SampleEval>,
}

/// Posterior means for all items, encoded in fixed-size chunks.
pub fn encode_means(model: &VaeModel, items: &[TrainItem]) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        out.extend(model.encode_batch(&refs)?.into_iter().map(|c| c.mean));
    }
    Ok(out)
}

fn stack(latents: &[Array1<f64>], d: usize) -> Array2<f64> {
    let mut z = Array2::zeros((latents.len(), d));
    for (mut row, l) in z.rows_mut().into_iter().zip(latents) {
        row.assign(l);
    }
    z
}

pub fn decode_all(model: &VaeModel, latents: &[Array1<f64>]) -> Result<Vec<Reconstruction>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(ENCODE_CHUNK) {
        out.extend(model.decode_batch(&stack(chunk, model.latent_dim()))?);
    }
    Ok(out)
}

/// M-Dist between each input cloud and the reconstruction of its latent.
pub fn reconstruction_mdists(
    model: &VaeModel,
    items: &[TrainItem],
    latents: &[Array1<f64>],
    sampling: &SamplingConfig,
    metric: &GroundMetricConfig,
) -> Result<Vec<f64>> {
    let recs = decode_all(model, latents)?;
    items
        .par_iter()
        .zip(&recs)
        .map(|(it, rec)| {
            let cloud: FieldCloud = model.reconstruction_cloud(rec, sampling)?;
            Ok(cloud_mdist(&it.cloud, &cloud, metric)?.distance)
        })
        .collect()
}

/// Encodes with the posterior mean, decodes, and scores every item.
pub fn evaluate(model: &VaeModel, items: &[TrainItem], sampling: &SamplingConfig, metric: &GroundMetricConfig, with_recovery: bool) -> Result<EvalReport> {
    let latents = encode_means(model, items)?;
    let recs = decode_all(model, &latents)?;
    let samples: Vec<SampleEval> = items
        .par_iter()
        .zip(&recs)
        .map(|(it, rec)| -> Result<SampleEval> {
            let cloud = model.reconstruction_cloud(rec, sampling)?;
            let m = cloud_mdist(&it.cloud, &cloud, metric)?;
            let (recover_mdist, param_l1) = if with_recovery {
                match model.reconstruction_params(rec) {
                    Ok(p) => {
                        let d = mdist(&it.params, &p, sampling, metric).ok().map(|v| v.distance);
                        (d, Some(it.params.l1_distance(&p)))
                    }
                    Err(_) => (None, None),
                }
            } else {
                (None, None)
            };
            Ok(SampleEval { mdist: m.distance, mdist_sq: m.distance_sq, recover_mdist, param_l1 })
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&SampleEval) -> Option<f64>| Stats::from_values(&samples.iter().filter_map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        model: model.kind().name().to_string(),
        metric: *metric,
        sampling: *sampling,
        mdist: pick(|s| Some(s.mdist)),
        mdist_sq: pick(|s| Some(s.mdist_sq)),
        recover_mdist: pick(|s| s.recover_mdist),
        param_l1: pick(|s| s.param_l1),
        recover_failures: if with_recovery { samples.iter().filter(|s| s.recover_mdist.is_none()).count() } else { 0 },
        samples,
    })
}

/// `steps` evenly spaced convex combinations from `za` to `zb`, endpoints
/// included exactly.
pub fn interpolate_latents(za: &Array1<f64>, zb: &Array1<f64>, steps: usize) -> Result<Vec<Array1<f64>>> {
    if steps < 2 {
        return Err(VaeError::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if za.len() != zb.len() {
        return Err(VaeError::Shape { expected: za.len().to_string(), actual: zb.len().to_string() });
    }
    Ok((0..steps)
        .map(|k| {
            let t = k as f64 / (steps - 1) as f64;
            za * (1.0 - t) + zb * t
        })
        .collect())
}

#[derive(Debug)]
pub struct InterpolationStep {
    pub t: f64,
    pub z: Array1<f64>,
    pub reconstruction: Reconstruction,
    pub params: Result<GaussianParams>,
}

/// Decodes and recovers each interpolated latent.
pub fn interpolate(model: &VaeModel, za: &Array1<f64>, zb: &Array1<f64>, steps: usize) -> Result<Vec<InterpolationStep>> {
    let zs = interpolate_latents(za, zb, steps)?;
    let recs = decode_all(model, &zs)?;
    Ok(zs
        .into_iter()
        .zip(recs)
        .enumerate()
        .map(|(k, (z, reconstruction))| {
            let params = model.reconstruction_params(&reconstruction);
            InterpolationStep { t: k as f64 / (steps - 1) as f64, z, reconstruction, params }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub sigma: f64,
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
    pub trials: usize,
}

/// Adds `σ·ε` to each posterior mean and reports the M-Dist between input
/// and reconstruction, averaged over trials. The same `ε` draws are reused
/// at every level. Rows come back sorted by `σ`.
pub fn perturb_eval(
    model: &VaeModel,
    items: &[TrainItem],
    levels: &[f64],
    trials: usize,
    seed: u64,
    sampling: &SamplingConfig,
    metric: &GroundMetricConfig,
) -> Result<Vec<PerturbRow>> {
    if levels.iter().any(|s| !(*s >= 0.0)) {
        return Err(VaeError::Config("noise levels must be non-negative".into()));
    }
    let trials = trials.max(1);
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    let d = model.latent_dim();
    let means = encode_means(model, items)?;
    let noise: Vec<Vec<Array1<f64>>> = (0..items.len())
        .map(|i| {
            let mut rng = CounterRng::derived(seed, i as u64, PERTURB_PURPOSE);
            (0..trials).map(|_| standard_normal(&mut rng, d)).collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(levels.len());
    for sigma in levels {
        let effective = if sigma == 0.0 { 1 } else { trials };
        let mut per_item = vec![0.0; items.len()];
        for t in 0..effective {
            let zs: Vec<Array1<f64>> = means.iter().zip(&noise).map(|(m, e)| m + &(&e[t] * sigma)).collect();
            let dists = reconstruction_mdists(model, items, &zs, sampling, metric)?;
            for (acc, v) in per_item.iter_mut().zip(dists) {
                *acc += v / effective as f64;
            }
        }
        let s = Stats::from_values(&per_item);
        rows.push(PerturbRow { sigma, mean: s.mean, std_err: s.std_err, count: s.count, trials: effective });
    }
    Ok(rows)
}
