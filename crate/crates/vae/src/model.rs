//! Encoder/decoder assemblies for the submanifold-field VAE and the two
//! parameter-space baselines.
//!
//! * `sf`: PointNet encoder over the field cloud, implicit field decoder.
//! * `param-mlp`: MLP encoder over the parameter vector, MLP decoder back to it.
//! * `param-sfdec`: MLP encoder over the parameter vector, implicit field decoder.
//!
//! The parameter vector is `[q | s | c (channel-major) | o]`, 56 values at
//! degree 3. Centers are omitted because generated primitives sit at the
//! origin.

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfgs_core::manifold::{fibonacci_sphere, recover_params, sample_params, FieldCloud, SamplingConfig};
use sfgs_core::primitives::{GaussianParams, Quat};
use sfgs_core::rng::CounterRng;
use sfgs_core::sh::{coeff_count, DEFAULT_RIDGE, MAX_DEGREE};

use crate::error::{Result, VaeError};
use crate::latent::{kl_divergence, reparameterize, LatentCode};
use crate::nn::{sigmoid, Activation, Linear, Mlp, MlpCache};
use crate::recon::{transport_loss, Decoded, ReconConfig};

pub const POINT_FEATURES: usize = 7;

pub fn param_dim(l_max: usize) -> Result<usize> {
    Ok(4 + 3 + 3 * coeff_count(l_max)? + 1)
}

/// `[q | s | c | o]`.
pub fn param_vector(p: &GaussianParams) -> Array1<f64> {
    Array1::from(p.to_vec()[3..].to_vec())
}

/// Inverse of [`param_vector`] with `μ = 0`. The quaternion is normalized
/// by [`GaussianParams::new`]; a vanishing one decodes to the identity.
pub fn params_from_vector(v: &ArrayView1<f64>, l_max: usize) -> Result<GaussianParams> {
    let expected = param_dim(l_max)?;
    if v.len() != expected {
        return Err(VaeError::Shape { expected: expected.to_string(), actual: v.len().to_string() });
    }
    let mut full = vec![0.0; 3];
    full.extend(v.iter());
    if Quat::new(v[0], v[1], v[2], v[3]).norm() <= 1e-12 {
        full[3..7].copy_from_slice(&Quat::IDENTITY.to_array());
    }
    Ok(GaussianParams::from_slice(&full, l_max)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sf")]
    Sf,
    #[serde(rename = "param-mlp")]
    ParamMlp,
    #[serde(rename = "param-sfdec")]
    ParamSfDec,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sf => "sf",
            ModelKind::ParamMlp => "param-mlp",
            ModelKind::ParamSfDec => "param-sfdec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ModelKind::Sf, ModelKind::ParamMlp, ModelKind::ParamSfDec].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    /// Input cloud size `P`; also the canonical set size `P'`.
    pub points: usize,
    pub l_max: usize,
    /// Iso-probability radius of the clouds the model reads and writes.
    pub radius: f64,
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub param_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Sf,
            latent_dim: 32,
            points: 36,
            l_max: MAX_DEGREE,
            radius: 1.0,
            point_widths: vec![64, 128, 256],
            head_widths: vec![128],
            param_widths: vec![512, 512],
            decoder_widths: vec![128, 128],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VaeError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.points == 0 {
            return bad("points must be positive");
        }
        if self.l_max > MAX_DEGREE {
            return bad("l_max above 3 is unsupported");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        let widths = [&self.point_widths, &self.head_widths, &self.param_widths, &self.decoder_widths];
        if widths.iter().any(|w| w.contains(&0)) {
            return bad("layer widths must be positive");
        }
        if self.point_widths.is_empty() {
            return bad("point encoder needs at least one layer");
        }
        Ok(())
    }
}

/// Shared per-point MLP, channel-wise max pool, MLP head to `(mean, logvar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub points: Mlp,
    pub head: Mlp,
}

struct PointEncoderCache {
    points: MlpCache,
    head: MlpCache,
    /// Winning row per `(cloud, channel)`.
    argmax: Array2<usize>,
}

impl PointEncoder {
    fn forward(&self, x: Array2<f64>, batch: usize) -> (Array2<f64>, PointEncoderCache) {
        let per = x.nrows() / batch;
        let points = self.points.forward(x);
        let h = points.output();
        let f = h.ncols();
        let mut pooled = Array2::zeros((batch, f));
        let mut argmax = Array2::zeros((batch, f));
        for b in 0..batch {
            for k in 0..f {
                let mut best = b * per;
                for r in b * per + 1..(b + 1) * per {
                    if h[(r, k)] > h[(best, k)] {
                        best = r;
                    }
                }
                pooled[(b, k)] = h[(best, k)];
                argmax[(b, k)] = best;
            }
        }
        let head = self.head.forward(pooled);
        let out = head.output().clone();
        (out, PointEncoderCache { points, head, argmax })
    }

    fn backward(&self, cache: &PointEncoderCache, d_out: Array2<f64>, grads: &mut Vec<Array2<f64>>) {
        let mut head_grads = Vec::new();
        let d_pooled = self.head.backward(&cache.head, d_out, true, &mut head_grads).expect("requested");
        let h = cache.points.output();
        let mut d_h = Array2::zeros(h.raw_dim());
        for ((b, k), &r) in cache.argmax.indexed_iter() {
            d_h[(r, k)] += d_pooled[(b, k)];
        }
        self.points.backward(&cache.points, d_h, false, grads);
        grads.extend(head_grads);
    }
}

/// MLP over standardized parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEncoder {
    pub mlp: Mlp,
    /// `1 × d` input shift and scale, fixed before training.
    pub shift: Array2<f64>,
    pub scale: Array2<f64>,
}

impl ParamEncoder {
    fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.shift) / &self.scale
    }
}

/// Implicit decoder: positions `g_c([e, z])`, colors `sigmoid(g_f([x̂, z]))`
/// over a fixed canonical set, and a global opacity `sigmoid(w·z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SfDecoder {
    pub gc: Mlp,
    pub gf: Mlp,
    pub alpha: Linear,
    /// `P' × 3` unit vectors.
    pub canonical: Array2<f64>,
}

struct SfDecoderCache {
    gc: MlpCache,
    gf: MlpCache,
    z: Array2<f64>,
    alpha: Array1<f64>,
}

fn with_latent(rows: &Array2<f64>, z: &Array2<f64>, per: usize) -> Array2<f64> {
    let (n, c) = rows.dim();
    let d = z.ncols();
    let mut out = Array2::zeros((n, c + d));
    out.slice_mut(s![.., ..c]).assign(rows);
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        row.slice_mut(s![c..]).assign(&z.row(r / per));
    }
    out
}

fn sum_latent_rows(d_in: &Array2<f64>, skip: usize, batch: usize, per: usize) -> Array2<f64> {
    let d = d_in.ncols() - skip;
    let mut out = Array2::zeros((batch, d));
    for b in 0..batch {
        out.row_mut(b).assign(&d_in.slice(s![b * per..(b + 1) * per, skip..]).sum_axis(Axis(0)));
    }
    out
}

impl SfDecoder {
    pub fn points(&self) -> usize {
        self.canonical.nrows()
    }

    fn forward(&self, z: &Array2<f64>) -> (Vec<Decoded>, SfDecoderCache) {
        let batch = z.nrows();
        let per = self.points();
        let mut tiled = Array2::zeros((batch * per, 3));
        for b in 0..batch {
            tiled.slice_mut(s![b * per..(b + 1) * per, ..]).assign(&self.canonical);
        }
        let gc = self.gc.forward(with_latent(&tiled, z, per));
        let gf = self.gf.forward(with_latent(gc.output(), z, per));
        let logits = self.alpha.forward(&z.view());
        let alpha = logits.column(0).mapv(sigmoid);
        let decoded = (0..batch)
            .map(|b| Decoded {
                positions: gc.output().slice(s![b * per..(b + 1) * per, ..]).to_owned(),
                colors: gf.output().slice(s![b * per..(b + 1) * per, ..]).to_owned(),
                alpha: alpha[b],
            })
            .collect();
        (decoded, SfDecoderCache { gc, gf, z: z.clone(), alpha })
    }

    fn backward(&self, cache: &SfDecoderCache, d_pos: Array2<f64>, d_col: Array2<f64>, d_alpha: &Array1<f64>, grads: &mut Vec<Array2<f64>>) -> Array2<f64> {
        let batch = cache.z.nrows();
        let per = self.points();
        let mut gf_grads = Vec::new();
        let d_gf_in = self.gf.backward(&cache.gf, d_col, true, &mut gf_grads).expect("requested");
        let mut dz = sum_latent_rows(&d_gf_in, 3, batch, per);
        let d_xhat = d_pos + &d_gf_in.slice(s![.., ..3]);
        let d_gc_in = self.gc.backward(&cache.gc, d_xhat, true, grads).expect("requested");
        dz += &sum_latent_rows(&d_gc_in, 3, batch, per);
        grads.extend(gf_grads);

        let d_logit = Array2::from_shape_fn((batch, 1), |(b, _)| d_alpha[b] * cache.alpha[b] * (1.0 - cache.alpha[b]));
        let (dz_alpha, dw, db) = self.alpha.backward(&cache.z.view(), &d_logit, true);
        dz += &dz_alpha.expect("requested");
        grads.push(dw);
        grads.push(db);
        dz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Points(PointEncoder),
    Params(ParamEncoder),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Field(SfDecoder),
    Params(Mlp),
}

/// Decoder output for one latent.
#[derive(Debug, Clone, PartialEq)]
pub enum Reconstruction {
    Field(Decoded),
    Params(Array1<f64>),
}

/// A training or evaluation sample: parameters, their cloud, and the flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub params: GaussianParams,
    pub cloud: FieldCloud,
    pub vector: Array1<f64>,
}

impl TrainItem {
    pub fn new(params: GaussianParams, sampling: &SamplingConfig) -> Result<Self> {
        let cloud = sample_params(&params, sampling)?;
        Ok(Self::from_parts(params, cloud))
    }

    pub fn from_parts(params: GaussianParams, cloud: FieldCloud) -> Self {
        let vector = param_vector(&params);
        Self { params, cloud, vector }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.recon.is_finite() && self.kl.is_finite()
    }
}

struct ForwardState {
    stats: Array2<f64>,
    eps: Array2<f64>,
    encoder: EncoderCache,
    decoder: DecoderCache,
    outputs: Vec<Reconstruction>,
}

enum EncoderCache {
    Points(PointEncoderCache),
    Params(MlpCache),
}

enum DecoderCache {
    Field(SfDecoderCache),
    Params(MlpCache),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

const INIT_PURPOSE: u64 = 0x1417;

impl VaeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::derived(config.seed, 0, INIT_PURPOSE);
        let d = config.latent_dim;
        let pdim = param_dim(config.l_max)?;
        let widths = |input: usize, hidden: &[usize], output: usize| -> Vec<usize> {
            std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
        };
        let encoder = match config.kind {
            ModelKind::Sf => {
                let mut pw = vec![POINT_FEATURES];
                pw.extend(&config.point_widths);
                let points = Mlp::new(&pw, Activation::Relu, &mut rng);
                let head = Mlp::new(&widths(*pw.last().expect("non-empty"), &config.head_widths, 2 * d), Activation::Identity, &mut rng);
                Encoder::Points(PointEncoder { points, head })
            }
            ModelKind::ParamMlp | ModelKind::ParamSfDec => Encoder::Params(ParamEncoder {
                mlp: Mlp::new(&widths(pdim, &config.param_widths, 2 * d), Activation::Identity, &mut rng),
                shift: Array2::zeros((1, pdim)),
                scale: Array2::ones((1, pdim)),
            }),
        };
        let decoder = match config.kind {
            ModelKind::Sf | ModelKind::ParamSfDec => {
                let gc = Mlp::new(&widths(3 + d, &config.decoder_widths, 3), Activation::Identity, &mut rng);
                let gf = Mlp::new(&widths(3 + d, &config.decoder_widths, 3), Activation::Sigmoid, &mut rng);
                let alpha = Linear::new(d, 1, 1.0, &mut rng);
                let dirs = fibonacci_sphere(config.points);
                let canonical = Array2::from_shape_fn((dirs.len(), 3), |(i, k)| dirs[i][k]);
                Decoder::Field(SfDecoder { gc, gf, alpha, canonical })
            }
            ModelKind::ParamMlp => {
                let mut rev: Vec<usize> = config.param_widths.clone();
                rev.reverse();
                Decoder::Params(Mlp::new(&widths(d, &rev, pdim), Activation::Identity, &mut rng))
            }
        };
        Ok(Self { config, encoder, decoder })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut t = match &self.encoder {
            Encoder::Points(e) => [e.points.tensors(), e.head.tensors()].concat(),
            Encoder::Params(e) => e.mlp.tensors(),
        };
        match &self.decoder {
            Decoder::Field(d) => {
                t.extend(d.gc.tensors());
                t.extend(d.gf.tensors());
                t.push(&d.alpha.w);
                t.push(&d.alpha.b);
            }
            Decoder::Params(m) => t.extend(m.tensors()),
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut t = match &mut self.encoder {
            Encoder::Points(e) => {
                let mut v = e.points.tensors_mut();
                v.extend(e.head.tensors_mut());
                v
            }
            Encoder::Params(e) => e.mlp.tensors_mut(),
        };
        match &mut self.decoder {
            Decoder::Field(d) => {
                t.extend(d.gc.tensors_mut());
                t.extend(d.gf.tensors_mut());
                t.push(&mut d.alpha.w);
                t.push(&mut d.alpha.b);
            }
            Decoder::Params(m) => t.extend(m.tensors_mut()),
        }
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut n = match &self.encoder {
            Encoder::Points(e) => [e.points.tensor_names("encoder.points"), e.head.tensor_names("encoder.head")].concat(),
            Encoder::Params(e) => e.mlp.tensor_names("encoder.mlp"),
        };
        match &self.decoder {
            Decoder::Field(d) => {
                n.extend(d.gc.tensor_names("decoder.gc"));
                n.extend(d.gf.tensor_names("decoder.gf"));
                n.push("decoder.alpha.w".into());
                n.push("decoder.alpha.b".into());
            }
            Decoder::Params(m) => n.extend(m.tensor_names("decoder.mlp")),
        }
        n
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.dim()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Non-trainable state: the canonical set and input standardization.
    pub fn buffers(&self) -> Vec<(String, &Array2<f64>)> {
        let mut b = Vec::new();
        if let Encoder::Params(e) = &self.encoder {
            b.push(("encoder.shift".to_string(), &e.shift));
            b.push(("encoder.scale".to_string(), &e.scale));
        }
        if let Decoder::Field(d) = &self.decoder {
            b.push(("decoder.canonical".to_string(), &d.canonical));
        }
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut b = Vec::new();
        if let Encoder::Params(e) = &mut self.encoder {
            b.push(("encoder.shift".to_string(), &mut e.shift));
            b.push(("encoder.scale".to_string(), &mut e.scale));
        }
        if let Decoder::Field(d) = &mut self.decoder {
            b.push(("decoder.canonical".to_string(), &mut d.canonical));
        }
        b
    }

    /// Sets the parameter-encoder standardization to the per-dimension mean
    /// and standard deviation of `items`. No effect on point encoders.
    pub fn fit_input_normalization(&mut self, items: &[TrainItem]) {
        let Encoder::Params(e) = &mut self.encoder else { return };
        if items.is_empty() {
            return;
        }
        let n = items.len() as f64;
        let dim = e.shift.ncols();
        for k in 0..dim {
            let mean = items.iter().map(|it| it.vector[k]).sum::<f64>() / n;
            let var = items.iter().map(|it| (it.vector[k] - mean).powi(2)).sum::<f64>() / n;
            e.shift[(0, k)] = mean;
            e.scale[(0, k)] = var.sqrt().max(1e-6);
        }
    }

    fn encoder_input(&self, items: &[&TrainItem]) -> Result<Array2<f64>> {
        match &self.encoder {
            Encoder::Points(_) => {
                let p = self.config.points;
                let mut x = Array2::zeros((items.len() * p, POINT_FEATURES));
                for (b, it) in items.iter().enumerate() {
                    if it.cloud.len() != p {
                        return Err(VaeError::Shape { expected: format!("{p} points"), actual: format!("{} points", it.cloud.len()) });
                    }
                    for (i, row) in it.cloud.rows().iter().enumerate() {
                        for (k, v) in row.iter().enumerate() {
                            x[(b * p + i, k)] = *v;
                        }
                    }
                }
                Ok(x)
            }
            Encoder::Params(e) => {
                let dim = e.shift.ncols();
                let mut x = Array2::zeros((items.len(), dim));
                for (b, it) in items.iter().enumerate() {
                    if it.vector.len() != dim {
                        return Err(VaeError::Shape { expected: format!("{dim} values"), actual: format!("{} values", it.vector.len()) });
                    }
                    x.row_mut(b).assign(&it.vector);
                }
                Ok(e.normalize(&x))
            }
        }
    }

    fn run_encoder(&self, items: &[&TrainItem]) -> Result<(Array2<f64>, EncoderCache)> {
        let x = self.encoder_input(items)?;
        Ok(match &self.encoder {
            Encoder::Points(e) => {
                let (out, cache) = e.forward(x, items.len());
                (out, EncoderCache::Points(cache))
            }
            Encoder::Params(e) => {
                let cache = e.mlp.forward(x);
                (cache.output().clone(), EncoderCache::Params(cache))
            }
        })
    }

    fn run_decoder(&self, z: &Array2<f64>) -> (Vec<Reconstruction>, DecoderCache) {
        match &self.decoder {
            Decoder::Field(d) => {
                let (out, cache) = d.forward(z);
                (out.into_iter().map(Reconstruction::Field).collect(), DecoderCache::Field(cache))
            }
            Decoder::Params(m) => {
                let cache = m.forward(z.clone());
                let out = cache.output().rows().into_iter().map(|r| Reconstruction::Params(r.to_owned())).collect();
                (out, DecoderCache::Params(cache))
            }
        }
    }

    /// Posterior statistics `B × 2D` for a batch.
    pub fn encode_stats(&self, items: &[&TrainItem]) -> Result<Array2<f64>> {
        Ok(self.run_encoder(items)?.0)
    }

    /// Posterior with the mean as the code.
    pub fn encode(&self, item: &TrainItem) -> Result<LatentCode> {
        let stats = self.encode_stats(&[item])?;
        let d = self.latent_dim();
        Ok(LatentCode::deterministic(stats.slice(s![0, ..d]).to_owned(), stats.slice(s![0, d..]).to_owned()))
    }

    pub fn encode_batch(&self, items: &[&TrainItem]) -> Result<Vec<LatentCode>> {
        let stats = self.encode_stats(items)?;
        let d = self.latent_dim();
        Ok(stats
            .rows()
            .into_iter()
            .map(|r| LatentCode::deterministic(r.slice(s![..d]).to_owned(), r.slice(s![d..]).to_owned()))
            .collect())
    }

    pub fn decode_batch(&self, z: &Array2<f64>) -> Result<Vec<Reconstruction>> {
        if z.ncols() != self.latent_dim() {
            return Err(VaeError::Shape { expected: format!("latent width {}", self.latent_dim()), actual: z.ncols().to_string() });
        }
        Ok(self.run_decoder(z).0)
    }

    pub fn decode(&self, z: &Array1<f64>) -> Result<Reconstruction> {
        let z2 = z.view().insert_axis(Axis(0)).to_owned();
        Ok(self.decode_batch(&z2)?.pop().expect("one row"))
    }

    /// Reconstruction as a field cloud. Parameter decoders are sampled on
    /// `sampling`; field decoders return their points directly.
    pub fn reconstruction_cloud(&self, rec: &Reconstruction, sampling: &SamplingConfig) -> Result<FieldCloud> {
        match rec {
            Reconstruction::Field(d) => Ok(d.to_cloud(self.config.radius)),
            Reconstruction::Params(v) => Ok(sample_params(&params_from_vector(&v.view(), self.config.l_max)?, sampling)?),
        }
    }

    pub fn reconstruction_params(&self, rec: &Reconstruction) -> Result<GaussianParams> {
        match rec {
            Reconstruction::Field(d) => Ok(recover_params(&d.to_cloud(self.config.radius), self.config.l_max, DEFAULT_RIDGE)?),
            Reconstruction::Params(v) => params_from_vector(&v.view(), self.config.l_max),
        }
    }

    /// Decodes `z` and recovers explicit primitive parameters.
    pub fn recover_from_latent(&self, z: &Array1<f64>) -> Result<GaussianParams> {
        self.reconstruction_params(&self.decode(z)?)
    }

    fn forward(&self, items: &[&TrainItem], eps: &Array2<f64>) -> Result<ForwardState> {
        let d = self.latent_dim();
        if eps.dim() != (items.len(), d) {
            return Err(VaeError::Shape { expected: format!("{}x{}", items.len(), d), actual: format!("{:?}", eps.dim()) });
        }
        let (stats, encoder) = self.run_encoder(items)?;
        let mut z = Array2::zeros((items.len(), d));
        for b in 0..items.len() {
            let row = reparameterize(&stats.slice(s![b, ..d]), &stats.slice(s![b, d..]), &eps.row(b));
            z.row_mut(b).assign(&row);
        }
        let (outputs, decoder) = self.run_decoder(&z);
        Ok(ForwardState { stats, eps: eps.clone(), encoder, decoder, outputs })
    }

    /// Per-sample reconstruction terms and their output gradients.
    fn recon_terms(&self, items: &[&TrainItem], outputs: &[Reconstruction], cfg: &ReconConfig) -> Result<Vec<(f64, OutputGrad)>> {
        items
            .par_iter()
            .zip(outputs)
            .map(|(it, out)| match out {
                Reconstruction::Field(dec) => {
                    let t = transport_loss(&it.cloud, dec, cfg)?;
                    Ok((t.value, OutputGrad::Field { d_pos: t.d_positions, d_col: t.d_colors, d_alpha: t.d_alpha }))
                }
                Reconstruction::Params(v) => {
                    let diff = v - &it.vector;
                    Ok((diff.mapv(|x| x * x).sum(), OutputGrad::Params(diff * 2.0)))
                }
            })
            .collect()
    }

    fn summarize(&self, state: &ForwardState, recon: &[f64], beta: f64) -> LossRecord {
        let d = self.latent_dim();
        let n = recon.len() as f64;
        let kl = (0..state.stats.nrows()).map(|b| kl_divergence(&state.stats.slice(s![b, ..d]), &state.stats.slice(s![b, d..]))).sum::<f64>() / n;
        let recon = recon.iter().sum::<f64>() / n;
        LossRecord { loss: recon + beta * kl, recon, kl, beta }
    }

    /// Batch-mean loss `recon + β·KL` for fixed reparameterization noise.
    pub fn loss(&self, items: &[&TrainItem], eps: &Array2<f64>, beta: f64, cfg: &ReconConfig) -> Result<LossRecord> {
        let state = self.forward(items, eps)?;
        let terms = self.recon_terms(items, &state.outputs, cfg)?;
        let recon: Vec<f64> = terms.iter().map(|t| t.0).collect();
        Ok(self.summarize(&state, &recon, beta))
    }

    /// Loss and gradients for every tensor in [`VaeModel::tensors`] order.
    /// The transport plan of each sample is held fixed during the backward
    /// pass.
    pub fn loss_and_grad(&self, items: &[&TrainItem], eps: &Array2<f64>, beta: f64, cfg: &ReconConfig) -> Result<(LossRecord, Vec<Array2<f64>>)> {
        let state = self.forward(items, eps)?;
        let terms = self.recon_terms(items, &state.outputs, cfg)?;
        let recon: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let record = self.summarize(&state, &recon, beta);
        let batch = items.len();
        let inv = 1.0 / batch as f64;
        let d = self.latent_dim();

        let mut decoder_grads = Vec::new();
        let dz = match (&self.decoder, &state.decoder) {
            (Decoder::Field(dec), DecoderCache::Field(cache)) => {
                let per = dec.points();
                let mut d_pos = Array2::zeros((batch * per, 3));
                let mut d_col = Array2::zeros((batch * per, 3));
                let mut d_alpha = Array1::zeros(batch);
                for (b, (_, g)) in terms.into_iter().enumerate() {
                    let OutputGrad::Field { d_pos: p, d_col: c, d_alpha: a } = g else { unreachable!("field decoder") };
                    d_pos.slice_mut(s![b * per..(b + 1) * per, ..]).assign(&(p * inv));
                    d_col.slice_mut(s![b * per..(b + 1) * per, ..]).assign(&(c * inv));
                    d_alpha[b] = a * inv;
                }
                dec.backward(cache, d_pos, d_col, &d_alpha, &mut decoder_grads)
            }
            (Decoder::Params(mlp), DecoderCache::Params(cache)) => {
                let mut dy = Array2::zeros(cache.output().raw_dim());
                for (b, (_, g)) in terms.into_iter().enumerate() {
                    let OutputGrad::Params(v) = g else { unreachable!("parameter decoder") };
                    dy.row_mut(b).assign(&(v * inv));
                }
                mlp.backward(cache, dy, true, &mut decoder_grads).expect("requested")
            }
            _ => unreachable!("cache matches decoder"),
        };

        let mut d_stats = Array2::zeros((batch, 2 * d));
        for b in 0..batch {
            for k in 0..d {
                let mean = state.stats[(b, k)];
                let lv = state.stats[(b, d + k)];
                let e = state.eps[(b, k)];
                d_stats[(b, k)] = dz[(b, k)] + beta * inv * mean;
                d_stats[(b, d + k)] = dz[(b, k)] * e * 0.5 * (0.5 * lv).exp() + beta * inv * 0.5 * (lv.exp() - 1.0);
            }
        }

        let mut grads = Vec::new();
        match (&self.encoder, &state.encoder) {
            (Encoder::Points(e), EncoderCache::Points(cache)) => e.backward(cache, d_stats, &mut grads),
            (Encoder::Params(e), EncoderCache::Params(cache)) => {
                e.mlp.backward(cache, d_stats, false, &mut grads);
            }
            _ => unreachable!("cache matches encoder"),
        }
        grads.extend(decoder_grads);
        Ok((record, grads))
    }
}

enum OutputGrad {
    Field { d_pos: Array2<f64>, d_col: Array2<f64>, d_alpha: f64 },
    Params(Array1<f64>),
}

/// Unit-sphere canonical coordinates used by a field decoder of size `count`.
pub fn canonical_set(count: usize) -> Vec<Vector3<f64>> {
    fibonacci_sphere(count)
}
