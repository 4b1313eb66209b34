//! Subcommand implementations. Each `run_*` function is what the binary
//! calls; they are public so tests can drive them without spawning processes.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;
use sfgs_core::datagen::GenConfig;
use sfgs_core::manifold::{recover_params, sample_params, FieldCloud, SamplingConfig, SamplingScheme};
use sfgs_core::mdist::{cost_matrix, median, w2_exact, w2_sinkhorn, GroundMetricConfig, Solver, Transport};
use sfgs_core::primitives::GaussianParams;
use sfgs_core::sgrf::{fields_equal, make_equivalent_flip, make_equivalent_qsign, FieldProbe};
use sfgs_core::sh::{DEFAULT_RIDGE, MAX_DEGREE};
use sfgs_vae::adam::AdamConfig;
use sfgs_vae::eval::{encode_means, evaluate, interpolate, perturb_eval, EvalReport, Stats};
use sfgs_vae::model::param_vector;
use sfgs_vae::recon::ReconConfig;
use sfgs_vae::{ModelConfig, ModelKind, TrainConfig, TrainItem, Trainer, VaeModel};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, Dataset, DatasetHeader, DatasetWriter};
use crate::error::{CliError, Result};
use crate::ply::{load_ply, save_ply};
use crate::report::{write_csv, write_json};
use crate::split::split;

/// Checkpoint file name inside a training directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Angular,
    Fibonacci,
}

impl From<SchemeArg> for SamplingScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Angular => SamplingScheme::Angular,
            SchemeArg::Fibonacci => SamplingScheme::Fibonacci,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Grid size; clouds have n² points.
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Iso-probability radius.
    #[arg(long = "r", default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Angular)]
    pub scheme: SchemeArg,
    /// Use raw SH colors instead of `+0.5` and clipping to [0, 1].
    #[arg(long)]
    pub no_offset: bool,
}

impl Default for SamplingArgs {
    fn default() -> Self {
        Self { n: 12, radius: 1.0, scheme: SchemeArg::Angular, no_offset: false }
    }
}

impl SamplingArgs {
    pub fn config(&self) -> Result<SamplingConfig> {
        if self.n < 3 {
            return Err(CliError::Usage(format!("--n must be at least 3, got {}", self.n)));
        }
        if !(self.radius > 0.0) {
            return Err(CliError::Usage(format!("--r must be positive, got {}", self.radius)));
        }
        Ok(SamplingConfig { n: self.n, radius: self.radius, scheme: self.scheme.into(), offset: !self.no_offset })
    }
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    /// Weight of the color term in the ground cost.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Compare raw colors instead of opacity-weighted colors.
    #[arg(long)]
    pub no_alpha: bool,
}

impl Default for MetricArgs {
    fn default() -> Self {
        Self { lambda: 1.0, no_alpha: false }
    }
}

impl MetricArgs {
    pub fn config(&self) -> Result<GroundMetricConfig> {
        let cfg = GroundMetricConfig { lambda: self.lambda, include_alpha: !self.no_alpha };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Primitives read from a PLY or dataset file.
#[derive(Debug, Clone)]
pub struct Source {
    pub params: Vec<GaussianParams>,
    pub dataset: Option<DatasetHeader>,
    pub clouds: Option<Vec<FieldCloud>>,
    pub color_offset: Option<bool>,
}

pub fn load_source(path: &Path) -> Result<Source> {
    let mut magic = [0u8; 4];
    File::open(path).map_err(CliError::io(path))?.read_exact(&mut magic).map_err(CliError::io(path))?;
    if &magic == dataset::MAGIC {
        let ds = Dataset::load(path)?;
        let clouds = ds.header.clouds.map(|_| ds.records.iter().map(|r| r.cloud.clone().expect("header declares clouds")).collect());
        Ok(Source { params: ds.params(), color_offset: ds.header.clouds.map(|s| s.offset), dataset: Some(ds.header), clouds })
    } else if &magic == b"ply\n" || &magic == b"ply\r" {
        let scene = load_ply(path)?;
        Ok(Source { params: scene.gaussians, dataset: None, clouds: None, color_offset: scene.color_offset })
    } else {
        Err(CliError::Data(format!("{}: neither a PLY file nor an SFGS dataset", path.display())))
    }
}

fn sample_all(params: &[GaussianParams], sampling: &SamplingConfig) -> Result<Vec<FieldCloud>> {
    params
        .par_iter()
        .enumerate()
        .map(|(i, p)| sample_params(p, sampling).map_err(|e| CliError::Numeric(format!("record {i}: {e}"))))
        .collect()
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// JSON generator configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size for stored clouds.
    #[arg(long)]
    pub n: Option<usize>,
    /// Store sampled clouds alongside the parameters.
    #[arg(long)]
    pub clouds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub config: GenConfig,
    pub clouds: bool,
    pub out: PathBuf,
}

pub fn run_gen(args: &GenArgs) -> Result<GenSummary> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str::<GenConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => GenConfig::default(),
    };
    cfg.count = args.count.unwrap_or(cfg.count);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    dataset::generate_file(&args.out, &cfg, args.clouds)?;
    Ok(GenSummary { config: cfg, clouds: args.clouds, out: args.out.clone() })
}

// ---------------------------------------------------------------- sample

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// PLY or dataset file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output dataset with stored clouds.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_sample(args: &SampleArgs) -> Result<DatasetHeader> {
    let src = load_source(&args.input)?;
    let sampling = args.sampling.config()?;
    let clouds = sample_all(&src.params, &sampling)?;
    let (gen, canonical) = src.dataset.as_ref().map_or((None, false), |h| (h.gen.clone(), h.canonical_sign));
    let header = DatasetHeader::new("sample", gen, src.params.len() as u64, MAX_DEGREE, Some(sampling), canonical)?;
    let f = File::create(&args.out).map_err(CliError::io(&args.out))?;
    let mut w = DatasetWriter::new(std::io::BufWriter::new(f), header.clone())?;
    for (p, c) in src.params.iter().zip(&clouds) {
        w.write_record(p, Some(c))?;
    }
    w.finish()?;
    Ok(header)
}

// ---------------------------------------------------------------- recover

#[derive(Debug, Clone, Args)]
pub struct RecoverArgs {
    /// Dataset with stored clouds.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PLY.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    pub ridge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoverSummary {
    pub count: usize,
    pub sampling: SamplingConfig,
    pub ridge: f64,
    pub out: PathBuf,
}

pub fn run_recover(args: &RecoverArgs) -> Result<RecoverSummary> {
    let src = load_source(&args.input)?;
    let clouds = src.clouds.ok_or_else(|| CliError::Data(format!("{} stores no clouds; run `sample` first", args.input.display())))?;
    let sampling = src.dataset.and_then(|h| h.clouds).expect("clouds imply a dataset header");
    let params: Vec<GaussianParams> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| recover_params(c, MAX_DEGREE, args.ridge).map_err(|e| CliError::Numeric(format!("record {i}: {e}"))))
        .collect::<Result<_>>()?;
    save_ply(&args.out, &params, Some(sampling.offset))?;
    Ok(RecoverSummary { count: params.len(), sampling, ridge: args.ridge, out: args.out.clone() })
}

// ---------------------------------------------------------------- mdist

#[derive(Debug, Clone, Args)]
pub struct MdistArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Exact assignment (default).
    #[arg(long, conflicts_with = "sinkhorn")]
    pub exact: bool,
    /// Entropic transport.
    #[arg(long)]
    pub sinkhorn: bool,
    /// Sinkhorn regularization as a multiple of the median ground cost.
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MdistConfigEcho {
    pub a: PathBuf,
    pub b: PathBuf,
    pub metric: GroundMetricConfig,
    pub sampling: SamplingConfig,
    pub solver: Solver,
    /// Regularization as a multiple of the median cost (Sinkhorn only).
    pub eps_scale: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub distance_sq: f64,
    pub solver: Solver,
    pub epsilon: Option<f64>,
    pub converged: bool,
    pub marginal_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MdistReport {
    pub config: MdistConfigEcho,
    pub distance: Stats,
    pub distance_sq: Stats,
    pub pairs: Vec<PairDistance>,
}

/// Index pairs: elementwise for equal lengths, broadcast when one side has
/// a single record.
fn pairing(na: usize, nb: usize) -> Result<Vec<(usize, usize)>> {
    match (na, nb) {
        (0, _) | (_, 0) => Err(CliError::Data("empty input".into())),
        (a, b) if a == b => Ok((0..a).map(|i| (i, i)).collect()),
        (1, b) => Ok((0..b).map(|j| (0, j)).collect()),
        (a, 1) => Ok((0..a).map(|i| (i, 0)).collect()),
        (a, b) => Err(CliError::Data(format!("cannot pair {a} records with {b}"))),
    }
}

pub fn run_mdist(args: &MdistArgs) -> Result<MdistReport> {
    let metric = args.metric.config()?;
    let sampling = args.sampling.config()?;
    if args.sinkhorn && !(args.eps > 0.0) {
        return Err(CliError::Usage("--eps must be positive".into()));
    }
    let a = sample_all(&load_source(&args.a)?.params, &sampling)?;
    let b = sample_all(&load_source(&args.b)?.params, &sampling)?;
    let pairs = pairing(a.len(), b.len())?;
    let results: Vec<PairDistance> = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<PairDistance> {
            let (t, epsilon): (Transport, Option<f64>) = if args.sinkhorn {
                let eps = args.eps * median(cost_matrix(&a[i], &b[j], &metric)?.iter().copied());
                (w2_sinkhorn(&a[i], &b[j], &metric, eps, args.max_iters, args.tol)?, Some(eps))
            } else {
                (w2_exact(&a[i], &b[j], &metric)?, None)
            };
            Ok(PairDistance { a: i, b: j, distance: t.distance(), distance_sq: t.cost, solver: t.solver, epsilon, converged: t.converged, marginal_error: t.marginal_error })
        })
        .collect::<Result<_>>()?;
    let d: Vec<f64> = results.iter().map(|p| p.distance).collect();
    let d2: Vec<f64> = results.iter().map(|p| p.distance_sq).collect();
    let report = MdistReport {
        config: MdistConfigEcho {
            a: args.a.clone(),
            b: args.b.clone(),
            metric,
            sampling,
            solver: if args.sinkhorn { Solver::Entropic } else { Solver::Exact },
            eps_scale: args.sinkhorn.then_some(args.eps),
            max_iters: args.sinkhorn.then_some(args.max_iters),
            tol: args.sinkhorn.then_some(args.tol),
        },
        distance: Stats::from_values(&d),
        distance_sq: Stats::from_values(&d2),
        pairs: results,
    };
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- equiv

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EquivMode {
    /// `q → −q`.
    Qsign,
    /// Rotation by π about the local z axis with the matching SH transform.
    Flip,
}

#[derive(Debug, Clone, Args)]
pub struct EquivArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EquivMode,
    /// Field probe points per primitive.
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Field agreement tolerance.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivConfigEcho {
    pub input: PathBuf,
    pub mode: EquivMode,
    pub probes: usize,
    pub seed: u64,
    pub tol: f64,
    pub metric: GroundMetricConfig,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivRecord {
    pub index: usize,
    /// L1 distance between the two parameter vectors.
    pub param_l1: f64,
    /// `‖q‖₁` of the original quaternion.
    pub quat_l1: f64,
    pub field_max_deviation: f64,
    pub field_equal: bool,
    pub mdist: f64,
    pub mdist_sq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivReport {
    pub config: EquivConfigEcho,
    pub all_fields_equal: bool,
    pub max_field_deviation: f64,
    pub max_mdist: f64,
    pub min_param_l1: f64,
    pub records: Vec<EquivRecord>,
}

pub fn equiv_record(index: usize, p: &GaussianParams, mode: EquivMode, probes: usize, seed: u64, tol: f64, metric: &GroundMetricConfig, sampling: &SamplingConfig) -> Result<EquivRecord> {
    let other = match mode {
        EquivMode::Qsign => make_equivalent_qsign(p),
        EquivMode::Flip => make_equivalent_flip(p),
    };
    let probe = FieldProbe::around(p, probes, seed.wrapping_add(index as u64));
    let cmp = fields_equal(p, &other, &probe, tol, sampling.offset)?;
    let m = sfgs_core::mdist::mdist(p, &other, sampling, metric)?;
    Ok(EquivRecord {
        index,
        param_l1: p.l1_distance(&other),
        quat_l1: p.q().to_array().iter().map(|v| v.abs()).sum(),
        field_max_deviation: cmp.max_deviation,
        field_equal: cmp.equal,
        mdist: m.distance,
        mdist_sq: m.distance_sq,
    })
}

pub fn run_equiv(args: &EquivArgs) -> Result<EquivReport> {
    let metric = args.metric.config()?;
    let sampling = args.sampling.config()?;
    if args.probes == 0 {
        return Err(CliError::Usage("--probes must be positive".into()));
    }
    let mut params = load_source(&args.input)?.params;
    params.truncate(args.limit.unwrap_or(usize::MAX));
    let records: Vec<EquivRecord> = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| equiv_record(i, p, args.mode, args.probes, args.seed, args.tol, &metric, &sampling).map_err(|e| CliError::Numeric(format!("record {i}: {e}"))))
        .collect::<Result<_>>()?;
    let report = EquivReport {
        config: EquivConfigEcho { input: args.input.clone(), mode: args.mode, probes: args.probes, seed: args.seed, tol: args.tol, metric, sampling },
        all_fields_equal: records.iter().all(|r| r.field_equal),
        max_field_deviation: records.iter().map(|r| r.field_max_deviation).fold(0.0, f64::max),
        max_mdist: records.iter().map(|r| r.mdist).fold(0.0, f64::max),
        min_param_l1: records.iter().map(|r| r.param_l1).fold(f64::INFINITY, f64::min),
        records,
    };
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- train

/// Sampling for model inputs when neither the dataset nor the flags fix it.
pub const DEFAULT_MODEL_SCHEME: SchemeArg = SchemeArg::Fibonacci;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// sf, param-mlp or param-sfdec.
    #[arg(long, default_value = "sf")]
    pub model: String,
    /// JSON model configuration; `--model`, `--latent-dim` and `--seed` override it.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Seeds the weights, minibatch order, noise and held-out split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint, log and report.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub beta_kl: f64,
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Cloud grid size; defaults to the dataset's.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Use at most N training records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Held-out records scored after each epoch.
    #[arg(long, default_value_t = 500)]
    pub eval_limit: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub model: String,
    pub seed: u64,
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub heldout_mdist: f64,
    pub heldout_mdist_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub split_seed: u64,
    pub train_records: usize,
    pub heldout_records: usize,
    pub parameter_count: usize,
    pub epochs: Vec<EpochLog>,
}

/// Model inputs for the given records: stored clouds when they match
/// `sampling`, otherwise freshly sampled.
pub fn items_for(ds: &Dataset, indices: &[usize], sampling: &SamplingConfig) -> Result<Vec<TrainItem>> {
    let stored = ds.header.clouds == Some(*sampling);
    indices
        .par_iter()
        .map(|&i| {
            let r = ds.records.get(i).ok_or_else(|| CliError::Usage(format!("record {i} out of range (dataset has {})", ds.records.len())))?;
            match (&r.cloud, stored) {
                (Some(c), true) => Ok(TrainItem::from_parts(r.params.clone(), c.clone())),
                _ => TrainItem::new(r.params.clone(), sampling).map_err(|e| CliError::Numeric(format!("record {i}: {e}"))),
            }
        })
        .collect()
}

/// Sampling for model inputs: explicit flags, then stored clouds, then the
/// generator's grid size.
pub fn model_sampling(ds: &Dataset, n: Option<usize>, scheme: Option<SchemeArg>) -> Result<SamplingConfig> {
    let base = ds.header.clouds.unwrap_or_else(|| {
        let grid = ds.header.gen.as_ref().map_or(12, |g| g.n);
        SamplingConfig { scheme: DEFAULT_MODEL_SCHEME.into(), ..SamplingConfig::with_n(grid) }
    });
    let cfg = SamplingConfig { n: n.unwrap_or(base.n), scheme: scheme.map_or(base.scheme, Into::into), ..base };
    if cfg.n < 3 {
        return Err(CliError::Usage(format!("grid size must be at least 3, got {}", cfg.n)));
    }
    Ok(cfg)
}

fn heldout_score(model: &VaeModel, items: &[TrainItem], sampling: &SamplingConfig, metric: &GroundMetricConfig) -> Result<Stats> {
    if items.is_empty() {
        return Ok(Stats::default());
    }
    Ok(evaluate(model, items, sampling, metric, false)?.mdist)
}

pub fn run_train(args: &TrainArgs) -> Result<TrainReport> {
    let kind = ModelKind::parse(&args.model).ok_or_else(|| CliError::Usage(format!("unknown model `{}` (sf, param-mlp, param-sfdec)", args.model)))?;
    let metric = args.metric.config()?;
    let ds = Dataset::load(&args.dataset)?;
    let sampling = model_sampling(&ds, args.n, args.scheme)?;
    let parts = split(ds.records.len(), args.seed);
    let mut train_idx = parts.train;
    train_idx.truncate(args.limit.unwrap_or(usize::MAX));
    let held_idx: Vec<usize> = parts.heldout.into_iter().take(args.eval_limit).collect();
    if train_idx.is_empty() && args.epochs > 0 {
        return Err(CliError::Data("no training records".into()));
    }
    let train_items = items_for(&ds, &train_idx, &sampling)?;
    let held_items = items_for(&ds, &held_idx, &sampling)?;

    let base = match &args.model_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str::<ModelConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    let model_cfg = ModelConfig { kind, latent_dim: args.latent_dim, points: sampling.point_count(), radius: sampling.radius, seed: args.seed, ..base };
    let mut model = VaeModel::new(model_cfg)?;
    model.fit_input_normalization(&train_items);
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamConfig { lr: args.lr, ..AdamConfig::default() },
        beta_kl: args.beta_kl,
        seed: args.seed,
        recon: ReconConfig { metric, ..ReconConfig::default() },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, train_cfg, train_items.len())?;

    std::fs::create_dir_all(&args.ckpt).map_err(CliError::io(&args.ckpt))?;
    let ckpt_path = args.ckpt.join(CHECKPOINT_FILE);
    let name = kind.name().to_string();
    let init = heldout_score(&trainer.model, &held_items, &sampling, &metric)?;
    let mut log = vec![EpochLog {
        model: name.clone(),
        seed: args.seed,
        epoch: 0,
        steps: 0,
        skipped: 0,
        lr: trainer.adam.config.lr,
        loss: None,
        recon: None,
        kl: None,
        heldout_mdist: init.mean,
        heldout_mdist_se: init.std_err,
    }];
    Checkpoint::from_trainer(&trainer, 0, sampling, args.seed).save(&ckpt_path)?;
    for e in 0..args.epochs {
        let rec = trainer.run_epoch(&train_items, e)?;
        let score = heldout_score(&trainer.model, &held_items, &sampling, &metric)?;
        log.push(EpochLog {
            model: name.clone(),
            seed: args.seed,
            epoch: e + 1,
            steps: rec.steps,
            skipped: rec.skipped,
            lr: trainer.adam.config.lr,
            loss: Some(rec.loss),
            recon: Some(rec.recon),
            kl: Some(rec.kl),
            heldout_mdist: score.mean,
            heldout_mdist_se: score.std_err,
        });
        Checkpoint::from_trainer(&trainer, e + 1, sampling, args.seed).save(&ckpt_path)?;
        write_csv(&args.ckpt.join(TRAIN_LOG_FILE), &log)?;
    }
    write_csv(&args.ckpt.join(TRAIN_LOG_FILE), &log)?;
    let report = TrainReport {
        dataset: args.dataset.clone(),
        model: trainer.model.config.clone(),
        train: trainer.config,
        sampling,
        split_seed: args.seed,
        train_records: train_items.len(),
        heldout_records: held_items.len(),
        parameter_count: trainer.model.parameter_count(),
        epochs: log,
    };
    write_json(&args.ckpt.join(TRAIN_REPORT_FILE), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Heldout,
    Train,
    All,
}

/// Checkpoint file, or a training directory containing one.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn select(ds: &Dataset, which: SplitArg, seed: u64, limit: Option<usize>) -> Vec<usize> {
    let parts = split(ds.records.len(), seed);
    let mut idx = match which {
        SplitArg::Heldout => parts.heldout,
        SplitArg::Train => parts.train,
        SplitArg::All => (0..ds.records.len()).collect(),
    };
    idx.truncate(limit.unwrap_or(usize::MAX));
    idx
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointEcho {
    pub path: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub sampling: SamplingConfig,
    pub split_seed: u64,
}

impl CheckpointEcho {
    fn new(path: &Path, ck: &Checkpoint) -> Self {
        let h = &ck.header;
        Self { path: path.to_path_buf(), model: h.model.clone(), train: h.train, epoch: h.epoch, step: h.step, sampling: h.sampling, split_seed: h.split_seed }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip parameter recovery from reconstructions.
    #[arg(long)]
    pub no_recovery: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub checkpoint: CheckpointEcho,
    pub dataset: PathBuf,
    pub split: SplitArg,
    pub records: Vec<usize>,
    pub result: EvalReport,
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let path = resolve_checkpoint(&args.ckpt);
    let ck = Checkpoint::load(&path)?;
    let ds = Dataset::load(&args.dataset)?;
    let idx = select(&ds, args.split, ck.header.split_seed, args.limit);
    if idx.is_empty() {
        return Err(CliError::Data("no records to evaluate".into()));
    }
    let sampling = ck.header.sampling;
    let items = items_for(&ds, &idx, &sampling)?;
    let result = evaluate(&ck.model, &items, &sampling, &ck.header.train.recon.metric, !args.no_recovery)?;
    let out = EvalOutput { checkpoint: CheckpointEcho::new(&path, &ck), dataset: args.dataset.clone(), split: args.split, records: idx, result };
    if let Some(p) = &args.report {
        write_json(p, &out)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------- interp

#[derive(Debug, Clone, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Record index of the first endpoint.
    #[arg(long)]
    pub a: usize,
    #[arg(long)]
    pub b: usize,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// PLY with one recovered primitive per step.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpStep {
    pub t: f64,
    pub latent: Vec<f64>,
    /// `[q | s | c | o]` of the recovered primitive.
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpReport {
    pub checkpoint: CheckpointEcho,
    pub dataset: PathBuf,
    pub a: usize,
    pub b: usize,
    pub steps: Vec<InterpStep>,
}

pub fn run_interp(args: &InterpArgs) -> Result<InterpReport> {
    let path = resolve_checkpoint(&args.ckpt);
    let ck = Checkpoint::load(&path)?;
    let ds = Dataset::load(&args.dataset)?;
    let sampling = ck.header.sampling;
    let items = items_for(&ds, &[args.a, args.b], &sampling)?;
    let z = encode_means(&ck.model, &items)?;
    let steps = interpolate(&ck.model, &z[0], &z[1], args.steps)?;
    let mut params = Vec::with_capacity(steps.len());
    let mut out = Vec::with_capacity(steps.len());
    for (k, s) in steps.into_iter().enumerate() {
        let p = s.params.map_err(|e| CliError::Numeric(format!("interpolation step {k} (t = {}): {e}", s.t)))?;
        out.push(InterpStep { t: s.t, latent: s.z.to_vec(), params: param_vector(&p).to_vec() });
        params.push(p);
    }
    save_ply(&args.out, &params, Some(sampling.offset))?;
    let report = InterpReport { checkpoint: CheckpointEcho::new(&path, &ck), dataset: args.dataset.clone(), a: args.a, b: args.b, steps: out };
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- perturb

#[derive(Debug, Clone, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Noise standard deviations added to the posterior mean.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5")]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 200)]
    pub limit: usize,
    /// CSV output.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbCsvRow {
    pub model: String,
    pub checkpoint_step: u64,
    pub split: SplitArg,
    pub seed: u64,
    pub lambda: f64,
    pub include_alpha: bool,
    pub n: usize,
    pub radius: f64,
    pub scheme: SamplingScheme,
    pub sigma: f64,
    pub samples: usize,
    pub trials: usize,
    pub mean_mdist: f64,
    pub std_err: f64,
}

pub fn run_perturb(args: &PerturbArgs) -> Result<Vec<PerturbCsvRow>> {
    let path = resolve_checkpoint(&args.ckpt);
    let ck = Checkpoint::load(&path)?;
    let ds = Dataset::load(&args.dataset)?;
    let idx = select(&ds, args.split, ck.header.split_seed, Some(args.limit));
    let sampling = ck.header.sampling;
    let items = items_for(&ds, &idx, &sampling)?;
    let metric = ck.header.train.recon.metric;
    let rows = perturb_eval(&ck.model, &items, &args.levels, args.trials, args.seed, &sampling, &metric)?;
    let out: Vec<PerturbCsvRow> = rows
        .into_iter()
        .map(|r| PerturbCsvRow {
            model: ck.model.kind().name().to_string(),
            checkpoint_step: ck.header.step,
            split: args.split,
            seed: args.seed,
            lambda: metric.lambda,
            include_alpha: metric.include_alpha,
            n: sampling.n,
            radius: sampling.radius,
            scheme: sampling.scheme,
            sigma: r.sigma,
            samples: r.count,
            trials: r.trials,
            mean_mdist: r.mean,
            std_err: r.std_err,
        })
        .collect();
    write_csv(&args.report, &out)?;
    Ok(out)
}

/// Latent of one record under a checkpoint; used by tests and tools.
pub fn encode_record(model: &VaeModel, ds: &Dataset, index: usize, sampling: &SamplingConfig) -> Result<Array1<f64>> {
    let items = items_for(ds, &[index], sampling)?;
    Ok(encode_means(model, &items)?.remove(0))
}
