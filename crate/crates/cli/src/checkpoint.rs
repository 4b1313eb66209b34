//! `SFGC` model checkpoints.
//!
//! ```text
//! "SFGC" | version u16 | header_len u32 | header JSON | crc32(header) u32
//!        | data (f64 LE) | crc32(data) u32
//! ```
//!
//! The data block holds every trainable tensor, then every buffer (canonical
//! set, input standardization), then the Adam first and second moments, each
//! row-major in header order. Noise and shuffling come from counter-based
//! generators keyed by `(seed, step)` and `(seed, epoch)`, so the step and
//! epoch counters are the complete RNG state.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sfgs_core::manifold::SamplingConfig;
use sfgs_vae::adam::Adam;
use sfgs_vae::{ModelConfig, TrainConfig, Trainer, VaeModel};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SFGC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Sampling of the clouds the model was trained on.
    pub sampling: SamplingConfig,
    /// Seed of the held-out split.
    pub split_seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps attempted, including skipped ones.
    pub step: u64,
    pub total_steps: u64,
    pub adam_step: u64,
    pub lr: f64,
    pub lr_halved: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: VaeModel,
    pub adam: Adam,
}

fn entries<'a>(items: impl Iterator<Item = (String, &'a Array2<f64>)>) -> Vec<TensorEntry> {
    items.map(|(name, t)| TensorEntry { name, rows: t.nrows(), cols: t.ncols() }).collect()
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, epoch: usize, sampling: SamplingConfig, split_seed: u64) -> Self {
        let model = trainer.model.clone();
        let header = CheckpointHeader {
            model: model.config.clone(),
            train: trainer.config,
            sampling,
            split_seed,
            tensors: entries(model.tensor_names().into_iter().zip(model.tensors())),
            buffers: entries(model.buffers().into_iter()),
            epoch,
            step: trainer.step,
            total_steps: trainer.total_steps,
            adam_step: trainer.adam.step,
            lr: trainer.adam.config.lr,
            lr_halved: trainer.lr_halved,
        };
        Self { header, model, adam: trainer.adam.clone() }
    }

    /// Trainer positioned to continue after the stored epoch.
    pub fn into_trainer(self) -> Trainer {
        let mut adam = self.adam;
        adam.config.lr = self.header.lr;
        Trainer {
            model: self.model,
            adam,
            config: self.header.train,
            step: self.header.step,
            total_steps: self.header.total_steps,
            lr_halved: self.header.lr_halved,
            history: Vec::new(),
        }
    }

    fn data(&self) -> Vec<&Array2<f64>> {
        let mut all = self.model.tensors();
        all.extend(self.model.buffers().into_iter().map(|(_, b)| b));
        all.extend(self.adam.m.iter());
        all.extend(self.adam.v.iter());
        all
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<W> {
        let json = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(json.len()).map_err(|_| CliError::Data("checkpoint header too large".into()))?;
        let mut pre = Vec::with_capacity(14 + json.len());
        pre.extend(MAGIC);
        pre.extend(VERSION.to_le_bytes());
        pre.extend(len.to_le_bytes());
        pre.extend(&json);
        pre.extend(crc32fast::hash(&json).to_le_bytes());
        let mut data = Vec::new();
        for t in self.data() {
            data.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        let io = |e: std::io::Error| CliError::Data(format!("checkpoint write: {e}"));
        w.write_all(&pre).map_err(io)?;
        w.write_all(&data).map_err(io)?;
        w.write_all(&crc32fast::hash(&data).to_le_bytes()).map_err(io)?;
        w.flush().map_err(io)?;
        Ok(w)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let trunc = |e: std::io::Error| CliError::Data(format!("truncated checkpoint: {e}"));
        let mut fixed = [0u8; 10];
        r.read_exact(&mut fixed).map_err(trunc)?;
        if &fixed[..4] != MAGIC {
            return Err(CliError::Data("not an SFGC checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != VERSION {
            return Err(CliError::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut json = vec![0u8; u32::from_le_bytes(fixed[6..10].try_into().unwrap()) as usize];
        r.read_exact(&mut json).map_err(trunc)?;
        let mut crc = [0u8; 4];
        r.read_exact(&mut crc).map_err(trunc)?;
        if u32::from_le_bytes(crc) != crc32fast::hash(&json) {
            return Err(CliError::Checksum("checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&json)?;

        let mut model = VaeModel::new(header.model.clone())?;
        let expect_tensors = entries(model.tensor_names().into_iter().zip(model.tensors()));
        let expect_buffers = entries(model.buffers().into_iter());
        if header.tensors != expect_tensors || header.buffers != expect_buffers {
            return Err(CliError::Data("checkpoint tensor table does not match its model configuration".into()));
        }
        let shapes = model.shapes();
        let mut adam = Adam::new(header.train.adam, &shapes);
        adam.step = header.adam_step;

        let floats: usize = shapes.iter().map(|(a, b)| 3 * a * b).sum::<usize>() + expect_buffers.iter().map(|e| e.rows * e.cols).sum::<usize>();
        let mut data = vec![0u8; 8 * floats];
        r.read_exact(&mut data).map_err(trunc)?;
        r.read_exact(&mut crc).map_err(trunc)?;
        if u32::from_le_bytes(crc) != crc32fast::hash(&data) {
            return Err(CliError::Checksum("checkpoint data".into()));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(trunc)? != 0 {
            return Err(CliError::Data("checkpoint has trailing bytes".into()));
        }
        let mut vals = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let mut fill = |t: &mut Array2<f64>| t.iter_mut().for_each(|x| *x = vals.next().expect("sized above"));
        model.tensors_mut().into_iter().for_each(&mut fill);
        model.buffers_mut().into_iter().for_each(|(_, b)| fill(b));
        adam.m.iter_mut().for_each(&mut fill);
        adam.v.iter_mut().for_each(&mut fill);
        Ok(Self { header, model, adam })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(CliError::io(path))?;
        Self::read(BufReader::new(f))
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let f = File::create(&tmp).map_err(CliError::io(&tmp))?;
        self.write(BufWriter::new(f))?;
        fs::rename(&tmp, path).map_err(CliError::io(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfgs_core::datagen::{gen_primitive, GenConfig};
    use sfgs_vae::{ModelKind, TrainItem};

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig { kind, latent_dim: 4, points: 9, point_widths: vec![8], head_widths: vec![8], param_widths: vec![8], decoder_widths: vec![8], seed: 2, ..ModelConfig::default() }
    }

    fn trained(kind: ModelKind) -> Trainer {
        let sampling = SamplingConfig::with_n(3);
        let cfg = GenConfig { count: 6, seed: 4, ..GenConfig::default() };
        let items: Vec<TrainItem> = (0..6).map(|i| TrainItem::new(gen_primitive(&cfg, i).unwrap(), &sampling).unwrap()).collect();
        let mut model = VaeModel::new(tiny(kind)).unwrap();
        model.fit_input_normalization(&items);
        let mut t = Trainer::new(model, TrainConfig { batch_size: 3, epochs: 2, ..Default::default() }, items.len()).unwrap();
        t.run_epoch(&items, 0).unwrap();
        t
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [ModelKind::Sf, ModelKind::ParamMlp, ModelKind::ParamSfDec] {
            let t = trained(kind);
            let ck = Checkpoint::from_trainer(&t, 1, SamplingConfig::with_n(3), 7);
            let bytes = ck.write(Vec::new()).unwrap();
            let back = Checkpoint::read(&bytes[..]).unwrap();
            assert_eq!(back.model, t.model);
            assert_eq!(back.adam, t.adam);
            assert_eq!(back.header, ck.header);
            assert_eq!(back.write(Vec::new()).unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::from_trainer(&trained(ModelKind::Sf), 1, SamplingConfig::with_n(3), 7);
        let bytes = ck.write(Vec::new()).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 0x10;
        assert!(matches!(Checkpoint::read(&flipped[..]), Err(CliError::Checksum(_))));
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let sampling = SamplingConfig::with_n(3);
        let cfg = GenConfig { count: 6, seed: 4, ..GenConfig::default() };
        let items: Vec<TrainItem> = (0..6).map(|i| TrainItem::new(gen_primitive(&cfg, i).unwrap(), &sampling).unwrap()).collect();
        let mut straight = trained(ModelKind::Sf);
        let bytes = Checkpoint::from_trainer(&straight, 1, sampling, 0).write(Vec::new()).unwrap();
        let mut resumed = Checkpoint::read(&bytes[..]).unwrap().into_trainer();
        straight.run_epoch(&items, 1).unwrap();
        resumed.run_epoch(&items, 1).unwrap();
        assert_eq!(straight.model, resumed.model);
    }
}
