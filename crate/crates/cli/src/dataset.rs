//! `SFGS` dataset container.
//!
//! ```text
//! "SFGS" | version u16 | header_len u32 | header JSON | crc32(header) u32 | records
//! ```
//!
//! All integers and floats are little-endian. Each record is `param_len`
//! float32 parameters `[mu | q | s | c (channel-major) | o]`, followed by
//! `points × 7` float32 cloud values when clouds are stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sfgs_core::datagen::{gen_dataset, GenConfig, GenRecord};
use sfgs_core::manifold::{FieldCloud, SamplingConfig};
use sfgs_core::primitives::GaussianParams;
use sfgs_core::sh::coeff_count;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SFGS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    /// Command that produced the file.
    pub source: String,
    /// Generator settings when the records came from `gen`.
    pub gen: Option<GenConfig>,
    pub count: u64,
    pub l_max: usize,
    pub param_len: usize,
    /// Sampling used for the stored clouds; `None` when no clouds are stored.
    pub clouds: Option<SamplingConfig>,
    pub points: usize,
    /// Quaternions are stored with `w ≥ 0` (first nonzero component positive).
    pub canonical_sign: bool,
}

impl DatasetHeader {
    pub fn new(source: &str, gen: Option<GenConfig>, count: u64, l_max: usize, clouds: Option<SamplingConfig>, canonical_sign: bool) -> Result<Self> {
        let param_len = 11 + 3 * coeff_count(l_max)?;
        let points = clouds.map_or(0, |s| s.point_count());
        Ok(Self { source: source.into(), gen, count, l_max, param_len, clouds, points, canonical_sign })
    }

    pub fn record_floats(&self) -> usize {
        self.param_len + 7 * self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub params: GaussianParams,
    pub cloud: Option<FieldCloud>,
}

/// Streaming writer; the record count is fixed by the header up front.
pub struct DatasetWriter<W: Write> {
    inner: W,
    header: DatasetHeader,
    written: u64,
    buf: Vec<u8>,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut inner: W, header: DatasetHeader) -> Result<Self> {
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| CliError::Data("dataset header too large".into()))?;
        let mut pre = Vec::with_capacity(14 + json.len());
        pre.extend(MAGIC);
        pre.extend(VERSION.to_le_bytes());
        pre.extend(len.to_le_bytes());
        pre.extend(&json);
        pre.extend(crc32fast::hash(&json).to_le_bytes());
        inner.write_all(&pre).map_err(|e| CliError::PartialWrite { written: 0, expected: header.count, reason: e.to_string() })?;
        Ok(Self { inner, header, written: 0, buf: Vec::new() })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    fn fail(&self, reason: impl ToString) -> CliError {
        CliError::PartialWrite { written: self.written, expected: self.header.count, reason: reason.to_string() }
    }

    pub fn write_record(&mut self, params: &GaussianParams, cloud: Option<&FieldCloud>) -> Result<()> {
        if self.written >= self.header.count {
            return Err(self.fail("more records than the header declares"));
        }
        let v = params.to_vec();
        if v.len() != self.header.param_len {
            return Err(self.fail(format!("record has {} parameters, header declares {}", v.len(), self.header.param_len)));
        }
        self.buf.clear();
        self.buf.extend(v.iter().flat_map(|x| (*x as f32).to_le_bytes()));
        match (cloud, self.header.points) {
            (None, 0) => {}
            (Some(c), p) if p > 0 && c.len() == p => {
                for row in c.rows() {
                    self.buf.extend(row.iter().flat_map(|x| (*x as f32).to_le_bytes()));
                }
            }
            (c, p) => return Err(self.fail(format!("record cloud has {} points, header declares {p}", c.map_or(0, |c| c.len())))),
        }
        let buf = std::mem::take(&mut self.buf);
        let res = self.inner.write_all(&buf);
        self.buf = buf;
        res.map_err(|e| self.fail(e))?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and checks that every declared record was written.
    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| self.fail(e))?;
        if self.written != self.header.count {
            return Err(self.fail("fewer records than the header declares"));
        }
        Ok(self.inner)
    }
}

pub struct DatasetReader<R: Read> {
    inner: R,
    header: DatasetHeader,
    read: u64,
    buf: Vec<u8>,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let trunc = |e: std::io::Error| CliError::Data(format!("truncated dataset header: {e}"));
        let mut fixed = [0u8; 10];
        inner.read_exact(&mut fixed).map_err(trunc)?;
        if &fixed[..4] != MAGIC {
            return Err(CliError::Data("not an SFGS dataset (bad magic)".into()));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != VERSION {
            return Err(CliError::Data(format!("unsupported dataset version {version}")));
        }
        let len = u32::from_le_bytes(fixed[6..10].try_into().unwrap()) as usize;
        let mut json = vec![0u8; len];
        inner.read_exact(&mut json).map_err(trunc)?;
        let mut crc = [0u8; 4];
        inner.read_exact(&mut crc).map_err(trunc)?;
        if u32::from_le_bytes(crc) != crc32fast::hash(&json) {
            return Err(CliError::Checksum("dataset header".into()));
        }
        let header: DatasetHeader = serde_json::from_slice(&json)?;
        let expected = 11 + 3 * coeff_count(header.l_max)?;
        if header.param_len != expected {
            return Err(CliError::Data(format!("header param_len {} does not match degree {}", header.param_len, header.l_max)));
        }
        if header.clouds.map_or(0, |s| s.point_count()) != header.points {
            return Err(CliError::Data("header point count disagrees with its sampling".into()));
        }
        let buf = vec![0u8; 4 * header.record_floats()];
        Ok(Self { inner, header, read: 0, buf })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn next_record(&mut self) -> Result<Option<DatasetRecord>> {
        if self.read == self.header.count {
            let mut extra = [0u8; 1];
            return match self.inner.read(&mut extra) {
                Ok(0) => Ok(None),
                Ok(_) => Err(CliError::Data(format!("dataset has trailing bytes after {} records", self.header.count))),
                Err(e) => Err(CliError::Data(e.to_string())),
            };
        }
        self.inner
            .read_exact(&mut self.buf)
            .map_err(|_| CliError::Data(format!("dataset declares {} records but ends after {}", self.header.count, self.read)))?;
        let vals: Vec<f64> = self.buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let p = self.header.param_len;
        let params = GaussianParams::from_slice(&vals[..p], self.header.l_max).map_err(|e| CliError::Data(format!("record {}: {e}", self.read)))?;
        let cloud = self.header.clouds.map(|s| {
            let rows: Vec<[f64; 7]> = vals[p..].chunks_exact(7).map(|r| r.try_into().unwrap()).collect();
            FieldCloud::from_rows(&rows, s)
        });
        self.read += 1;
        Ok(Some(DatasetRecord { params, cloud }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut reader = DatasetReader::new(r)?;
        let mut records = Vec::with_capacity(reader.header().count.min(1 << 20) as usize);
        while let Some(rec) = reader.next_record()? {
            records.push(rec);
        }
        Ok(Self { header: reader.header, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(CliError::io(path))?;
        Self::read(BufReader::new(f))
    }

    pub fn params(&self) -> Vec<GaussianParams> {
        self.records.iter().map(|r| r.params.clone()).collect()
    }

    pub fn write<W: Write>(&self, w: W) -> Result<W> {
        let mut out = DatasetWriter::new(w, self.header.clone())?;
        for r in &self.records {
            out.write_record(&r.params, r.cloud.as_ref())?;
        }
        out.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(CliError::io(path))?;
        self.write(BufWriter::new(f)).map(|_| ())
    }
}

/// Runs the generator and streams every record into `w`.
pub fn generate_into<W: Write>(w: W, cfg: &GenConfig, with_clouds: bool) -> Result<W> {
    cfg.validate()?;
    let header = DatasetHeader::new("gen", Some(cfg.clone()), cfg.count, cfg.l_max, with_clouds.then(|| cfg.sampling()), true)?;
    let mut out = DatasetWriter::new(w, header)?;
    gen_dataset(cfg, with_clouds, 1024, |rec: GenRecord| out.write_record(&rec.params, rec.cloud.as_ref())).map_err(|(_, e)| e)?;
    out.finish()
}

pub fn generate_file(path: &Path, cfg: &GenConfig, with_clouds: bool) -> Result<()> {
    let f = File::create(path).map_err(CliError::io(path))?;
    generate_into(BufWriter::new(f), cfg, with_clouds).map(|_| ())
}
