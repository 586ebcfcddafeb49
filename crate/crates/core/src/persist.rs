//! On-disk formats for datasets, checkpoints, bundles and training logs.
//!
//! Dataset files are little-endian binary:
//!
//! ```text
//! magic      8 bytes  "HNPEDATA"
//! version    u32      DATASET_VERSION
//! n_records  u64
//! n_local    u32      length of alpha
//! n_global   u32      length of beta
//! n_extra    u32      N
//! obs_dim    u32
//! records    n_records times:
//!   seed          u64
//!   alpha0        n_local f64
//!   beta          n_global f64
//!   x0            obs_dim f64
//!   extra_alphas  n_extra * n_local f64
//!   extra         n_extra * obs_dim f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ObservationBundle, SimRecord, SimulatedDataset, Theta};
use crate::trainer::{HnpeModel, LossMode, RoundHistory, TrainConfig};

pub const DATASET_MAGIC: &[u8; 8] = b"HNPEDATA";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "hnpe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_dataset(data: &SimulatedDataset, path: &Path) -> Result<()> {
    let (n_local, n_global) = data
        .records
        .first()
        .map_or((0, 0), |r| (r.theta0.alpha.len(), r.theta0.beta.len()));
    let n_extra = data.n_extra();
    let obs_dim = data.obs_dim();
    for (j, r) in data.records.iter().enumerate() {
        let ok = r.theta0.alpha.len() == n_local
            && r.theta0.beta.len() == n_global
            && r.x0.len() == obs_dim
            && r.extra.len() == n_extra
            && r.extra_alphas.len() == n_extra
            && r.extra.iter().all(|x| x.len() == obs_dim)
            && r.extra_alphas.iter().all(|a| a.len() == n_local);
        if !ok {
            return Err(Error::Format(format!(
                "record {j} does not match the shape of record 0"
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for d in [n_local, n_global, n_extra, obs_dim] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let put = |w: &mut BufWriter<File>, v: &[f64]| -> Result<()> {
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    for r in &data.records {
        w.write_all(&r.seed.to_le_bytes())?;
        put(&mut w, &r.theta0.alpha)?;
        put(&mut w, &r.theta0.beta)?;
        put(&mut w, &r.x0)?;
        for a in &r.extra_alphas {
            put(&mut w, a)?;
        }
        for x in &r.extra {
            put(&mut w, x)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut b = [0u8; K];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated dataset file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_dataset(path: &Path) -> Result<SimulatedDataset> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    if &c.bytes::<8>()? != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let version = c.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let n = c.u64()? as usize;
    let (n_local, n_global, n_extra, obs_dim) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let seed = c.u64()?;
        let alpha = c.f64s(n_local)?;
        let beta = c.f64s(n_global)?;
        let x0 = c.f64s(obs_dim)?;
        let extra_alphas = (0..n_extra).map(|_| c.f64s(n_local)).collect::<Result<_>>()?;
        let extra = (0..n_extra).map(|_| c.f64s(obs_dim)).collect::<Result<_>>()?;
        records.push(SimRecord {
            theta0: Theta::new(alpha, beta),
            x0,
            extra,
            extra_alphas,
            seed,
        });
    }
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe)? != 0 {
        return Err(Error::Format(format!("trailing bytes after {n} records")));
    }
    Ok(SimulatedDataset { records })
}

/// Trained model together with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub round: usize,
    pub train: TrainConfig,
    pub model: HnpeModel,
}

impl Checkpoint {
    pub fn new(model: HnpeModel, train: TrainConfig, round: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            round,
            train,
            model,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT || version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Format(format!(
                "{} has format {format:?} version {version}, expected {CHECKPOINT_FORMAT:?} version {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.model.config.validate()?;
        Ok(ck)
    }
}

pub fn write_bundle(bundle: &ObservationBundle, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<ObservationBundle> {
    let b: ObservationBundle = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    ObservationBundle::new(b.x0, b.extra)
}

/// Loss curves as `round,mode,epoch,train_loss,val_loss`; epoch 0 holds the
/// validation loss before the first update.
pub fn write_history_csv(histories: &[RoundHistory], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "mode", "epoch", "train_loss", "val_loss"])?;
    for h in histories {
        let mode = match h.mode {
            LossMode::MaximumLikelihood => "mle".to_string(),
            LossMode::Atomic { .. } => "atomic".to_string(),
        };
        w.write_record([
            h.round.to_string(),
            mode.clone(),
            "0".into(),
            String::new(),
            h.initial_val_loss.to_string(),
        ])?;
        for e in &h.epochs {
            w.write_record([
                h.round.to_string(),
                mode.clone(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Posterior draws as CSV with one column per parameter.
pub fn write_samples_csv(names: &[String], rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for r in rows {
        if r.len() != names.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                got: r.len(),
            });
        }
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = rec?
            .iter()
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {} of {}: bad number {c:?}", i + 1, path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((names, rows))
}
