//! Binary training checkpoints.
//!
//! Layout: magic, little-endian `u32` header length, JSON header, then the
//! tables as length-prefixed little-endian `f64` blocks. Float metadata is
//! stored as raw bits so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::{AdamMoments, AdamState, ModelParams};
use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::macrofm::CentroidSet;
use crate::propagation::{read_values, write_values, LayerCombination, LayerStack, ViewEmbeddings};
use crate::sparse::Matrix;

const MAGIC: &[u8; 8] = b"FRGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: usize,
    /// Best validation Recall@n so far; `-inf` before the first evaluation.
    pub best_metric: f64,
    pub stale_evals: usize,
    pub finished: bool,
    /// Validation metric of every evaluation, in order.
    pub validation_history: Vec<f64>,
    /// Current parameters.
    pub params: ModelParams,
    pub adam: AdamState,
    /// Centroids used by the last epoch, if the macro term is on.
    pub centroids: Option<(CentroidSet, CentroidSet)>,
    /// Parameters at `best_epoch`.
    pub best: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    dataset_hash: String,
    epoch: usize,
    best_epoch: usize,
    best_metric_bits: u64,
    stale_evals: usize,
    finished: bool,
    validation_history_bits: Vec<u64>,
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    write_values(w, m)
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    read_values(r, rows, cols)
}

fn write_params<W: Write>(w: &mut W, p: &ModelParams, comb: LayerCombination) -> Result<()> {
    p.if_emb.write_to(w, comb)?;
    w.write_u8(p.iu_emb.is_some() as u8)?;
    if let Some(iu) = &p.iu_emb {
        iu.write_to(w, comb)?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<ModelParams> {
    let (if_emb, _) = ViewEmbeddings::read_from(r)?;
    let iu_emb = match r.read_u8()? {
        0 => None,
        1 => Some(ViewEmbeddings::read_from(r)?.0),
        t => return Err(Error::Format(format!("bad table flag {t}"))),
    };
    Ok(ModelParams { if_emb, iu_emb })
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            config: self.config.to_text(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_metric_bits: self.best_metric.to_bits(),
            stale_evals: self.stale_evals,
            finished: self.finished,
            validation_history_bits: self.validation_history.iter().map(|v| v.to_bits()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        let comb = self.config.layer_combination;
        write_params(w, &self.params, comb)?;
        let a = &self.adam;
        w.write_u64::<LittleEndian>(a.beta1.to_bits())?;
        w.write_u64::<LittleEndian>(a.beta2.to_bits())?;
        w.write_u64::<LittleEndian>(a.eps.to_bits())?;
        w.write_u64::<LittleEndian>(a.step)?;
        w.write_u64::<LittleEndian>(a.moments.len() as u64)?;
        for mo in &a.moments {
            write_matrix(w, &mo.m)?;
            write_matrix(w, &mo.v)?;
        }
        w.write_u8(self.centroids.is_some() as u8)?;
        if let Some((c_if, c_iu)) = &self.centroids {
            c_if.write_to(w)?;
            c_iu.write_to(w)?;
        }
        write_params(w, &self.best, comb)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        let config = TrainConfig::parse_str(&h.config)?;
        let params = read_params(r)?;
        let beta1 = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let beta2 = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let eps = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut moments = Vec::with_capacity(count.min(2));
        for _ in 0..count {
            moments.push(AdamMoments { m: read_matrix(r)?, v: read_matrix(r)? });
        }
        let centroids = match r.read_u8()? {
            0 => None,
            1 => Some((CentroidSet::read_from(r)?, CentroidSet::read_from(r)?)),
            t => return Err(Error::Format(format!("bad centroid flag {t}"))),
        };
        let best = read_params(r)?;
        Ok(Self {
            config,
            config_hash: h.config_hash,
            dataset_hash: h.dataset_hash,
            epoch: h.epoch,
            best_epoch: h.best_epoch,
            best_metric: f64::from_bits(h.best_metric_bits),
            stale_evals: h.stale_evals,
            finished: h.finished,
            validation_history: h.validation_history_bits.into_iter().map(f64::from_bits).collect(),
            params,
            adam: AdamState { beta1, beta2, eps, step, moments },
            centroids,
            best,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Fails with both hashes when `dataset` is not the one trained on.
    pub fn check_dataset(&self, dataset: &InteractionDataset) -> Result<()> {
        let found = dataset.content_hash();
        if found != self.dataset_hash {
            return Err(Error::HashMismatch { expected: self.dataset_hash.clone(), found });
        }
        Ok(())
    }

    /// Scoring representation of the best parameters on the full train
    /// graph of the model's scoring view.
    pub fn scoring_stack(&self, dataset: &InteractionDataset) -> Result<LayerStack> {
        self.check_dataset(dataset)?;
        super::scoring_stack(&self.config, &self.best.if_emb, dataset)
    }
}
