//! Checkpoint container: full training state serialized so that resuming
//! mid-epoch reproduces the uninterrupted run bit for bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::PretrainConfig;
use crate::model::params::ParamSet;
use crate::tensor::io::{read_tensor, write_tensor, TensorIoError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ECLP";
pub const VERSION: u32 = 1;
/// Upper bound on embedded string/list lengths, to fail fast on garbage.
const MAX_LEN: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error("bad magic bytes {0:?}, expected \"ECLP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config embedded in checkpoint is invalid: {0}")]
    Config(String),
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: PretrainConfig,
    /// 1 or 2.
    pub stage: u8,
    pub global_step: u64,
    /// Steps taken within the current stage; drives warmup.
    pub stage_step: u64,
    /// Epoch index within the current stage.
    pub epoch: u64,
    /// Shuffled product order for the current epoch and the cursor into it.
    pub epoch_order: Vec<u64>,
    pub epoch_pos: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    /// Base and momentum parameters, in construction order, with names.
    pub base: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
    pub queue_capacity: u64,
    pub queue_dim: u64,
    /// Queue contents oldest first, flattened rows.
    pub queue_rows: Vec<f64>,
    pub opt_t: u64,
    /// Adam moments aligned with `base` order.
    pub opt_m: Vec<Tensor>,
    pub opt_v: Vec<Tensor>,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize, CheckpointError> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(CheckpointError::Corrupt(format!(
            "{what} length {n} exceeds limit"
        )));
    }
    Ok(n as usize)
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String, CheckpointError> {
    let n = read_len(r, what)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt(format!("{what} is not utf-8")))
}

fn write_named_tensors<W: Write>(w: &mut W, items: &[(String, Tensor)]) -> std::io::Result<()> {
    write_u64(w, items.len() as u64)?;
    for (name, t) in items {
        write_string(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_named_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let n = read_len(r, "parameter list")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_string(r, "parameter name")?;
        let t = read_tensor(r)?;
        out.push((name, t));
    }
    Ok(out)
}

fn write_tensors<W: Write>(w: &mut W, items: &[Tensor]) -> std::io::Result<()> {
    write_u64(w, items.len() as u64)?;
    for t in items {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>, CheckpointError> {
    let n = read_len(r, "tensor list")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_tensor(r)?);
    }
    Ok(out)
}

impl TrainState {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        write_string(w, &config_json)?;
        w.write_all(&[self.stage])?;
        write_u64(w, self.global_step)?;
        write_u64(w, self.stage_step)?;
        write_u64(w, self.epoch)?;
        write_u64(w, self.epoch_pos)?;
        write_u64(w, self.epoch_order.len() as u64)?;
        for &p in &self.epoch_order {
            write_u64(w, p)?;
        }
        w.write_all(&self.rng_seed)?;
        write_u64(w, self.rng_stream)?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        write_named_tensors(w, &self.base)?;
        write_named_tensors(w, &self.momentum)?;
        write_u64(w, self.queue_capacity)?;
        write_u64(w, self.queue_dim)?;
        write_u64(w, self.queue_rows.len() as u64)?;
        for &v in &self.queue_rows {
            w.write_all(&v.to_le_bytes())?;
        }
        write_u64(w, self.opt_t)?;
        write_tensors(w, &self.opt_m)?;
        write_tensors(w, &self.opt_v)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let mut vbuf = [0u8; 4];
        r.read_exact(&mut vbuf)?;
        let version = u32::from_le_bytes(vbuf);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_json = read_string(r, "config")?;
        let config: PretrainConfig = serde_json::from_str(&config_json)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        config
            .validate()
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut stage = [0u8; 1];
        r.read_exact(&mut stage)?;
        let stage = stage[0];
        if stage != 1 && stage != 2 {
            return Err(CheckpointError::Corrupt(format!("stage byte {stage}")));
        }
        let global_step = read_u64(r)?;
        let stage_step = read_u64(r)?;
        let epoch = read_u64(r)?;
        let epoch_pos = read_u64(r)?;
        let order_len = read_len(r, "epoch order")?;
        let mut epoch_order = Vec::with_capacity(order_len);
        for _ in 0..order_len {
            epoch_order.push(read_u64(r)?);
        }
        if epoch_pos as usize > epoch_order.len() {
            return Err(CheckpointError::Corrupt(format!(
                "epoch cursor {epoch_pos} past order of {}",
                epoch_order.len()
            )));
        }
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let rng_stream = read_u64(r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let rng_word_pos = u128::from_le_bytes(wp);
        let base = read_named_tensors(r)?;
        let momentum = read_named_tensors(r)?;
        if base.len() != momentum.len() {
            return Err(CheckpointError::Corrupt(
                "base/momentum parameter counts differ".into(),
            ));
        }
        let queue_capacity = read_u64(r)?;
        let queue_dim = read_u64(r)?;
        let queue_len = read_len(r, "queue payload")?;
        if queue_dim == 0 || queue_len % queue_dim as usize != 0 {
            return Err(CheckpointError::Corrupt(
                "queue payload not a multiple of its row width".into(),
            ));
        }
        let mut queue_rows = Vec::with_capacity(queue_len);
        let mut buf = [0u8; 8];
        for _ in 0..queue_len {
            r.read_exact(&mut buf)?;
            queue_rows.push(f64::from_le_bytes(buf));
        }
        let opt_t = read_u64(r)?;
        let opt_m = read_tensors(r)?;
        let opt_v = read_tensors(r)?;
        if opt_m.len() != base.len() || opt_v.len() != base.len() {
            return Err(CheckpointError::Corrupt(
                "optimizer moment counts differ from parameter count".into(),
            ));
        }
        for (i, (name, p)) in base.iter().enumerate() {
            if opt_m[i].shape() != p.shape() || opt_v[i].shape() != p.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "optimizer moment shape mismatch at {name}"
                )));
            }
        }
        Ok(TrainState {
            config,
            stage,
            global_step,
            stage_step,
            epoch,
            epoch_order,
            epoch_pos,
            rng_seed,
            rng_stream,
            rng_word_pos,
            base,
            momentum,
            queue_capacity,
            queue_dim,
            queue_rows,
            opt_t,
            opt_m,
            opt_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}

/// Overwrite `params` with `saved`, verifying names and shapes index by
/// index against the freshly constructed set.
pub fn restore_params(params: &mut ParamSet, saved: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    if params.len() != saved.len() {
        return Err(CheckpointError::Corrupt(format!(
            "checkpoint has {} parameters, model expects {}",
            saved.len(),
            params.len()
        )));
    }
    for (i, (name, t)) in saved.iter().enumerate() {
        let id = crate::model::params::ParamId(i);
        if params.name(id) != name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {i} is named {name}, expected {}",
                params.name(id)
            )));
        }
        if params.get(id).shape() != t.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}
