//! Checkpoint file: magic `BTNC`, little-endian `u16` version, `u32` length
//! of a JSON header, the header, then tensors in the binary tensor format
//! (parameters, optimizer state, best parameters if any), then the 16-byte
//! shuffle PRNG state.

use super::{BestState, EpochRow, TrainConfig};
use crate::error::{BtnError, Result};
use crate::model::ModelConfig;
use crate::numerics::io::read_exact_or;
use crate::numerics::{read_tensor, write_tensor, Tensor};
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BTNC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<Tensor<f64>>,
    pub optimizer_step: u64,
    pub optimizer_state: Vec<Tensor<f64>>,
    pub rng: CounterRng,
    /// Rows for every completed epoch.
    pub log: Vec<EpochRow>,
    pub best: Option<BestState>,
}

impl Checkpoint {
    pub fn epoch(&self) -> usize {
        self.log.len()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    /// Fusion input channels are concatenated in this column order.
    concat_order: Vec<usize>,
    n_params: usize,
    n_optimizer: usize,
    optimizer_step: u64,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
    log: Vec<EpochRow>,
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch(),
        concat_order: (0..ck.model.columns.len()).collect(),
        n_params: ck.params.len(),
        n_optimizer: ck.optimizer_state.len(),
        optimizer_step: ck.optimizer_step,
        best_epoch: ck.best.as_ref().map(|b| b.epoch),
        best_score: ck.best.as_ref().map(|b| b.score),
        log: ck.log.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| BtnError::Malformed {
        what: "checkpoint header".into(),
        reason: "exceeds 4 GiB".into(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in ck.params.iter().chain(&ck.optimizer_state) {
        write_tensor(&mut out, t)?;
    }
    if let Some(b) = &ck.best {
        write_tensor(&mut out, &Tensor::vector(b.params.clone()))?;
    }
    out.extend_from_slice(&ck.rng.to_bytes());
    Ok(out)
}

pub fn checkpoint_from_reader<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(BtnError::MagicMismatch {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let mut v = [0u8; 2];
    read_exact_or(r, &mut v, "checkpoint version")?;
    let version = u16::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(BtnError::VersionMismatch {
            expected: CHECKPOINT_VERSION.into(),
            found: version.into(),
        });
    }
    let mut len = [0u8; 4];
    read_exact_or(r, &mut len, "checkpoint header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_or(r, &mut json, "checkpoint header")?;
    let h: Header = serde_json::from_slice(&json)?;
    if h.epoch != h.log.len() {
        return Err(BtnError::Malformed {
            what: "checkpoint header".into(),
            reason: format!("epoch {} but {} log rows", h.epoch, h.log.len()),
        });
    }
    let read_n = |r: &mut R, n: usize| (0..n).map(|_| read_tensor::<f64, _>(r)).collect::<Result<Vec<_>>>();
    let params = read_n(r, h.n_params)?;
    let optimizer_state = read_n(r, h.n_optimizer)?;
    let best = match (h.best_epoch, h.best_score) {
        (Some(epoch), Some(score)) => Some(BestState {
            epoch,
            score,
            params: read_tensor::<f64, _>(r)?.into_data(),
        }),
        (None, None) => None,
        _ => {
            return Err(BtnError::Malformed {
                what: "checkpoint header".into(),
                reason: "best_epoch and best_score must be both set or both null".into(),
            })
        }
    };
    let mut state = [0u8; 16];
    read_exact_or(r, &mut state, "checkpoint PRNG state")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(BtnError::Malformed {
            what: "checkpoint".into(),
            reason: "trailing bytes after PRNG state".into(),
        });
    }
    Ok(Checkpoint {
        model: h.model,
        train: h.train,
        params,
        optimizer_step: h.optimizer_step,
        optimizer_state,
        rng: CounterRng::from_bytes(state),
        log: h.log,
        best,
    })
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| BtnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BtnError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            BtnError::MissingFile(path.into())
        } else {
            BtnError::io(path, e)
        }
    })?;
    checkpoint_from_reader(&mut BufReader::new(f))
}
