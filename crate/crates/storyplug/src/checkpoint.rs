//! Training checkpoint files and loss-history CSV.
//!
//! Layout: magic `SPCK`, version (u32 LE), header length (u32 LE), JSON
//! header, then `param_count` f64 LE values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use storyplug_core::finetune::{FineTuneConfig, StepRecord, TrainingCheckpoint};

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    config: FineTuneConfig,
    class_noun: String,
    descriptor_id: String,
    param_count: usize,
    history: Vec<StepRecord>,
}

pub fn serialize(ck: &TrainingCheckpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        step: ck.step,
        config: ck.config.clone(),
        class_noun: ck.class_noun.clone(),
        descriptor_id: ck.descriptor_id.clone(),
        param_count: ck.params.len(),
        history: ck.history.clone(),
    })
    .expect("serializable header");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * ck.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &ck.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn deserialize(bytes: &[u8]) -> Result<TrainingCheckpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[12 + hlen..];
    if payload.len() != 8 * h.param_count {
        return Err(bad(format!("expected {} parameter bytes, found {}", 8 * h.param_count, payload.len())));
    }
    let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(TrainingCheckpoint {
        step: h.step,
        config: h.config,
        class_noun: h.class_noun,
        descriptor_id: h.descriptor_id,
        params,
        history: h.history,
    })
}

pub fn write(path: &Path, ck: &TrainingCheckpoint) -> Result<()> {
    io::write_atomic(path, &serialize(ck))
}

pub fn read(path: &Path) -> Result<TrainingCheckpoint> {
    deserialize(&io::read(path)?)
}

/// `step,l_sub,l_reg,l_total`, one row per step.
pub fn loss_history_csv(history: &[StepRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn read_loss_history(bytes: &[u8]) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().collect::<Result<Vec<StepRecord>, _>>().map_err(|e| bad(format!("loss history: {e}")))
}
