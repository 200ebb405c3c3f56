//! Checkpoint file: `RETROCK1`, a little-endian u64 header length, a JSON
//! header describing each entry, then for every entry its parameters and (if
//! present) both Adam moment vectors as little-endian f64.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ApproximatorSpec, Mlp, OptimizerState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RETROCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub layout: ApproximatorSpec,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step_index: u64,
    pub config_digest: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    step_index: u64,
    config_digest: String,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    layout: ApproximatorSpec,
    n_params: usize,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let header = Header {
        step_index: ckpt.step_index,
        config_digest: ckpt.config_digest.clone(),
        entries: ckpt
            .entries
            .iter()
            .map(|e| EntryHeader {
                name: e.name.clone(),
                layout: e.layout.clone(),
                n_params: e.params.len(),
                optimizer: e.optimizer.as_ref().map(|o| OptimizerHeader {
                    step_count: o.step_count,
                    learning_rate: o.learning_rate,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    epsilon: o.epsilon,
                }),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in &ckpt.entries {
        write_floats(&mut w, &e.params)?;
        if let Some(o) = &e.optimizer {
            write_floats(&mut w, &o.first_moment)?;
            write_floats(&mut w, &o.second_moment)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut entries = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let expected = Mlp::new(e.layout.clone())?.n_params();
        if expected != e.n_params {
            return Err(Error::format(
                "checkpoint",
                format!("entry {} has {} params, layout needs {expected}", e.name, e.n_params),
            ));
        }
        let params = read_floats(&mut r, e.n_params)?;
        let optimizer = match e.optimizer {
            Some(o) => Some(OptimizerState {
                first_moment: read_floats(&mut r, e.n_params)?,
                second_moment: read_floats(&mut r, e.n_params)?,
                step_count: o.step_count,
                learning_rate: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
            }),
            None => None,
        };
        entries.push(CheckpointEntry {
            name: e.name,
            layout: e.layout,
            params,
            optimizer,
        });
    }
    Ok(Checkpoint {
        step_index: header.step_index,
        config_digest: header.config_digest,
        entries,
    })
}

fn write_floats<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format("checkpoint body", e.to_string()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
