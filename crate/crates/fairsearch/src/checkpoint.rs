//! Versioned binary checkpoints: named parameters with shapes, optimizer
//! state, architecture weights, and run metadata. Values are stored as IEEE
//! f64 little-endian bytes, so 64-bit round-trips are bit-exact (and f32
//! values, which embed exactly in f64, round-trip bit-exactly too).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::optim::Adam;
use crate::search_space::ArchParams;
use crate::supernet::ParamStore;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 8] = b"FSCKPT01";

/// What kind of network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Supernet,
    Child,
}

/// Run metadata embedded in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config_hash: String,
    /// The full run configuration, so a network can be rebuilt from the
    /// checkpoint alone.
    pub config: crate::config::RunConfig,
    /// Next epoch to run (number of completed epochs).
    pub epoch: usize,
    pub dtype: Dtype,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    /// Architecture weights (supernet checkpoints).
    pub arch: Option<ArchParams>,
    /// Adam state for the two alpha matrices (resumable search).
    pub adam_normal: Option<Adam>,
    pub adam_reduce: Option<Adam>,
    /// The genotype a child was derived from.
    pub genotype: Option<Genotype>,
}

impl CheckpointMeta {
    pub fn stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.channel_mean,
            std: self.channel_std,
        }
    }
}

/// A named tensor section (parameters or optimizer state).
pub type NamedBuffers = Vec<(String, Vec<usize>, Vec<f64>)>;

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: NamedBuffers,
    pub opt_state: NamedBuffers,
}

fn write_section(out: &mut Vec<u8>, buffers: &NamedBuffers) {
    out.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for (name, shape, data) in buffers {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_section(r: &mut Reader) -> Result<NamedBuffers> {
    let count = r.u64()? as usize;
    let mut buffers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint has a non-utf8 parameter name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        buffers.push((name, shape, data));
    }
    Ok(buffers)
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let meta = serde_json::to_vec(&checkpoint.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    write_section(&mut out, &checkpoint.params);
    write_section(&mut out, &checkpoint.opt_state);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a checkpoint (bad magic {:02x?})",
            path.display(),
            &magic[..magic.len().min(8)]
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
    let params = read_section(&mut r)?;
    let opt_state = read_section(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        meta,
        params,
        opt_state,
    })
}

/// Extract a parameter store's tensors as f64 buffers, sorted by name.
pub fn params_to_buffers<T: Element>(store: &ParamStore<T>) -> NamedBuffers {
    let mut buffers: NamedBuffers = store
        .iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|&v| v.to_f64()).collect(),
            )
        })
        .collect();
    buffers.sort_by(|a, b| a.0.cmp(&b.0));
    buffers
}

/// Restore checkpointed buffers into a parameter store; every checkpoint
/// entry must name an existing parameter of matching size.
pub fn restore_params<T: Element>(store: &mut ParamStore<T>, buffers: &NamedBuffers) -> Result<()> {
    for (name, _, data) in buffers {
        store.restore(name, data.iter().map(|&v| T::from_f64(v)).collect())?;
    }
    Ok(())
}

/// Round-trip a tensor through the checkpoint encoding (test support).
pub fn tensor_round_trips<T: Element>(t: &Tensor<T>) -> bool {
    t.data()
        .iter()
        .all(|&v| T::from_f64(v.to_f64()) == v)
}

/// SGD velocity buffers, named after their parameters.
pub fn sgd_state_to_buffers<T: Element>(
    store: &ParamStore<T>,
    sgd: &crate::optim::SgdMomentum<T>,
) -> NamedBuffers {
    store
        .iter()
        .zip(sgd.state().iter())
        .map(|((name, t), v)| {
            (
                format!("sgd.v.{name}"),
                t.shape().to_vec(),
                v.iter().map(|&x| x.to_f64()).collect(),
            )
        })
        .collect()
}

/// Restore SGD velocities from named buffers.
pub fn restore_sgd_state<T: Element>(
    store: &ParamStore<T>,
    sgd: &mut crate::optim::SgdMomentum<T>,
    buffers: &NamedBuffers,
) -> Result<()> {
    let mut state: Vec<Vec<T>> = sgd.state().to_vec();
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    for (name, _, data) in buffers {
        let Some(param_name) = name.strip_prefix("sgd.v.") else {
            return Err(Error::Parse(format!("unknown state buffer `{name}`")));
        };
        let idx = names
            .iter()
            .position(|&n| n == param_name)
            .ok_or_else(|| {
                Error::ConfigMismatch(format!("state for unknown parameter `{param_name}`"))
            })?;
        if state[idx].len() != data.len() {
            return Err(Error::ConfigMismatch(format!(
                "state size mismatch for `{param_name}`"
            )));
        }
        state[idx] = data.iter().map(|&v| T::from_f64(v)).collect();
    }
    sgd.restore_state(state)
}
