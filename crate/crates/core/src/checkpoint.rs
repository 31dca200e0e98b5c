//! Self-describing binary checkpoints.
//!
//! ```text
//! "ISEGCKPT" | u32 LE format version | u64 LE header length | JSON header | tensor bytes
//! ```
//!
//! The JSON header carries the configs, step counter, normalization statistics,
//! RNG state and a table locating each tensor (section, name, dtype, shape,
//! byte offset). Tensor bytes follow in section order: params, buffers, first
//! moments, second moments, all little endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::ChannelStats;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ISEGCKPT";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1::<f64>()?),
            _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(match &self.data {
            TensorData::F32(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &Device::Cpu)?,
            TensorData::F64(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &Device::Cpu)?,
        })
    }
}

/// ChaCha generator position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, stored as a string since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    pub network_config: NetworkConfig,
    pub step: u64,
    pub stats: ChannelStats,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub optimizer_steps: u64,
    pub first_moments: Vec<NamedTensor>,
    pub second_moments: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    train_config: TrainConfig,
    network_config: NetworkConfig,
    step: u64,
    stats: ChannelStats,
    rng: RngState,
    optimizer_steps: u64,
    tensors: Vec<TensorEntry>,
}

const SECTIONS: [&str; 4] = ["params", "buffers", "adam_m", "adam_v"];

impl Checkpoint {
    fn sections(&self) -> [&Vec<NamedTensor>; 4] {
        [&self.params, &self.buffers, &self.first_moments, &self.second_moments]
    }

    /// Rebuilds the network stored in this checkpoint.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::init(&self.network_config)?;
        let params = self
            .params
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        let buffers = self
            .buffers
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        net.load_state(&params, &buffers)?;
        Ok(net)
    }

    /// Raw little-endian bytes of the parameter section.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.params {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (section, tensors) in SECTIONS.iter().zip(self.sections()) {
            for t in tensors.iter() {
                let offset = payload.len() as u64;
                t.data.write_le(&mut payload);
                entries.push(TensorEntry {
                    section: section.to_string(),
                    name: t.name.clone(),
                    dtype: t.data.dtype_name().into(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes: payload.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            version: self.version,
            train_config: self.train_config.clone(),
            network_config: self.network_config.clone(),
            step: self.step,
            stats: self.stats.clone(),
            rng: self.rng.clone(),
            optimizer_steps: self.optimizer_steps,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an infoseg checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != version {
            return Err(bad("header version disagrees with file version"));
        }
        let payload = &bytes[header_end..];
        let mut sections: [Vec<NamedTensor>; 4] = Default::default();
        for entry in header.tensors {
            let idx = SECTIONS
                .iter()
                .position(|s| *s == entry.section)
                .ok_or_else(|| Error::Checkpoint(format!("unknown section {}", entry.section)))?;
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.nbytes as usize)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", entry.name)))?;
            let raw = &payload[start..end];
            let count: usize = entry.shape.iter().product();
            let data = match entry.dtype.as_str() {
                "f32" => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                "f64" => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            if data.len() != count {
                return Err(Error::Checkpoint(format!(
                    "tensor {} holds {} values, shape needs {count}",
                    entry.name,
                    data.len()
                )));
            }
            sections[idx].push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        let [params, buffers, first_moments, second_moments] = sections;
        Ok(Self {
            version,
            train_config: header.train_config,
            network_config: header.network_config,
            step: header.step,
            stats: header.stats,
            rng: header.rng,
            params,
            buffers,
            optimizer_steps: header.optimizer_steps,
            first_moments,
            second_moments,
        })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
