//! DVKC checkpoint files.
//!
//! ```text
//! "DVKC"  u16 version  u32 header length  JSON header
//! repeated: u32 name length, UTF-8 name, DVKT tensor
//! ```
//! All integers little-endian. Blocks run to end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{read_tensor_from, write_tensor_to, NormalizationParams, Tensor};
use crate::unet::train::EpochRecord;
use crate::unet::{build_unet, UNetSpec};

pub const DVKC_MAGIC: [u8; 4] = *b"DVKC";
pub const DVKC_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: OptimizerConfig,
    pub t: u64,
    pub mu_product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: UNetSpec,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub record: Option<EpochRecord>,
    pub optimizer: Option<OptimizerHeader>,
    /// `[data_min, data_max, low, high]` of the training inputs.
    pub density_norm: Option<[f64; 4]>,
    pub dose_norm: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

pub(crate) fn norm_array(p: &NormalizationParams) -> [f64; 4] {
    [p.data_min, p.data_max, p.low, p.high]
}

fn norm_from(a: Option<[f64; 4]>) -> Result<Option<NormalizationParams>> {
    a.map(|[a, b, c, d]| NormalizationParams::new(a, b, c, d)).transpose()
}

impl Checkpoint {
    /// Snapshot of parameters, running statistics and (optionally) optimizer buffers.
    pub fn capture(net: &Network, spec: &UNetSpec, optimizer: Option<&Optimizer>, epoch: usize) -> Self {
        let mut tensors: Vec<(String, Tensor)> = net.params().map(|p| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(net.buffers());
        let names: Vec<String> = net.params().map(|p| p.name.clone()).collect();
        if let Some(o) = optimizer {
            tensors.extend(o.state_tensors(&names));
        }
        Checkpoint {
            header: CheckpointHeader {
                spec: spec.clone(),
                epoch,
                best_val_loss: None,
                record: None,
                optimizer: optimizer.map(|o| OptimizerHeader {
                    config: o.config,
                    t: o.t,
                    mu_product: o.mu_product,
                }),
                density_norm: None,
                dose_norm: None,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn norms(&self) -> Result<(Option<NormalizationParams>, Option<NormalizationParams>)> {
        Ok((norm_from(self.header.density_norm)?, norm_from(self.header.dose_norm)?))
    }

    /// Rebuilds the network from the spec echo and loads every parameter and buffer.
    pub fn restore(&self) -> Result<Network> {
        let mut net = build_unet(&self.header.spec)?;
        for p in net.params_mut() {
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter block '{}'", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!("{}: stored {:?}, network {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        for (name, _) in net.buffers() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks buffer block '{name}'")))?
                .clone();
            net.set_buffer(&name, &t)?;
        }
        Ok(net)
    }

    /// Optimizer with its buffers, when the checkpoint carries one.
    pub fn restore_optimizer(&self, net: &Network) -> Result<Option<Optimizer>> {
        let Some(h) = self.header.optimizer else {
            return Ok(None);
        };
        let mut o = Optimizer::new(h.config)?;
        o.t = h.t;
        o.mu_product = h.mu_product;
        let names: Vec<String> = net.params().map(|p| p.name.clone()).collect();
        o.restore_state(&names, |n| self.tensor(n).cloned())?;
        Ok(Some(o))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&DVKC_MAGIC)?;
        w.write_all(&DVKC_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor_to(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != DVKC_MAGIC {
            return Err(Error::Format("not a DVKC checkpoint".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != DVKC_VERSION {
            return Err(Error::Version {
                found: version as u32,
                expected: DVKC_VERSION as u32,
            });
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut tensors = Vec::new();
        loop {
            match r.read_exact(&mut b4) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            tensors.push((name, read_tensor_from(&mut r)?));
        }
        Ok(Checkpoint { header, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.write_to(BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read_from(BufReader::new(File::open(path)?))
}
