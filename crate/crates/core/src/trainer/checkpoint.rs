//! Binary checkpoint: `PSCK` magic, `u16` version, `u32` header length, a JSON
//! header (configs, tensor directory, epoch, training config), the tensors as
//! little-endian `f32`, and a trailing SHA-256 of everything before it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig, Moments};
use super::TrainConfig;
use crate::digest::sha256;
use crate::error::{Error, Result};
use crate::model::{
    Autoencoder, Decoder, DecoderConfig, Encoder, EncoderConfig, ModelOptions, ParamGroup,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Autoencoder<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Completed training epochs.
    pub epoch: usize,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    decoder: DecoderConfig,
    encoders: BTreeMap<String, EncoderConfig>,
    frozen: Vec<ParamGroup>,
    options: ModelOptions,
    epoch: usize,
    train_config: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

fn running_names(stage: usize) -> (String, String) {
    let base = format!("decoder/stage{:02}", stage + 1);
    (
        format!("{base}/running_mean"),
        format!("{base}/running_var"),
    )
}

impl Checkpoint {
    pub fn new(model: Autoencoder<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            epoch: 0,
            train_config: None,
        }
    }

    fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = self
            .model
            .parameters()
            .into_iter()
            .map(|(n, _, t)| (n, t.data()))
            .collect();
        for (i, s) in self.model.decoder().stages.iter().enumerate() {
            if let Some(bn) = &s.norm {
                let (m, v) = running_names(i);
                out.push((m, &bn.state.running_mean));
                out.push((v, &bn.state.running_var));
            }
        }
        if let Some(opt) = &self.optimizer {
            for (name, mo) in &opt.moments {
                out.push((format!("adam/m/{name}"), &mo.m));
                out.push((format!("adam/v/{name}"), &mo.v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            decoder: self.model.decoder().config.clone(),
            encoders: self
                .model
                .encoders()
                .iter()
                .map(|(k, e)| (k.clone(), e.config.clone()))
                .collect(),
            frozen: self.model.frozen_groups().iter().cloned().collect(),
            options: *self.model.options(),
            epoch: self.epoch,
            train_config: self.train_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                steps: o.moments.iter().map(|(k, m)| (k.clone(), m.step)).collect(),
            }),
            tensors: tensors
                .iter()
                .map(|(n, d)| Entry {
                    name: n.clone(),
                    len: d.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = tensors.iter().map(|(_, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + body + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, d) in &tensors {
            for v in d.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = sha256(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let truncated = || Error::Format("checkpoint is truncated".into());
        let json = bytes.get(PREAMBLE..PREAMBLE + hlen).ok_or_else(truncated)?;
        let header: Option<Header> = serde_json::from_slice(json).ok();
        if let Some(h) = &header {
            let body: usize = h.tensors.iter().map(|e| e.len * 4).sum();
            let expected = PREAMBLE + hlen + body + DIGEST_LEN;
            if bytes.len() < expected {
                return Err(truncated());
            }
            if bytes.len() > expected {
                return Err(Error::Integrity(format!(
                    "{} unexpected trailing bytes",
                    bytes.len() - expected
                )));
            }
        }
        if bytes.len() < PREAMBLE + hlen + DIGEST_LEN {
            return Err(truncated());
        }
        let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if sha256(content) != digest {
            return Err(Error::Integrity("content digest does not match".into()));
        }
        let header = header.ok_or_else(|| Error::Format("unreadable checkpoint header".into()))?;
        Self::assemble(header, &content[PREAMBLE + hlen..])
    }

    fn assemble(header: Header, body: &[u8]) -> Result<Self> {
        let mut values: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let lens: BTreeMap<&str, usize> = header
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e.len))
            .collect();
        let mut pos = 0;
        for e in &header.tensors {
            let raw = &body[pos..pos + e.len * 4];
            pos += e.len * 4;
            let v = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            values.insert(e.name.clone(), v);
        }
        let mut take = |name: &str, len: usize| -> Result<Vec<f32>> {
            let v = values
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if v.len() != len {
                return Err(Error::Format(format!(
                    "tensor `{name}` has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };

        let decoder = Decoder::init(&header.decoder, 0)?;
        let encoders = header
            .encoders
            .iter()
            .map(|(id, cfg)| Ok((id.clone(), Encoder::init(cfg, 0)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let frozen: BTreeSet<ParamGroup> = header.frozen.iter().cloned().collect();
        let mut model = Autoencoder::from_parts(decoder, encoders, frozen, header.options)?;
        for (name, _, t) in model.parameters_mut() {
            let v = take(&name, t.numel())?;
            t.data_mut().copy_from_slice(&v);
        }
        for (i, s) in model.decoder_mut().stages.iter_mut().enumerate() {
            if let Some(bn) = &mut s.norm {
                let (m, v) = running_names(i);
                bn.state.running_mean = take(&m, bn.state.running_mean.len())?;
                bn.state.running_var = take(&v, bn.state.running_var.len())?;
            }
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut opt = Adam::new(oh.config);
                for (name, &step) in &oh.steps {
                    let len = lens
                        .get(format!("adam/m/{name}").as_str())
                        .copied()
                        .unwrap_or(0);
                    let m = take(&format!("adam/m/{name}"), len)?;
                    let v = take(&format!("adam/v/{name}"), len)?;
                    opt.moments.insert(name.clone(), Moments { m, v, step });
                }
                Some(opt)
            }
        };
        if let Some(extra) = values.keys().next() {
            return Err(Error::Format(format!(
                "unexpected tensor `{extra}` in checkpoint"
            )));
        }
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            train_config: header.train_config.clone(),
        })
    }

    /// Loads and checks that the stored decoder matches `expected`.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &DecoderConfig) -> Result<Self> {
        let ck = Self::from_bytes(bytes)?;
        if &ck.model.decoder().config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint decoder {:?} differs from the expected {:?}",
                ck.model.decoder().config.output_dims(),
                expected.output_dims()
            )));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
