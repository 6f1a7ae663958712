//! Checkpoints: a JSON envelope next to a little-endian `f64` payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::fsio;
use crate::pinn::PinnModel;

const FORMAT: &str = "pinnev-checkpoint";
const VERSION: u32 = 1;

/// Parameters and optimizer state of a model at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PinnModel,
    pub params: Vec<Tensor>,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    fingerprint: String,
    epoch: usize,
    loss: f64,
    model: PinnModel,
    arrays: Vec<ArrayEntry>,
    adam: Option<(AdamConfig, u64)>,
    payload_len: usize,
    payload_sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let layout = self.model.layout();
        self.model.check_params(&self.params)?;
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, t: &Tensor, payload: &mut Vec<u8>| {
            arrays.push(ArrayEntry { name, rows: t.rows, cols: t.cols, offset });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.data.len();
        };
        for (info, p) in layout.iter().zip(&self.params) {
            push(info.name.clone(), p, &mut payload);
        }
        if let Some(a) = &self.adam {
            for (info, m) in layout.iter().zip(&a.m) {
                push(format!("adam.m.{}", info.name), m, &mut payload);
            }
            for (info, v) in layout.iter().zip(&a.v) {
                push(format!("adam.v.{}", info.name), v, &mut payload);
            }
        }
        let env = Envelope {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: self.fingerprint(),
            epoch: self.epoch,
            loss: self.loss,
            model: self.model.clone(),
            arrays,
            adam: self.adam.as_ref().map(|a| (a.config, a.step)),
            payload_len: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let (json, bin) = paths(stem);
        fsio::write_atomic(&bin, &payload)?;
        fsio::write_atomic(&json, serde_json::to_string_pretty(&env)?.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let (json, bin) = paths(stem);
        let env: Envelope = serde_json::from_str(&fsio::read_string(&json)?)?;
        if env.format != FORMAT || env.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", env.format, env.version)));
        }
        let payload = fsio::read(&bin)?;
        if payload.len() != env.payload_len || hex::encode(Sha256::digest(&payload)) != env.payload_sha256 {
            return Err(Error::Checkpoint(format!("{} does not match its envelope", bin.display())));
        }
        if env.model.fingerprint() != env.fingerprint {
            return Err(Error::FingerprintMismatch { expected: env.fingerprint, found: env.model.fingerprint() });
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut arrays = Vec::new();
        for a in &env.arrays {
            let end = a.offset + a.rows * a.cols;
            let data = floats
                .get(a.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the payload", a.name)))?;
            arrays.push(Tensor::new(a.rows, a.cols, data.to_vec())?);
        }
        let k = env.model.layout().len();
        let params: Vec<Tensor> = arrays.iter().take(k).cloned().collect();
        env.model.check_params(&params)?;
        let adam = match env.adam {
            Some((config, step)) => {
                if arrays.len() != 3 * k {
                    return Err(Error::Checkpoint("optimizer state is incomplete".into()));
                }
                Some(AdamState { config, m: arrays[k..2 * k].to_vec(), v: arrays[2 * k..].to_vec(), step })
            }
            None => None,
        };
        Ok(Checkpoint { model: env.model, params, adam, epoch: env.epoch, loss: env.loss })
    }
}

/// Copies parameters from `ckpt` into a model with the same architecture.
/// The optimizer restarts from zero moments.
pub fn warm_start(ckpt: &Checkpoint, model: &PinnModel) -> Result<Vec<Tensor>> {
    let (expected, found) = (model.fingerprint(), ckpt.fingerprint());
    if expected != found {
        return Err(Error::FingerprintMismatch { expected, found });
    }
    model.check_params(&ckpt.params)?;
    Ok(ckpt.params.clone())
}
