//! Named-tensor checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, JSON
//! manifest, then every tensor as little-endian `f64` in manifest order.
//! Optimizer moments are stored as extra tensors under `adamw.m/` and
//! `adamw.v/`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, OptimizerState, ParameterSet};

pub const MAGIC: &[u8; 8] = b"DUALCKP1";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1: &str = "adamw.m/";
const MOMENT2: &str = "adamw.v/";

fn is_moment(name: &str) -> bool {
    name.starts_with(MOMENT1) || name.starts_with(MOMENT2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub frozen: bool,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub fingerprint: String,
    pub step: u64,
    pub vocab: Vec<String>,
    pub optimizer: Option<OptimizerManifest>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<f64>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `model` in visiting order, followed
    /// by the optimizer moments if given.
    pub fn capture<P: ParameterSet + ?Sized>(
        model: &P,
        optimizer: Option<&OptimizerState>,
        fingerprint: &str,
        vocab: &[String],
    ) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: String, value: &Matrix, frozen: bool| {
            tensors.push(TensorEntry {
                name,
                shape: [value.rows(), value.cols()],
                frozen,
                offset: (data.len() * 8) as u64,
            });
            data.extend_from_slice(value.data());
        };
        model.visit(&mut |p| push(p.name.clone(), &p.value, p.frozen));
        if let Some(opt) = optimizer {
            for (name, (m, v)) in &opt.moments {
                push(format!("{MOMENT1}{name}"), m, true);
                push(format!("{MOMENT2}{name}"), v, true);
            }
        }
        Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                fingerprint: fingerprint.to_string(),
                step: optimizer.map_or(0, |o| o.step),
                vocab: vocab.to_vec(),
                optimizer: optimizer.map(|o| OptimizerManifest {
                    lr: o.lr,
                    weight_decay: o.weight_decay,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                }),
                tensors,
            },
            data,
        }
    }

    /// Rebuilds the stored optimizer state, if any.
    pub fn optimizer_state(&self) -> Result<Option<OptimizerState>> {
        let Some(o) = &self.manifest.optimizer else {
            return Ok(None);
        };
        let mut state = OptimizerState::new(o.lr, o.weight_decay);
        state.beta1 = o.beta1;
        state.beta2 = o.beta2;
        state.eps = o.eps;
        state.step = o.step;
        for t in &self.manifest.tensors {
            if let Some(name) = t.name.strip_prefix(MOMENT1) {
                let v = self
                    .tensor(&format!("{MOMENT2}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("second moment of {name} missing")))?;
                let m = self.tensor(&t.name).expect("listed tensor exists");
                state.moments.insert(name.to_string(), (m, v));
            }
        }
        Ok(Some(state))
    }

    pub fn tensor(&self, name: &str) -> Option<Matrix> {
        let e = self.manifest.tensors.iter().find(|t| t.name == name)?;
        let start = e.offset as usize / 8;
        let len = e.shape[0] * e.shape[1];
        Matrix::new(e.shape[0], e.shape[1], self.data[start..start + len].to_vec()).ok()
    }

    /// Errors on a fingerprint mismatch unless `allow_mismatch` is set.
    pub fn check_fingerprint(&self, expected: &str, allow_mismatch: bool) -> Result<()> {
        if self.manifest.fingerprint == expected {
            return Ok(());
        }
        let msg = format!(
            "checkpoint fingerprint {} does not match config fingerprint {expected}",
            self.manifest.fingerprint
        );
        if allow_mismatch {
            log::warn!("{msg} (override set)");
            Ok(())
        } else {
            Err(Error::Checkpoint(msg))
        }
    }

    /// Copies stored values into `model`, which must hold exactly the
    /// same parameter names and shapes.
    pub fn restore_into<P: ParameterSet + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut err = None;
        let mut seen = 0usize;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            seen += 1;
            match self.tensor(&p.name) {
                Some(m) if m.shape() == p.value.shape() => p.value = m,
                Some(m) => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {} is {}x{} in the checkpoint but {}x{} in the model",
                        p.name,
                        m.rows(),
                        m.cols(),
                        p.value.rows(),
                        p.value.cols()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("checkpoint has no tensor {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let stored = self.manifest.tensors.iter().filter(|t| !is_moment(&t.name)).count();
        if seen != stored {
            return Err(Error::Checkpoint(format!("checkpoint holds {stored} parameters, model has {seen}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
        }
        let raw = &bytes[16 + mlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of doubles"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut expected = 0u64;
        for t in &manifest.tensors {
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("tensor {} has offset {}, expected {expected}", t.name, t.offset)));
            }
            expected += (t.shape[0] * t.shape[1] * 8) as u64;
        }
        if expected as usize != raw.len() {
            return Err(bad("data section size does not match the manifest"));
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over names and values of the parameters whose frozen flag
/// equals `frozen`.
pub fn tensor_hash<P: ParameterSet + ?Sized>(model: &P, frozen: bool) -> String {
    let mut h = Sha256::new();
    model.visit(&mut |p| {
        if p.frozen == frozen {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// SHA-256 of a value's canonical JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}
