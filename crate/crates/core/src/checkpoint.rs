//! Versioned checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"SEPCONV\0"                       magic
//! u16 major, u16 minor, u16 patch    format version (little endian)
//! u64 header length                  little endian
//! header                             UTF-8 JSON: config, metadata, optimizer
//!                                    hyperparameters, tensor table
//! payload                            f32 LE: parameters, then (if present)
//!                                    the optimizer's m and u in the same order
//! ```
//!
//! Readers refuse a different major version or a newer minor version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{ModelParameters, NetworkConfig};
use crate::nn::Conv2d;
use crate::train::{AdaMaxConfig, OptimizerState};

pub const MAGIC: &[u8; 8] = b"SEPCONV\0";
pub const FORMAT_VERSION: [u16; 3] = [1, 0, 0];

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: u64,
    /// Label of the loss the weights were last optimized for, e.g. `l1`.
    pub loss: String,
    pub loss_config: Option<LossConfig>,
    pub dataset_id: Option<String>,
    /// [`Checkpoint::id`] of the checkpoint this run started from.
    pub parent: Option<String>,
    pub feature_tap: Option<usize>,
    pub seed: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Epoch at which the current training or fine-tuning run started.
    pub run_start_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub optimizer: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdaMaxConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    meta: CheckpointMeta,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn version_string(v: [u16; 3]) -> String {
    format!("{}.{}.{}", v[0], v[1], v[2])
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn params_payload(params: &ModelParameters) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, t) in params.tensors() {
        push_f32(&mut out, t);
    }
    out
}

/// Identifier of a set of weights: SHA-256 of the parameter payload, hex.
pub fn params_id(params: &ModelParameters) -> String {
    hex::encode(Sha256::digest(params_payload(params)))
}

fn zero_params(config: &NetworkConfig) -> Result<ModelParameters> {
    config.validate()?;
    let convs = config
        .conv_shapes()
        .into_iter()
        .map(|(i, o)| Conv2d::from_parts(Array2::zeros((o, i * 9)), Array1::zeros(o)))
        .collect();
    Ok(ModelParameters {
        config: config.clone(),
        convs,
    })
}

impl Checkpoint {
    pub fn new(
        params: ModelParameters,
        optimizer: Option<OptimizerState>,
        meta: CheckpointMeta,
    ) -> Self {
        Checkpoint {
            params,
            optimizer,
            meta,
        }
    }

    pub fn id(&self) -> String {
        params_id(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let tensors = self.params.tensors();
        if let Some(opt) = &self.optimizer {
            let sizes: Vec<usize> = tensors.iter().map(|(_, t)| t.len()).collect();
            if opt.sizes() != sizes {
                return Err(Error::dim(
                    "optimizer state does not match the parameter layout",
                ));
            }
        }
        let header = Header {
            config: self.params.config.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in FORMAT_VERSION {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&params_payload(&self.params));
        if let Some(opt) = &self.optimizer {
            for m in &opt.m {
                push_f32(&mut out, m);
            }
            for u in &opt.u {
                push_f32(&mut out, u);
            }
        }
        Ok(out)
    }

    /// Parse a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 22 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let found: [u16; 3] =
            std::array::from_fn(|i| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]));
        if found[0] != FORMAT_VERSION[0] || found[1] > FORMAT_VERSION[1] {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version_string(found),
                expected: version_string(FORMAT_VERSION),
            });
        }
        let header_len = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes")) as usize;
        let body = &bytes[22..];
        if body.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        let mut payload = &body[header_len..];

        let mut params = zero_params(&header.config).map_err(|e| bad(e.to_string()))?;
        let mut take = |dst: &mut [f32], name: &str| -> Result<()> {
            let n = dst.len() * 4;
            if payload.len() < n {
                return Err(bad(format!("payload truncated in tensor {name}")));
            }
            for (d, c) in dst.iter_mut().zip(payload[..n].chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
            payload = &payload[n..];
            Ok(())
        };
        {
            let mut tensors = params.tensors_mut();
            if tensors.len() != header.tensors.len() {
                return Err(bad("tensor table does not match the configuration".into()));
            }
            for ((name, dst), entry) in tensors.iter_mut().zip(&header.tensors) {
                if *name != entry.name || dst.len() != entry.len {
                    return Err(bad(format!("tensor table mismatch at {}", entry.name)));
                }
                take(dst, name)?;
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut state = OptimizerState::new(h.config, header.tensors.iter().map(|t| t.len));
                state.step = h.step;
                for (m, e) in state.m.iter_mut().zip(&header.tensors) {
                    take(m, &e.name)?;
                }
                for (u, e) in state.u.iter_mut().zip(&header.tensors) {
                    take(u, &e.name)?;
                }
                Some(state)
            }
        };
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            params,
            optimizer,
            meta: header.meta,
        })
    }

    /// Write atomically (temporary file in the same directory, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    fn small() -> ModelParameters {
        build_network(
            &NetworkConfig {
                encoder_channels: vec![2, 3, 3, 4, 4],
                kernel_size: 3,
                input_channels: 6,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let params = small();
        let mut opt = OptimizerState::new(
            AdaMaxConfig::default(),
            params.tensors().iter().map(|t| t.1.len()),
        );
        opt.step = 7;
        opt.m[3][0] = 0.25;
        opt.u[5][1] = 3.5;
        let ck = Checkpoint::new(
            params,
            Some(opt),
            CheckpointMeta {
                epoch: 3,
                loss: "l1".into(),
                parent: Some("abc".into()),
                ..Default::default()
            },
        );
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.id(), ck.id());
    }

    #[test]
    fn version_and_corruption_errors() {
        let ck = Checkpoint::new(small(), None, CheckpointMeta::default());
        let mut a = ck.to_bytes().unwrap();
        let p = Path::new("x.ckpt");

        let mut newer = a.clone();
        newer[8..10].copy_from_slice(&2u16.to_le_bytes());
        assert!(
            matches!(Checkpoint::from_bytes(&newer, p), Err(Error::CheckpointVersion { found, .. }) if found == "2.0.0")
        );

        assert!(matches!(
            Checkpoint::from_bytes(&a[..a.len() - 3], p),
            Err(Error::Checkpoint { .. })
        ));
        a[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&a, p),
            Err(Error::Checkpoint { .. })
        ));
    }
}
