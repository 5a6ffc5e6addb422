//! Checkpoint container: one file holding the run configuration, the
//! vocabulary, the fold index, and every named parameter tensor.
//!
//! Layout: magic `VCKP`, `u32` LE version, `u32` LE header length, that
//! many bytes of UTF-8 JSON (`{config, vocab, fold}`), then for each
//! parameter `[u32 LE name length, name bytes, tensor in VCAP format]`
//! until end of file. Saving what was loaded reproduces the parameter
//! payload byte for byte.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::decoder::{Decoder, DecoderConfig, DecoderError};
use crate::encoder::{Encoder, EncoderError};
use crate::rng::component_rng;
use crate::tensor::io::{read_tensor_f32, write_tensor_f32, TensorIoError};
use crate::tensor::{Tensor, TensorError};

pub const VCKP_MAGIC: &[u8; 4] = b"VCKP";
pub const VCKP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("checkpoint {path} has unsupported version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("checkpoint {path} header is invalid: {source}")]
    BadHeader {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("checkpoint {path}: parameter stream corrupt: {source}")]
    BadTensor {
        path: PathBuf,
        source: TensorIoError,
    },
    #[error("checkpoint parameter {name:?} has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint carries unknown parameter {0:?}")]
    UnknownParam(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vocab,
    fold: usize,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub fold: usize,
    /// Insertion order is the on-disk order, so save→load→save is
    /// byte-stable.
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            fold: self.fold,
        };
        let header_json =
            serde_json::to_vec(&header).expect("checkpoint header always serializes");
        w.write_all(VCKP_MAGIC).map_err(io_err)?;
        w.write_all(&VCKP_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        for (name, tensor) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            write_tensor_f32(&mut w, tensor).map_err(|source| CheckpointError::BadTensor {
                path: path.to_path_buf(),
                source,
            })?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != VCKP_MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != VCKP_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        r.read_exact(&mut word).map_err(io_err)?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(io_err)?;
        let header: Header =
            serde_json::from_slice(&header_json).map_err(|source| CheckpointError::BadHeader {
                path: path.to_path_buf(),
                source,
            })?;

        let mut params = Vec::new();
        loop {
            match r.read_exact(&mut word) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(io_err(e)),
            }
            let name_len = u32::from_le_bytes(word) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::BadHeader {
                path: path.to_path_buf(),
                source: serde_json::Error::io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "parameter name is not UTF-8",
                )),
            })?;
            let tensor =
                read_tensor_f32(&mut r).map_err(|source| CheckpointError::BadTensor {
                    path: path.to_path_buf(),
                    source,
                })?;
            params.push((name, tensor));
        }

        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            fold: header.fold,
            params,
        })
    }

    /// Snapshot a live model. Parameter data is copied out of the tape so
    /// later training steps don't mutate the checkpoint.
    pub fn from_model(
        config: &RunConfig,
        vocab: &Vocab,
        fold: usize,
        encoder: &Encoder<f32>,
        decoder: &Decoder<f32>,
    ) -> Checkpoint {
        let snapshot = |params: Vec<(String, Tensor<f32>)>| {
            params.into_iter().map(|(name, t)| {
                let copy = Tensor::new(t.shape().to_vec(), t.to_vec())
                    .expect("parameter tensors are well-formed");
                (name, copy)
            })
        };
        let mut params: Vec<(String, Tensor<f32>)> =
            snapshot(encoder.named_params()).collect();
        params.extend(snapshot(decoder.named_params()));
        Checkpoint {
            config: config.clone(),
            vocab: vocab.clone(),
            fold,
            params,
        }
    }

    /// The decoder shape this checkpoint implies: config values with the
    /// data-dependent fields (vocab size, encoder width) filled in.
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            vocab_size: self.vocab.size(),
            enc_dim: self.config.encoder.out_dim(),
            ..self.config.decoder.clone()
        }
    }

    /// Rebuild the model and install the stored parameters, checking that
    /// names and shapes agree exactly in both directions.
    pub fn build_model(&self) -> Result<(Encoder<f32>, Decoder<f32>), CheckpointError> {
        let encoder = Encoder::new(
            self.config.encoder.clone(),
            &mut component_rng(self.config.seed, "checkpoint.rebuild.encoder"),
        )?;
        let decoder = Decoder::new(
            self.decoder_config(),
            &mut component_rng(self.config.seed, "checkpoint.rebuild.decoder"),
        )?;

        let mut model_params: std::collections::HashMap<String, Tensor<f32>> = encoder
            .named_params()
            .into_iter()
            .chain(decoder.named_params())
            .collect();
        for (name, stored) in &self.params {
            let target = model_params
                .remove(name)
                .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
            if target.shape() != stored.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    got: stored.shape().to_vec(),
                    expected: target.shape().to_vec(),
                });
            }
            target.set_data(stored.to_vec())?;
        }
        if let Some(name) = model_params.into_keys().next() {
            return Err(CheckpointError::MissingParam(name));
        }
        Ok((encoder, decoder))
    }
}
