//! Caption generation: greedy search, beam search, and attention-map
//! export.
//!
//! Beam scores are raw sums of per-token log-probabilities — no length
//! normalization — and all tie-breaks are deterministic (higher logprob
//! first, then lexicographically smaller token sequence), so tiny instances
//! can be checked exactly against brute-force enumeration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{END_ID, START_ID};
use crate::decoder::{Decoder, DecoderError, DecoderState};
use crate::encoder::EncoderOutput;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Cap on total sequence length, start marker included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 2,
            max_len: 30,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.beam_width < 1 {
            return Err(InferError::BadBeamWidth(self.beam_width));
        }
        if self.max_len < 2 {
            return Err(InferError::BadMaxLen(self.max_len));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("beam width must be at least 1, got {0}")]
    BadBeamWidth(usize),
    #[error("max_len must be at least 2, got {0}")]
    BadMaxLen(usize),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

/// One search hypothesis. `state` is ready to consume the last token of
/// `tokens`; `alphas` holds the attention of every step taken so far.
#[derive(Debug, Clone)]
pub struct Beam<F: Real = f32> {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub state: DecoderState<F>,
    pub finished: bool,
    pub alphas: Vec<Tensor<F>>,
}

impl<F: Real> Beam<F> {
    fn live(&self, max_len: usize) -> bool {
        !self.finished && self.tokens.len() < max_len
    }
}

fn log_softmax_f64<F: Real>(logits: &Tensor<F>) -> Vec<f64> {
    let xs: Vec<f64> = logits
        .to_vec()
        .iter()
        .map(|x| x.to_f64().expect("logit fits in f64"))
        .collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Higher logprob first; equal scores fall back to the lexicographically
/// smaller token sequence so results are fully deterministic.
fn beam_order<F: Real>(a: &Beam<F>, b: &Beam<F>) -> std::cmp::Ordering {
    b.logprob
        .total_cmp(&a.logprob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search. Live beams expand over the whole vocabulary each
/// step; finished (or length-capped) beams are frozen and keep competing in
/// the top-k. Returns the best beam under [`beam_order`].
pub fn beam_search<F: Real>(
    decoder: &Decoder<F>,
    enc: &EncoderOutput<F>,
    cfg: &DecodeConfig,
) -> Result<Beam<F>, InferError> {
    cfg.validate()?;
    let mut beams = vec![Beam {
        tokens: vec![START_ID],
        logprob: 0.0,
        state: decoder.init_state(enc)?,
        finished: false,
        alphas: Vec::new(),
    }];

    while beams.iter().any(|b| b.live(cfg.max_len)) {
        let mut candidates: Vec<Beam<F>> = Vec::new();
        for beam in &beams {
            if !beam.live(cfg.max_len) {
                candidates.push(beam.clone());
                continue;
            }
            let last = *beam.tokens.last().expect("beam holds the start marker");
            let (logits, next) = decoder.decode_step(last, &beam.state, enc)?;
            let alpha = next.alpha.clone().expect("decode_step sets alpha");
            for (tok, lp) in log_softmax_f64(&logits).into_iter().enumerate() {
                let tok = tok as u32;
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let mut alphas = beam.alphas.clone();
                alphas.push(alpha.clone());
                candidates.push(Beam {
                    tokens,
                    logprob: beam.logprob + lp,
                    state: next.clone(),
                    finished: tok == END_ID,
                    alphas,
                });
            }
        }
        candidates.sort_by(beam_order);
        candidates.truncate(cfg.beam_width);
        beams = candidates;
    }

    beams.sort_by(beam_order);
    Ok(beams.into_iter().next().expect("at least one beam survives"))
}

/// Argmax decoding: the locally best token each step, smallest id on ties.
/// Definitionally identical to `beam_search` with width 1.
pub fn greedy_decode<F: Real>(
    decoder: &Decoder<F>,
    enc: &EncoderOutput<F>,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<Tensor<F>>), InferError> {
    if max_len < 2 {
        return Err(InferError::BadMaxLen(max_len));
    }
    let mut tokens = vec![START_ID];
    let mut alphas = Vec::new();
    let mut state = decoder.init_state(enc)?;
    while tokens.len() < max_len {
        let (logits, next) = decoder.decode_step(*tokens.last().unwrap(), &state, enc)?;
        let values = logits.to_vec();
        let mut best = 0usize;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
        alphas.push(next.alpha.clone().expect("decode_step sets alpha"));
        state = next;
        if best as u32 == END_ID {
            break;
        }
    }
    Ok((tokens, alphas))
}

/// Write one grayscale PGM per generated token: α reshaped to the feature
/// grid, min-max normalized to 0..255 (a flat map degenerates to all
/// zeros), and nearest-neighbor upsampled to `image_size²`. Files are named
/// `{step}_{token}.pgm` under `out_dir`.
pub fn export_attention<F: Real>(
    alphas: &[Tensor<F>],
    labels: &[String],
    grid_h: usize,
    grid_w: usize,
    image_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, InferError> {
    assert_eq!(
        alphas.len(),
        labels.len(),
        "one label per attention vector required"
    );
    std::fs::create_dir_all(out_dir).map_err(|source| InferError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::with_capacity(alphas.len());
    for (idx, (alpha, label)) in alphas.iter().zip(labels).enumerate() {
        let values: Vec<f64> = alpha
            .to_vec()
            .iter()
            .map(|v| v.to_f64().expect("alpha fits in f64"))
            .collect();
        assert_eq!(values.len(), grid_h * grid_w, "alpha does not fit the grid");
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let gray: Vec<u8> = values
            .iter()
            .map(|v| {
                if span <= 0.0 {
                    0
                } else {
                    ((v - min) / span * 255.0).round() as u8
                }
            })
            .collect();

        let mut pgm = format!("P5\n{image_size} {image_size}\n255\n").into_bytes();
        for y in 0..image_size {
            let gy = y * grid_h / image_size;
            for x in 0..image_size {
                let gx = x * grid_w / image_size;
                pgm.push(gray[gy * grid_w + gx]);
            }
        }
        let path = out_dir.join(format!("{idx}_{label}.pgm"));
        std::fs::write(&path, pgm).map_err(|source| InferError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Stream a decoded caption as UTF-8 to any writer (used by the CLI for
/// stdout and JSONL reports).
pub fn write_caption(mut out: impl std::io::Write, caption: &str) -> std::io::Result<()> {
    writeln!(out, "{caption}")
}
