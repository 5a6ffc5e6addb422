//! Training objective: teacher-forced cross-entropy plus a noise-injection
//! penalty.
//!
//! The total loss is `main + beta · fake`. `main` is token-level
//! cross-entropy on the clean caption under teacher forcing. `fake` repeats
//! the forward pass with randomly corrupted teacher-forcing inputs but keeps
//! the *clean* targets, so the model is graded on recovering the right word
//! from a wrong history — the situation free-running decoding puts it in.
//! Both terms live on one tape; a single backward pass trains against both.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PAD_ID, UNK_ID};
use crate::decoder::{Decoder, DecoderError};
use crate::encoder::EncoderOutput;
use crate::tensor::{Real, Tensor, TensorError};

/// First id that denotes an actual word rather than a structural marker.
const FIRST_REGULAR_ID: u32 = UNK_ID + 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Weight of the fake-loss term.
    pub beta: f64,
    /// Per-token corruption probability.
    pub rate: f64,
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            beta: 0.1,
            rate: 0.1,
            enabled: true,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !self.rate.is_finite() || !(0.0..=1.0).contains(&self.rate) {
            return Err(ObjectiveError::InvalidRate(self.rate));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(ObjectiveError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("noise rate must lie in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("noise beta must be finite and non-negative, got {0}")]
    InvalidBeta(f64),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The two loss terms and their weighted sum, all scalar tensors on the
/// same tape (`total` is what training calls `backward` on).
#[derive(Debug, Clone)]
pub struct LossBreakdown<F: Real = f32> {
    pub main: Tensor<F>,
    /// `None` when the penalty was skipped (disabled or `beta == 0`).
    pub fake: Option<Tensor<F>>,
    pub total: Tensor<F>,
}

impl<F: Real> LossBreakdown<F> {
    pub fn main_value(&self) -> F {
        self.main.to_vec()[0]
    }

    pub fn fake_value(&self) -> Option<F> {
        self.fake.as_ref().map(|t| t.to_vec()[0])
    }

    pub fn total_value(&self) -> F {
        self.total.to_vec()[0]
    }
}

/// Return a copy of `tokens` where each position holding a regular word
/// (id ≥ 4) is replaced, with probability `rate`, by a *different* regular
/// id drawn uniformly. Structural tokens — pad, start, end, unk — are never
/// touched, so corruption cannot break the sequence frame. With fewer than
/// two regular ids in the vocabulary no distinct replacement exists and the
/// input is returned unchanged.
pub fn corrupt_targets(
    tokens: &[u32],
    vocab_size: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let mut out = tokens.to_vec();
    let regular = vocab_size.saturating_sub(FIRST_REGULAR_ID as usize) as u32;
    if regular < 2 {
        return out;
    }
    for slot in &mut out {
        if *slot >= FIRST_REGULAR_ID && rng.random::<f64>() < rate {
            // Sample from the regular range minus one slot, then skip over
            // the original so the draw is uniform on "regular ids ≠ original".
            let draw = rng.random_range(FIRST_REGULAR_ID..FIRST_REGULAR_ID + regular - 1);
            *slot = if draw >= *slot { draw + 1 } else { draw };
        }
    }
    out
}

/// Evaluate the full objective for one caption. `tokens` is the clean
/// encoded caption (`<start> … <end>`, possibly padded); `enc` is the
/// encoder output the decoder attends over.
pub fn combined_loss<F: Real>(
    decoder: &Decoder<F>,
    enc: &EncoderOutput<F>,
    tokens: &[u32],
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown<F>, ObjectiveError> {
    noise.validate()?;
    let clean = decoder.teacher_forced_forward(tokens, enc)?;
    let targets = &tokens[1..];
    let main = clean.logits.cross_entropy(targets, PAD_ID)?;

    if !noise.enabled || noise.beta == 0.0 {
        return Ok(LossBreakdown {
            total: main.clone(),
            main,
            fake: None,
        });
    }

    let corrupted = corrupt_targets(tokens, decoder.config().vocab_size, noise.rate, rng);
    let noisy = decoder.teacher_forced_forward(&corrupted, enc)?;
    // Clean targets on purpose: the penalty grades recovery, not imitation
    // of the corruption.
    let fake = noisy.logits.cross_entropy(targets, PAD_ID)?;
    let beta = F::from(noise.beta).expect("beta fits in F");
    let total = main.add(&fake.scale(beta))?;
    Ok(LossBreakdown {
        main,
        fake: Some(fake),
        total,
    })
}
