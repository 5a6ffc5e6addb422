//! Attention-based LSTM caption decoder.
//!
//! At each step the decoder embeds the previous token, attends over the
//! encoder's feature grid using its *previous* hidden state (unscaled dot
//! products — the attended summary is a convex combination of feature rows),
//! feeds `[embedding; attended]` to the LSTM, and predicts the next token
//! from `[new hidden; attended]`. The attended vector thus enters both the
//! recurrence and the output projection ("late fusion").

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::START_ID;
use crate::encoder::EncoderOutput;
use crate::nn::{linear, uniform_param};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Token classes N, including the four specials.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Encoder feature width D; must match the encoder output.
    pub enc_dim: usize,
    /// Stacked LSTM layers.
    pub layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab_size: 4,
            embed_dim: 64,
            hidden_dim: 128,
            enc_dim: 64,
            layers: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("decoder config field {field} must be positive")]
    ZeroField { field: &'static str },
    #[error("vocab size {vocab} is below the 4 reserved special tokens")]
    VocabTooSmall { vocab: usize },
    #[error("token id {id} out of range for vocab of {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("token sequence needs at least a start token and one target")]
    TooShort,
    #[error("token sequence must begin with the start token")]
    MissingStart,
    #[error("encoder features have width {got}, decoder expects {expected}")]
    EncWidthMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("enc_dim", self.enc_dim),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(DecoderError::ZeroField { field });
            }
        }
        if self.vocab_size < 4 {
            return Err(DecoderError::VocabTooSmall {
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Recurrent state: one hidden and one cell row per LSTM layer, plus the
/// attention weights of the step that produced it.
#[derive(Debug, Clone)]
pub struct DecoderState<F: Real = f32> {
    /// `[layers × hidden]`; the last row is the top layer's hidden vector.
    pub h: Tensor<F>,
    pub c: Tensor<F>,
    /// `[L]` weights over encoder positions; `None` before the first step.
    pub alpha: Option<Tensor<F>>,
}

impl<F: Real> DecoderState<F> {
    /// Hidden vector of the top layer, `[1 × hidden]`.
    pub fn top_h(&self) -> Tensor<F> {
        let layers = self.h.shape()[0];
        self.h
            .slice_rows(layers - 1, layers)
            .expect("state has at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<F: Real = f32> {
    /// `[1 × enc_dim]` convex combination of encoder feature rows.
    pub h_attended: Tensor<F>,
    /// `[L]`, non-negative, sums to 1.
    pub alpha: Tensor<F>,
}

/// One teacher-forced pass: `T−1` next-token logit rows and the attention
/// weights of every step.
pub struct TeacherForcedOutput<F: Real = f32> {
    pub logits: Tensor<F>,
    pub alphas: Vec<Tensor<F>>,
}

struct LstmLayer<F: Real> {
    w_x: Tensor<F>,
    w_h: Tensor<F>,
    bias: Tensor<F>,
}

pub struct Decoder<F: Real = f32> {
    cfg: DecoderConfig,
    embedding: Tensor<F>,
    init_w_h: Tensor<F>,
    init_b_h: Tensor<F>,
    init_w_c: Tensor<F>,
    init_b_c: Tensor<F>,
    /// Maps hidden → enc_dim for scoring; absent when the widths agree.
    attn_proj: Option<Tensor<F>>,
    lstm: Vec<LstmLayer<F>>,
    out_w: Tensor<F>,
    out_b: Tensor<F>,
}

impl<F: Real> Decoder<F> {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let (n, e, h, d) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.enc_dim);
        let lh = cfg.layers * h;
        let embedding = uniform_param(rng, vec![n, e], e);
        let init_w_h = uniform_param(rng, vec![d, lh], d);
        let init_b_h = uniform_param(rng, vec![1, lh], d);
        let init_w_c = uniform_param(rng, vec![d, lh], d);
        let init_b_c = uniform_param(rng, vec![1, lh], d);
        let attn_proj = (h != d).then(|| uniform_param(rng, vec![h, d], h));
        let mut lstm = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let input = if layer == 0 { e + d } else { h };
            lstm.push(LstmLayer {
                w_x: uniform_param(rng, vec![input, 4 * h], input),
                w_h: uniform_param(rng, vec![h, 4 * h], h),
                bias: uniform_param(rng, vec![1, 4 * h], h),
            });
        }
        let out_w = uniform_param(rng, vec![h + d, n], h + d);
        let out_b = uniform_param(rng, vec![1, n], h + d);
        Ok(Decoder {
            cfg,
            embedding,
            init_w_h,
            init_b_h,
            init_w_c,
            init_b_c,
            attn_proj,
            lstm,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn check_enc(&self, enc: &EncoderOutput<F>) -> Result<(), DecoderError> {
        let got = enc.features.shape()[1];
        if got != self.cfg.enc_dim {
            return Err(DecoderError::EncWidthMismatch {
                got,
                expected: self.cfg.enc_dim,
            });
        }
        Ok(())
    }

    /// Initial state from mean-pooled encoder features:
    /// `h = tanh(mean·W_h + b_h)`, `c = tanh(mean·W_c + b_c)`.
    pub fn init_state(&self, enc: &EncoderOutput<F>) -> Result<DecoderState<F>, DecoderError> {
        self.check_enc(enc)?;
        let (layers, hidden) = (self.cfg.layers, self.cfg.hidden_dim);
        let mean = enc.features.mean_rows()?;
        let h = linear(&mean, &self.init_w_h, &self.init_b_h)?
            .tanh()
            .reshape(vec![layers, hidden])?;
        let c = linear(&mean, &self.init_w_c, &self.init_b_c)?
            .tanh()
            .reshape(vec![layers, hidden])?;
        Ok(DecoderState { h, c, alpha: None })
    }

    /// Dot-product attention of a `[1×hidden]` query over the feature grid:
    /// `score_l = ⟨enc_l, project(h)⟩`, `α = softmax(scores)`,
    /// `h_attended = Σ α_l·enc_l`. Scores are deliberately unscaled.
    pub fn attend(
        &self,
        h: &Tensor<F>,
        enc: &EncoderOutput<F>,
    ) -> Result<AttentionOutput<F>, DecoderError> {
        self.check_enc(enc)?;
        let query = match &self.attn_proj {
            Some(w) => h.matmul(w)?,
            None => h.clone(),
        };
        let scores = enc.features.matmul(&query.transpose()?)?; // [L×1]
        let alpha_col = scores.softmax(0)?;
        let h_attended = alpha_col.transpose()?.matmul(&enc.features)?;
        let l = enc.features.shape()[0];
        Ok(AttentionOutput {
            h_attended,
            alpha: alpha_col.reshape(vec![l])?,
        })
    }

    /// One LSTM cell update through the layer stack. Gate order in the 4H
    /// projection: input, forget, output (sigmoid), then candidate (tanh).
    pub fn lstm_step(
        &self,
        x: &Tensor<F>,
        state: &DecoderState<F>,
    ) -> Result<DecoderState<F>, DecoderError> {
        let hidden = self.cfg.hidden_dim;
        let mut h_rows = Vec::with_capacity(self.cfg.layers);
        let mut c_rows = Vec::with_capacity(self.cfg.layers);
        let mut input = x.clone();
        for (layer, p) in self.lstm.iter().enumerate() {
            let h_prev = state.h.slice_rows(layer, layer + 1)?;
            let c_prev = state.c.slice_rows(layer, layer + 1)?;
            let z = input
                .matmul(&p.w_x)?
                .add(&h_prev.matmul(&p.w_h)?)?
                .add(&p.bias)?;
            let i = z.slice_cols(0, hidden)?.sigmoid();
            let f = z.slice_cols(hidden, 2 * hidden)?.sigmoid();
            let o = z.slice_cols(2 * hidden, 3 * hidden)?.sigmoid();
            let g = z.slice_cols(3 * hidden, 4 * hidden)?.tanh();
            let c_new = f.mul(&c_prev)?.add(&i.mul(&g)?)?;
            let h_new = o.mul(&c_new.tanh())?;
            input = h_new.clone();
            h_rows.push(h_new);
            c_rows.push(c_new);
        }
        Ok(DecoderState {
            h: Tensor::concat(&h_rows, 0)?,
            c: Tensor::concat(&c_rows, 0)?,
            alpha: state.alpha.clone(),
        })
    }

    /// One decoding step: returns next-token logits `[N]` and the updated
    /// state carrying this step's attention weights.
    pub fn decode_step(
        &self,
        token_id: u32,
        state: &DecoderState<F>,
        enc: &EncoderOutput<F>,
    ) -> Result<(Tensor<F>, DecoderState<F>), DecoderError> {
        let n = self.cfg.vocab_size;
        if token_id as usize >= n {
            return Err(DecoderError::UnknownToken {
                id: token_id,
                vocab: n,
            });
        }
        let att = self.attend(&state.top_h(), enc)?;
        let embed = self.embedding.gather_rows(&[token_id as usize])?;
        let x = Tensor::concat(&[embed, att.h_attended.clone()], 1)?;
        let mut next = self.lstm_step(&x, state)?;
        let fused = Tensor::concat(&[next.top_h(), att.h_attended], 1)?;
        let logits = linear(&fused, &self.out_w, &self.out_b)?.reshape(vec![n])?;
        next.alpha = Some(att.alpha);
        Ok((logits, next))
    }

    /// Teacher-forced pass over a `<start> … ` sequence: step `t` consumes
    /// `tokens[t]` and predicts `tokens[t+1]`, giving `T−1` logit rows.
    pub fn teacher_forced_forward(
        &self,
        tokens: &[u32],
        enc: &EncoderOutput<F>,
    ) -> Result<TeacherForcedOutput<F>, DecoderError> {
        if tokens.len() < 2 {
            return Err(DecoderError::TooShort);
        }
        if tokens[0] != START_ID {
            return Err(DecoderError::MissingStart);
        }
        let n = self.cfg.vocab_size;
        let mut state = self.init_state(enc)?;
        let mut rows = Vec::with_capacity(tokens.len() - 1);
        let mut alphas = Vec::with_capacity(tokens.len() - 1);
        for &tok in &tokens[..tokens.len() - 1] {
            let (logits, next) = self.decode_step(tok, &state, enc)?;
            rows.push(logits.reshape(vec![1, n])?);
            alphas.push(next.alpha.clone().expect("decode_step sets alpha"));
            state = next;
        }
        Ok(TeacherForcedOutput {
            logits: Tensor::concat(&rows, 0)?,
            alphas,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![
            ("decoder.embedding".to_string(), self.embedding.clone()),
            ("decoder.init.w_h".to_string(), self.init_w_h.clone()),
            ("decoder.init.b_h".to_string(), self.init_b_h.clone()),
            ("decoder.init.w_c".to_string(), self.init_w_c.clone()),
            ("decoder.init.b_c".to_string(), self.init_b_c.clone()),
        ];
        if let Some(w) = &self.attn_proj {
            out.push(("decoder.attn.proj".to_string(), w.clone()));
        }
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("decoder.lstm.{l}.w_x"), layer.w_x.clone()));
            out.push((format!("decoder.lstm.{l}.w_h"), layer.w_h.clone()));
            out.push((format!("decoder.lstm.{l}.bias"), layer.bias.clone()));
        }
        out.push(("decoder.out.weight".to_string(), self.out_w.clone()));
        out.push(("decoder.out.bias".to_string(), self.out_b.clone()));
        out
    }
}
