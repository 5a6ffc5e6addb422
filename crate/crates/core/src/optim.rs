//! Adam with per-group learning rates, decoupled weight decay, and the
//! cosine-annealing-warm-restarts schedule.
//!
//! The optimizer holds handles to the parameter tensors (grouped so the
//! encoder and decoder can run at different base rates), keeps first/second
//! moment buffers per parameter, and applies
//! `θ ← θ − lr_t·(m̂/(√v̂+ε) + wd·θ)` with `lr_t = factor · base_lr`.
//! Weight decay is decoupled — added to the update, never folded into the
//! gradient — so the moment buffers see the raw gradient only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Schedule shape. `t0 = 0` means "resolve to one epoch's step count",
/// which the training harness does before building the optimizer;
/// `cawr_factor` itself requires a resolved `t0 ≥ 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    #[serde(rename = "T0")]
    pub t0: usize,
    #[serde(rename = "T_mult")]
    pub t_mult: usize,
    pub eta_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            t0: 0,
            t_mult: 1,
            eta_min: 0.0,
        }
    }
}

impl SchedulerConfig {
    /// Fill in `t0 = 0` with a concrete cycle length.
    pub fn resolved(self, steps_per_epoch: usize) -> SchedulerConfig {
        SchedulerConfig {
            t0: if self.t0 == 0 {
                steps_per_epoch.max(1)
            } else {
                self.t0
            },
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.t0 == 0 {
            return Err(OptimError::UnresolvedCycle);
        }
        if self.t_mult == 0 {
            return Err(OptimError::BadMult(self.t_mult));
        }
        if !self.eta_min.is_finite() || !(0.0..=1.0).contains(&self.eta_min) {
            return Err(OptimError::BadEtaMin(self.eta_min));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter group {group:?} has non-positive learning rate {lr}")]
    BadLr { group: String, lr: f64 },
    #[error("Adam beta must lie in [0, 1), got {0}")]
    BadBeta(f64),
    #[error("Adam eps must be positive, got {0}")]
    BadEps(f64),
    #[error("weight decay must be finite and non-negative, got {0}")]
    BadWeightDecay(f64),
    #[error("scheduler T0 is unresolved (0); call resolved() with the epoch step count first")]
    UnresolvedCycle,
    #[error("scheduler T_mult must be at least 1, got {0}")]
    BadMult(usize),
    #[error("scheduler eta_min must lie in [0, 1], got {0}")]
    BadEtaMin(f64),
    #[error("schedule factor must be finite and non-negative, got {0}")]
    BadFactor(f64),
    #[error("parameter {name:?} has no gradient; run backward before step")]
    MissingGradient { name: String },
}

/// Named parameters sharing one base learning rate.
pub struct ParamGroup<F: Real = f32> {
    pub name: String,
    pub base_lr: f64,
    pub params: Vec<(String, Tensor<F>)>,
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

pub struct Adam<F: Real = f32> {
    cfg: AdamConfig,
    groups: Vec<ParamGroup<F>>,
    moments: Vec<Vec<Moments<F>>>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(groups: Vec<ParamGroup<F>>, cfg: AdamConfig) -> Result<Self, OptimError> {
        for beta in [cfg.beta1, cfg.beta2] {
            if !beta.is_finite() || !(0.0..1.0).contains(&beta) {
                return Err(OptimError::BadBeta(beta));
            }
        }
        if !cfg.eps.is_finite() || cfg.eps <= 0.0 {
            return Err(OptimError::BadEps(cfg.eps));
        }
        if !cfg.weight_decay.is_finite() || cfg.weight_decay < 0.0 {
            return Err(OptimError::BadWeightDecay(cfg.weight_decay));
        }
        for g in &groups {
            if !g.base_lr.is_finite() || g.base_lr <= 0.0 {
                return Err(OptimError::BadLr {
                    group: g.name.clone(),
                    lr: g.base_lr,
                });
            }
        }
        let moments = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|(_, p)| Moments {
                        m: vec![F::zero(); p.len()],
                        v: vec![F::zero(); p.len()],
                    })
                    .collect()
            })
            .collect();
        Ok(Adam {
            cfg,
            groups,
            moments,
            t: 0,
        })
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Clear the gradient buffers of every managed parameter.
    pub fn zero_grads(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    /// Apply one update using gradients left by `backward`. Every managed
    /// parameter must have a gradient; a missing one is a usage error and
    /// is reported by name.
    pub fn step(&mut self, schedule_factor: f64) -> Result<(), OptimError> {
        if !schedule_factor.is_finite() || schedule_factor < 0.0 {
            return Err(OptimError::BadFactor(schedule_factor));
        }
        self.t += 1;
        let b1 = F::from(self.cfg.beta1).expect("beta1 fits");
        let b2 = F::from(self.cfg.beta2).expect("beta2 fits");
        let one = F::one();
        // Bias corrections 1−βᵗ, computed in f64 to keep long runs exact.
        let c1 = F::from(1.0 - self.cfg.beta1.powi(self.t as i32)).expect("c1 fits");
        let c2 = F::from(1.0 - self.cfg.beta2.powi(self.t as i32)).expect("c2 fits");
        let eps = F::from(self.cfg.eps).expect("eps fits");
        let wd = F::from(self.cfg.weight_decay).expect("wd fits");

        for (group, group_moments) in self.groups.iter().zip(&mut self.moments) {
            let lr = F::from(schedule_factor * group.base_lr).expect("lr fits");
            for ((name, param), slot) in group.params.iter().zip(group_moments) {
                let grad = param
                    .grad()
                    .ok_or_else(|| OptimError::MissingGradient { name: name.clone() })?;
                let mut theta = param.to_vec();
                for i in 0..theta.len() {
                    let g = grad[i];
                    slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                    let m_hat = slot.m[i] / c1;
                    let v_hat = slot.v[i] / c2;
                    theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
                }
                param
                    .set_data(theta)
                    .expect("update preserves parameter length");
            }
        }
        Ok(())
    }
}

/// The closed-form within-cycle factor: `eta_min + (1−eta_min)·(1+cos(π·t/T))/2`
/// for `t ∈ [0, T]`.
pub fn cosine_factor(t_cur: f64, t_i: f64, eta_min: f64) -> f64 {
    eta_min + (1.0 - eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos()) / 2.0
}

/// Schedule factor at optimization step `step` (0-based). Cycle `i` spans
/// `T_i = T0·T_mult^i` steps; the factor restarts at 1 on each cycle
/// boundary and decays along the cosine to `eta_min` within the cycle.
pub fn cawr_factor(step: usize, cfg: &SchedulerConfig) -> Result<f64, OptimError> {
    cfg.validate()?;
    let (t_cur, t_i) = if cfg.t_mult == 1 {
        (step % cfg.t0, cfg.t0)
    } else {
        let mut t_cur = step;
        let mut t_i = cfg.t0;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i = t_i.saturating_mul(cfg.t_mult);
        }
        (t_cur, t_i)
    };
    Ok(cosine_factor(t_cur as f64, t_i as f64, cfg.eta_min))
}
