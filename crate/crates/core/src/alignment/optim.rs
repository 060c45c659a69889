use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderPipeline;
use crate::error::{Error, Result};

/// Registry name of the learnable log logit scale `ln(1/τ)`.
pub const LOGIT_SCALE: &str = "alignment.log_logit_scale";

/// Logit scale bounds, `1/τ ∈ [1, 100]`.
pub const LOGIT_SCALE_MIN: f64 = 1.0;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total optimizer steps of a run.
    pub steps: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Initial temperature τ.
    pub init_tau: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            steps: 400,
            checkpoint_every: 0,
            init_tau: 0.07,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.init_tau > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid trainer settings: {self:?}")));
        }
        let init = 1.0 / self.init_tau;
        if !(LOGIT_SCALE_MIN..=LOGIT_SCALE_MAX).contains(&init) {
            return Err(Error::Config(format!(
                "trainer.init_tau {} puts the logit scale outside [{LOGIT_SCALE_MIN}, {LOGIT_SCALE_MAX}]",
                self.init_tau
            )));
        }
        Ok(())
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Trainable registry, temperature and optimizer state.
///
/// Everything is kept at `f32` precision after each update so that a
/// checkpoint (stored as `f32`) restores the state exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub trainer: TrainerConfig,
    pub log_logit_scale: f64,
    /// One entry per trainable tensor plus [`LOGIT_SCALE`], in name order.
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub seed: u64,
}

impl AlignmentState {
    pub fn new(pipe: &EncoderPipeline, trainer: TrainerConfig, seed: u64) -> Result<Self> {
        trainer.validate()?;
        let mut moments = BTreeMap::new();
        for name in pipe.params.trainable_names() {
            let n = pipe.params.expect(name)?.numel();
            moments.insert(name.to_string(), Moments::zeros(n));
        }
        moments.insert(LOGIT_SCALE.to_string(), Moments::zeros(1));
        Ok(Self {
            trainer,
            log_logit_scale: round_f32((1.0 / trainer.init_tau).ln()),
            moments,
            step: 0,
            seed,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_logit_scale.exp()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.logit_scale()
    }

    /// Names the optimizer updates, in update order.
    pub fn registry(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One decoupled-weight-decay Adam step on `param`, with bias correction for
/// step `t` (1-based). Results are rounded to `f32`.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    mom: &mut Moments,
    cfg: &TrainerConfig,
    t: u64,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = if decay {
        1.0 - cfg.lr * cfg.weight_decay
    } else {
        1.0
    };
    for (((p, g), m), v) in param.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
        *m = round_f32(cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        *v = round_f32(cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
        let step = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        *p = round_f32(*p * shrink - cfg.lr * step);
    }
}

/// Applies one optimizer step from `grads` (missing entries count as zero).
pub(crate) fn apply_updates(
    state: &mut AlignmentState,
    pipe: &mut EncoderPipeline,
    grads: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let t = state.step + 1;
    let cfg = state.trainer;
    for name in pipe
        .params
        .trainable_names()
        .map(str::to_string)
        .collect::<Vec<_>>()
    {
        let tensor = pipe
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("missing {name}")))?;
        let n = tensor.numel();
        let decay = tensor.rank() >= 2;
        let mom = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments::zeros(n));
        let zeros;
        let g = match grads.get(&name) {
            Some(g) => g.as_slice(),
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        adamw_update(tensor.data_mut(), g, mom, &cfg, t, decay);
    }
    let g = grads.get(LOGIT_SCALE).map_or(0.0, |g| g[0]);
    let mom = state
        .moments
        .entry(LOGIT_SCALE.to_string())
        .or_insert_with(|| Moments::zeros(1));
    let mut ls = [state.log_logit_scale];
    adamw_update(&mut ls, &[g], mom, &cfg, t, false);
    state.log_logit_scale = round_f32(ls[0].clamp(LOGIT_SCALE_MIN.ln(), LOGIT_SCALE_MAX.ln()));
    state.step = t;
    Ok(())
}
