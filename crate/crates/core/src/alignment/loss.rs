use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tape, Tensor, Var};

/// Row-normalized shape, image and text features of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub shape_features: Tensor,
    pub image_features: Tensor,
    pub text_features: Tensor,
}

const UNIT_TOL: f64 = 1e-9;

impl ContrastiveBatch {
    pub fn new(
        shape_features: Tensor,
        image_features: Tensor,
        text_features: Tensor,
    ) -> Result<Self> {
        let batch = Self {
            shape_features,
            image_features,
            text_features,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.shape_features.shape().first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, d) = self.shape_features.dims2("contrastive_loss")?;
        if b == 0 {
            return Err(Error::contract(
                "contrastive_loss",
                "batch size must be >= 1",
            ));
        }
        for (name, t) in [
            ("shape", &self.shape_features),
            ("image", &self.image_features),
            ("text", &self.text_features),
        ] {
            if t.shape() != [b, d] {
                return Err(Error::shape(
                    "contrastive_loss",
                    format!("{name} features {:?} vs {:?}", t.shape(), [b, d]),
                ));
            }
            for i in 0..b {
                let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::contract(
                        "contrastive_loss",
                        format!("{name} row {i} has norm {n}, expected 1"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_p2i: f64,
    pub l_p2t: f64,
}

/// One symmetric pair term `-(1/4B) Σᵢ [log softmax_row(L)ᵢᵢ + log softmax_col(L)ᵢᵢ]`
/// with `L = s·P·Aᵀ`, plus `∂/∂L`.
struct PairTerm {
    value: f64,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
}

fn pair_term(p: &Tensor, a: &Tensor, scale: f64) -> PairTerm {
    let b = p.shape()[0];
    let mut logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let dot: f64 = p.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            logits[i * b + j] = scale * dot;
        }
    }
    let row_lse: Vec<f64> = (0..b)
        .map(|i| log_sum_exp(logits[i * b..(i + 1) * b].iter().copied()))
        .collect();
    let col_lse: Vec<f64> = (0..b)
        .map(|j| log_sum_exp((0..b).map(|i| logits[i * b + j])))
        .collect();
    let norm = 1.0 / (4 * b) as f64;
    let mut sum = 0.0;
    for i in 0..b {
        let diag = logits[i * b + i];
        sum += (diag - row_lse[i]) + (diag - col_lse[i]);
    }
    let mut dlogits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let l = logits[i * b + j];
            let srow = (l - row_lse[i]).exp();
            let scol = (l - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            dlogits[i * b + j] = norm * (srow + scol - delta);
        }
    }
    PairTerm {
        value: -norm * sum,
        logits,
        dlogits,
    }
}

/// Tri-modal contrastive loss at temperature `tau`:
/// `L = L_P2I + L_P2T`, each the symmetric InfoNCE averaged with the 1/(4B) factor.
pub fn contrastive_loss(batch: &ContrastiveBatch, tau: f64) -> Result<LossBreakdown> {
    batch.validate()?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(
            "contrastive_loss",
            format!("tau must be > 0, got {tau}"),
        ));
    }
    let scale = 1.0 / tau;
    let pi = pair_term(&batch.shape_features, &batch.image_features, scale);
    let pt = pair_term(&batch.shape_features, &batch.text_features, scale);
    Ok(LossBreakdown {
        total: pi.value + pt.value,
        l_p2i: pi.value,
        l_p2t: pt.value,
    })
}

/// Records the loss on `tape`. `shape` must be the row-normalized `[B×d]` shape
/// features and `log_scale` a scalar holding `ln(1/τ)`. Teacher features enter
/// as constants.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    shape: Var,
    image: &Tensor,
    text: &Tensor,
    log_scale: Var,
) -> Result<(Var, LossBreakdown)> {
    let p = tape.value(shape).clone();
    let (b, d) = p.dims2("contrastive_loss")?;
    if b == 0 {
        return Err(Error::contract(
            "contrastive_loss",
            "batch size must be >= 1",
        ));
    }
    for (name, t) in [("image", image), ("text", text)] {
        if t.shape() != [b, d] {
            return Err(Error::shape(
                "contrastive_loss",
                format!("{name} features {:?} vs {:?}", t.shape(), [b, d]),
            ));
        }
    }
    let scale = tape.value(log_scale).item()?.exp();
    let mut dp = vec![0.0; b * d];
    let mut dlog = 0.0;
    let mut values = [0.0; 2];
    for (slot, anchor) in [image, text].into_iter().enumerate() {
        let term = pair_term(&p, anchor, scale);
        values[slot] = term.value;
        // dP = s·G·A and d(ln s) = Σ G∘L.
        for i in 0..b {
            for j in 0..b {
                let g = term.dlogits[i * b + j];
                dlog += g * term.logits[i * b + j];
                let coef = scale * g;
                for (o, x) in dp[i * d..(i + 1) * d].iter_mut().zip(anchor.row(j)) {
                    *o += coef * x;
                }
            }
        }
    }
    let breakdown = LossBreakdown {
        total: values[0] + values[1],
        l_p2i: values[0],
        l_p2t: values[1],
    };
    let out =
        tape.scalar_with_grads(breakdown.total, vec![(shape, dp), (log_scale, vec![dlog])])?;
    Ok((out, breakdown))
}
