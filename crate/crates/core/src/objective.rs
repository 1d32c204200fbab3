//! Training objective: token cross-entropy on the mixed prediction state,
//! plus a depth penalty that charges each continue gate by how confident the
//! model already was at that step.
//!
//! The penalty is Σ_{k≤K*} g⁽ᵏ⁾ · p⁽ᵏ⁾^β per token, averaged over tokens and
//! scaled by λ. p⁽ᵏ⁾ is the probability the step-k read-out gives the ground
//! truth token, and it enters as a constant: the penalty's gradient touches
//! the gates only, never the parameters that produced p. Once a token is
//! cheap to predict, continuing costs more than it helps, so the router
//! learns to stop early exactly where confidence arrives early.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::model::{LatentModel, RouterKind, SeqUnroll, Weights};
use crate::real::{real, Real};

fn default_lambda() -> f64 {
    0.4
}
fn default_beta() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaptiveLossConfig {
    /// Weight of the depth penalty in the total loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Confidence exponent: high β only charges steps the model has already
    /// effectively solved.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl Default for AdaptiveLossConfig {
    fn default() -> Self {
        AdaptiveLossConfig { lambda: default_lambda(), beta: default_beta() }
    }
}

/// Cross-entropy value plus the softmax probabilities for the backward pass.
pub struct CeOut<T> {
    /// Mean over rows of −log p(target).
    pub value: f64,
    pub probs: Mat<T>,
}

pub fn ce_loss<T: Real>(logits: &Mat<T>, targets: &[u32]) -> CeOut<T> {
    assert_eq!(logits.rows, targets.len());
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for i in 0..logits.rows {
        let row = logits.row(i);
        let lse = math::log_sum_exp(row);
        total += (lse - row[targets[i] as usize]).into_f64();
        let p = probs.row_mut(i);
        for j in 0..row.len() {
            p[j] = (row[j] - lse).exp();
        }
    }
    CeOut { value: total / logits.rows as f64, probs }
}

/// ∂(mean CE)/∂logits = (softmax − onehot) / n_rows.
pub fn ce_backward<T: Real>(probs: &Mat<T>, targets: &[u32]) -> Mat<T> {
    assert_eq!(probs.rows, targets.len());
    let inv_n = real::<T>(1.0 / probs.rows as f64);
    let mut d = probs.clone();
    for i in 0..d.rows {
        let row = d.row_mut(i);
        row[targets[i] as usize] = row[targets[i] as usize] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_n;
        }
    }
    d
}

/// The depth penalty over one unrolled sequence: the λ-scaled value and the
/// per-gate gradient, aligned with each position's executed prefix.
pub fn adaptive_penalty<T: Real>(
    seq: &SeqUnroll<T>,
    cfg: &AdaptiveLossConfig,
) -> Result<(f64, Vec<Vec<T>>)> {
    let n = seq.tokens.len();
    let mut total = 0.0;
    let mut d_gate = Vec::with_capacity(n);
    for pos in 0..n {
        let gates = &seq.states.gates[pos];
        let ps = &seq.states.p_target[pos];
        if ps.len() != gates.len() {
            return Err(Error::invalid(
                "depth penalty needs the confidence trajectory; unroll with targets",
            ));
        }
        let mut dg = Vec::with_capacity(gates.len());
        for k in 0..gates.len() {
            let pb = ps[k].into_f64().powf(cfg.beta);
            total += gates[k].into_f64() * pb;
            dg.push(real::<T>(cfg.lambda * pb / n as f64));
        }
        d_gate.push(dg);
    }
    Ok((cfg.lambda * total / n as f64, d_gate))
}

#[derive(Debug, Clone, Copy)]
pub struct SeqLoss {
    pub ce: f64,
    pub adaptive: f64,
    pub total: f64,
}

fn penalty_applies<T: Real>(model: &LatentModel<T>, cfg: &AdaptiveLossConfig) -> bool {
    model.cfg.router != RouterKind::None && cfg.lambda != 0.0
}

/// Loss values only, no gradients; the unroll does not need a tape.
pub fn seq_loss<T: Real>(
    model: &LatentModel<T>,
    seq: &SeqUnroll<T>,
    targets: &[u32],
    cfg: &AdaptiveLossConfig,
) -> Result<SeqLoss> {
    let logits = model.lm_logits(&seq.z_final);
    let ce = ce_loss(&logits, targets).value;
    let adaptive =
        if penalty_applies(model, cfg) { adaptive_penalty(seq, cfg)?.0 } else { 0.0 };
    Ok(SeqLoss { ce, adaptive, total: ce + adaptive })
}

/// Loss plus parameter gradients for one taped sequence, accumulated into
/// `grads`. CE reaches every parameter through the mixed state; the depth
/// penalty reaches only the gates (and through them the router).
pub fn seq_loss_and_grad<T: Real>(
    model: &LatentModel<T>,
    seq: &SeqUnroll<T>,
    targets: &[u32],
    cfg: &AdaptiveLossConfig,
    grads: &mut Weights<T>,
) -> Result<SeqLoss> {
    let logits = model.lm_logits(&seq.z_final);
    let ce = ce_loss(&logits, targets);
    let d_logits = ce_backward(&ce.probs, targets);
    math::matmul_acc_dw(&d_logits, &seq.z_final, &mut grads.lm_head);
    let mut d_z_final = Mat::zeros(seq.z_final.rows, seq.z_final.cols);
    math::matmul_acc_dx(&d_logits, &model.weights.lm_head, &mut d_z_final);

    let (adaptive, d_gate) = if penalty_applies(model, cfg) {
        let (v, dg) = adaptive_penalty(seq, cfg)?;
        (v, Some(dg))
    } else {
        (0.0, None)
    };
    model.backward_seq(seq, &d_z_final, d_gate.as_deref(), grads);
    Ok(SeqLoss { ce: ce.value, adaptive, total: ce.value + adaptive })
}
