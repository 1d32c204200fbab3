//! Per-token halting probability flow.
//!
//! Each position runs latent steps k = 1..K_max. A router gate g⁽ᵏ⁾ ∈ [0,1]
//! is the probability of continuing past step k; the chance of reaching step
//! k is the product of earlier gates and the chance of exiting at k is
//! reach⁽ᵏ⁾·(1−g⁽ᵏ⁾). The final gate is forced to 0 so the flow always
//! terminates and exit masses sum to one. Inference truncates the chain at
//! the last step whose reach clears a threshold τ and re-allocates the
//! truncated tail onto that step, so the mixture weights stay normalized.

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::real::{real, Real};

/// Gates are kept strictly inside (0,1) at live steps so reach never
/// collapses to an exact 0 before the forced final step.
pub const GATE_EPS: f64 = 1e-6;

/// Mixture weights must sum to 1 within this before states are mixed.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[inline]
pub fn clamp_gate<T: Real>(g: T) -> T {
    let lo = real::<T>(GATE_EPS);
    let hi = real::<T>(1.0 - GATE_EPS);
    if g < lo {
        lo
    } else if g > hi {
        hi
    } else {
        g
    }
}

/// Executed latent length ℓ = K* − 1: the number of extra forward passes
/// beyond the one every token always gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LatentLen(pub usize);

impl LatentLen {
    pub fn from_k_star(k_star: usize) -> Self {
        assert!(k_star >= 1, "k_star is 1-based");
        LatentLen(k_star - 1)
    }
}

/// A full per-token gate vector g⁽¹⁾..g⁽ᴷᵐᵃˣ⁾ with the final entry 0 exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<T>(Vec<T>);

impl<T: Real> GateVector<T> {
    pub fn new(gates: Vec<T>) -> Result<Self> {
        if gates.is_empty() {
            return Err(Error::invalid("gate vector must be non-empty"));
        }
        for (i, g) in gates.iter().enumerate() {
            if !(*g >= T::zero() && *g <= T::one()) {
                return Err(Error::invalid(format!("gate {i} out of [0,1]: {g}")));
            }
        }
        if *gates.last().unwrap() != T::zero() {
            return Err(Error::invalid("final gate must be 0 exactly"));
        }
        Ok(GateVector(gates))
    }

    pub fn gates(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_threshold<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero() && tau <= T::one()) {
        return Err(Error::invalid(format!("threshold must be in (0,1], got {tau}")));
    }
    Ok(())
}

/// reach⁽ᵏ⁾ = Π_{j<k} g⁽ʲ⁾ (so reach⁽¹⁾ = 1), computed as a running product.
pub fn compute_reach<T: Real>(gates: &[T]) -> Vec<T> {
    let mut reach = Vec::with_capacity(gates.len());
    let mut p = T::one();
    for g in gates {
        reach.push(p);
        p = p * *g;
    }
    reach
}

/// exit⁽ᵏ⁾ = reach⁽ᵏ⁾ · (1 − g⁽ᵏ⁾).
pub fn compute_exit<T: Real>(gates: &[T], reach: &[T]) -> Vec<T> {
    assert_eq!(gates.len(), reach.len());
    gates.iter().zip(reach).map(|(g, r)| *r * (T::one() - *g)).collect()
}

/// K* = max{k : reach⁽ᵏ⁾ ≥ τ}, 1-based. reach is non-increasing, so this is
/// the length of the executed prefix; a tie at τ counts as reachable.
pub fn truncation_step<T: Real>(reach: &[T], tau: T) -> Result<usize> {
    check_threshold(tau)?;
    if reach.is_empty() {
        return Err(Error::invalid("empty reach vector"));
    }
    let mut k_star = 0;
    for (i, r) in reach.iter().enumerate() {
        if *r >= tau {
            k_star = i + 1;
        }
    }
    debug_assert!(k_star >= 1, "reach[0] = 1 >= tau");
    Ok(k_star)
}

/// Truncated exit weights: identical to exit below K*, with the whole tail
/// Σ_{k≥K*} exit⁽ᵏ⁾ = reach⁽ᴷ*⁾ re-allocated onto K*. Length K*.
pub fn reallocate_residual<T: Real>(exit: &[T], reach: &[T], k_star: usize) -> Vec<T> {
    assert!(k_star >= 1 && k_star <= reach.len());
    let mut hat: Vec<T> = exit[..k_star - 1].to_vec();
    hat.push(reach[k_star - 1]);
    hat
}

/// Convex mixture of per-step states: Σ_k w_k · z⁽ᵏ⁾. `states` rows are steps.
pub fn mix_states<T: Real>(weights: &[T], states: &Mat<T>) -> Result<Vec<T>> {
    if weights.len() != states.rows {
        return Err(Error::invalid(format!(
            "{} weights vs {} states",
            weights.len(),
            states.rows
        )));
    }
    let sum: T = weights.iter().copied().sum();
    if (sum - T::one()).abs().into_f64() > WEIGHT_SUM_TOL {
        return Err(Error::invalid(format!("mixture weights sum to {sum}, expected 1")));
    }
    let mut out = vec![T::zero(); states.cols];
    for (k, w) in weights.iter().enumerate() {
        crate::math::axpy(*w, states.row(k), &mut out);
    }
    Ok(out)
}

/// 1 − E[ℓ]/ℓ_max: the fraction of the latent budget pruned away.
pub fn prune_ratio(lens: &[LatentLen], l_max: usize) -> Result<f64> {
    if lens.is_empty() {
        return Err(Error::invalid("prune_ratio over empty input"));
    }
    if l_max == 0 {
        return Err(Error::invalid("prune_ratio undefined for l_max = 0"));
    }
    Ok(1.0 - mean_latent_len(lens) / l_max as f64)
}

pub fn mean_latent_len(lens: &[LatentLen]) -> f64 {
    lens.iter().map(|l| l.0 as f64).sum::<f64>() / lens.len() as f64
}

/// The whole flow for one token: reach/exit per step, the truncation point,
/// and the re-allocated mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingSchedule<T> {
    pub reach: Vec<T>,
    pub exit: Vec<T>,
    pub k_star: usize,
    pub hat_exit: Vec<T>,
    pub threshold: T,
}

impl<T: Real> HaltingSchedule<T> {
    /// Build from a full gate vector (final gate 0).
    pub fn from_gates(gates: &GateVector<T>, tau: T) -> Result<Self> {
        let reach = compute_reach(gates.gates());
        let exit = compute_exit(gates.gates(), &reach);
        let k_star = truncation_step(&reach, tau)?;
        let hat_exit = reallocate_residual(&exit, &reach, k_star);
        Ok(HaltingSchedule { reach, exit, k_star, hat_exit, threshold: tau })
    }

    /// Build from the executed prefix only, as the unroll produces it: the
    /// prefix length is K* by construction (the unroll stops executing a
    /// token exactly when the next step's reach would fall under τ, or at
    /// the forced final step). reach/exit cover the prefix.
    pub fn from_executed_prefix(gates: &[T], tau: T) -> Result<Self> {
        check_threshold(tau)?;
        if gates.is_empty() {
            return Err(Error::invalid("empty gate prefix"));
        }
        let reach = compute_reach(gates);
        let exit = compute_exit(gates, &reach);
        let k_star = gates.len();
        debug_assert!(reach[k_star - 1] >= tau);
        let hat_exit = reallocate_residual(&exit, &reach, k_star);
        Ok(HaltingSchedule { reach, exit, k_star, hat_exit, threshold: tau })
    }

    pub fn latent_len(&self) -> LatentLen {
        LatentLen::from_k_star(self.k_star)
    }
}

/// Adjoint of the gates → hat_exit map, for gates fixed at their executed
/// prefix (K* is treated as a constant of the backward pass, as usual for a
/// discrete decision). Returns d gates, length K*; the K*-th entry is always
/// 0 because no truncated weight depends on that gate.
///
/// hat_k = reach_k·(1−g_k) for k<K* and hat_{K*} = reach_{K*}, with
/// reach_k = Π_{j<k} g_j; products with one factor removed are accumulated
/// directly rather than formed by division so ε-clamped gates stay exact.
pub fn mix_weight_backward<T: Real>(gates: &[T], d_hat: &[T]) -> Vec<T> {
    let k_star = gates.len();
    assert_eq!(d_hat.len(), k_star);
    let reach = compute_reach(gates);
    let mut d_g = vec![T::zero(); k_star];
    for i in 0..k_star {
        let mut d = T::zero();
        if i < k_star - 1 {
            // hat_i = reach_i·(1−g_i) loses mass as g_i rises
            d = d - d_hat[i] * reach[i];
        }
        // downstream weights gain reach through g_i
        let mut rp = reach[i]; // Π_{j<i} g_j = Π_{j<k, j≠i} g_j at k = i+1
        for k in i + 1..k_star {
            if k < k_star - 1 {
                d = d + d_hat[k] * (T::one() - gates[k]) * rp;
            } else {
                // the last slot holds reach_{K*} itself
                d = d + d_hat[k] * rp;
            }
            rp = rp * gates[k];
        }
        d_g[i] = d;
    }
    d_g
}
