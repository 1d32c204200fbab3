//! Incremental decoding. A session feeds tokens one at a time through the
//! same per-step machinery and the same online halting rule as the training
//! unroll, against a persistent KV cache, so the latent depth chosen at
//! decode time is exactly the depth training would assign to that prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halting::{clamp_gate, GateVector, HaltingSchedule};
use crate::math::{self, Mat};
use crate::model::{KvCache, LatentModel, RouterKind};
use crate::real::{real, Real};

/// Per-token decode record; serialized as one JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub pos: usize,
    pub token: u32,
    /// Latent reasoning length ℓ = passes beyond the first.
    pub latent_len: usize,
    pub gates: Vec<f64>,
    pub weights: Vec<f64>,
}

pub struct DecodeSession<'m, T: Real> {
    model: &'m LatentModel<T>,
    cache: KvCache<T>,
    n_pos: usize,
    last_state: Option<Vec<T>>,
}

impl<'m, T: Real> DecodeSession<'m, T> {
    pub fn new(model: &'m LatentModel<T>) -> Self {
        DecodeSession { model, cache: KvCache::new(&model.cfg), n_pos: 0, last_state: None }
    }

    pub fn len(&self) -> usize {
        self.n_pos
    }

    pub fn is_empty(&self) -> bool {
        self.n_pos == 0
    }

    /// Mixed prediction state of the most recent position.
    pub fn prediction_state(&self) -> Option<&[T]> {
        self.last_state.as_deref()
    }

    /// Logits for the next token, from the most recent position's state.
    pub fn next_logits(&self) -> Result<Vec<T>> {
        let z = self
            .last_state
            .as_ref()
            .ok_or_else(|| Error::invalid("no positions decoded yet"))?;
        let mut row = Mat::zeros(1, z.len());
        row.row_mut(0).copy_from_slice(z);
        Ok(self.model.lm_logits(&row).data)
    }

    /// Feed one token: run its latent passes with online pruning, extend the
    /// cache, and return the halting record.
    pub fn advance(&mut self, token: u32) -> Result<DecodeTrace> {
        let cfg = &self.model.cfg;
        if token as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!("token id {token} outside vocab {}", cfg.vocab_size)));
        }
        if self.n_pos >= cfg.max_seq_len {
            return Err(Error::ContextOverflow { pos: self.n_pos, max: cfg.max_seq_len });
        }
        let pos = self.n_pos;
        let k_max = cfg.k_max();
        let adaptive = cfg.router != RouterKind::None;
        let tau = real::<T>(cfg.reach_threshold);

        let mut z_steps: Vec<Vec<T>> = Vec::new();
        let mut gates: Vec<T> = Vec::new();
        let mut reach = T::one();
        for step in 1..=k_max {
            let input = if step == 1 {
                self.model.embed_step_input(&[token], 1, None)
            } else {
                let mut prev = Mat::zeros(1, cfg.d_model);
                prev.row_mut(0).copy_from_slice(z_steps.last().unwrap());
                self.model.embed_step_input(&[token], step, Some(&prev))
            };
            let (z, _, _, _) = self.model.forward_step(step, &[pos], &input, &mut self.cache);
            let (logits, _) = self.model.router_logit_rows(step, &z);
            let mut g =
                if adaptive { clamp_gate(math::sigmoid(logits[0])) } else { T::one() };
            if step == k_max {
                g = T::zero();
            }
            z_steps.push(z.row(0).to_vec());
            gates.push(g);
            let next_reach = reach * g;
            if step == k_max || next_reach < tau {
                break;
            }
            reach = next_reach;
        }

        let k_star = z_steps.len();
        let (mixed, hat): (Vec<T>, Vec<T>) = if adaptive {
            let sched = HaltingSchedule::from_executed_prefix(&gates, tau)?;
            let steps_z = Mat::from_rows(z_steps);
            (crate::halting::mix_states(&sched.hat_exit, &steps_z)?, sched.hat_exit)
        } else {
            let mut forced = vec![T::one(); k_star];
            forced[k_star - 1] = T::zero();
            let sched = HaltingSchedule::from_gates(&GateVector::new(forced)?, tau)?;
            (z_steps.pop().unwrap(), sched.hat_exit)
        };
        self.last_state = Some(mixed);
        self.n_pos += 1;
        Ok(DecodeTrace {
            pos,
            token,
            latent_len: k_star - 1,
            gates: gates.iter().map(|g| g.into_f64()).collect(),
            weights: hat.iter().map(|w| w.into_f64()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
    pub stop_at: Option<u32>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { max_new: 64, temperature: 0.0, seed: 0, stop_at: None }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Prompt plus continuation.
    pub tokens: Vec<u32>,
    /// One record per token fed through the model, prompt included.
    pub traces: Vec<DecodeTrace>,
}

fn pick_next<T: Real>(logits: &[T], temperature: f64, rng: &mut ChaCha12Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l.into_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, e) in exps.iter().enumerate() {
        r -= e;
        if r <= 0.0 {
            return i as u32;
        }
    }
    (exps.len() - 1) as u32
}

pub fn generate<T: Real>(
    model: &LatentModel<T>,
    prompt: &[u32],
    cfg: &GenerateConfig,
) -> Result<Generated> {
    if prompt.is_empty() {
        return Err(Error::invalid("generation needs at least one prompt token"));
    }
    let mut session = DecodeSession::new(model);
    let mut traces = Vec::with_capacity(prompt.len() + cfg.max_new);
    let mut tokens = prompt.to_vec();
    for &t in prompt {
        traces.push(session.advance(t)?);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_new {
        let next = pick_next(&session.next_logits()?, cfg.temperature, &mut rng);
        tokens.push(next);
        traces.push(session.advance(next)?);
        if cfg.stop_at == Some(next) {
            break;
        }
    }
    Ok(Generated { tokens, traces })
}
