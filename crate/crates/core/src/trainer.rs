//! Training loop: AdamW with decoupled weight decay, warmup plus decay
//! schedules, gradient clipping, metrics, and checkpoint resume.
//!
//! Everything is deterministic on one thread: the batch order is a pure
//! function of (seed, step), so resuming from a checkpoint replays the run
//! bit for bit without any shuffle or RNG state on disk.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, windows, Corpus};
use crate::error::{Error, Result};
use crate::halting::{prune_ratio, mean_latent_len};
use crate::model::{
    count_active_flops, LatentModel, ModelConfig, RawCheckpoint, SeqUnroll, UnrollOptions, Weights,
};
use crate::objective::{seq_loss, seq_loss_and_grad, AdaptiveLossConfig};
use crate::real::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySchedule {
    Cosine,
    Linear,
    Constant,
}

fn default_seed() -> u64 {
    42
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    20
}
fn default_decay() -> DecaySchedule {
    DecaySchedule::Cosine
}
fn default_min_lr_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}
fn default_log_every() -> u64 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub steps: u64,
    /// Sequences per update.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Tokens per corpus window; each window trains window_len − 1 pairs.
    pub window_len: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_decay")]
    pub decay: DecaySchedule,
    /// Floor of the decay, as a fraction of the peak rate.
    #[serde(default = "default_min_lr_frac")]
    pub min_lr_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub adaptive: AdaptiveLossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let err = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.window_len < 2 {
            return err("window_len must be at least 2".into());
        }
        if self.window_len - 1 > self.model.max_seq_len {
            return err(format!(
                "window_len {} exceeds max_seq_len {} + 1",
                self.window_len, self.model.max_seq_len
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return err("min_lr_frac must be in [0,1]".into());
        }
        if self.clip_norm < 0.0 {
            return err("clip_norm must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Learning rate for 0-based update `step`: linear warmup to the peak,
    /// then the configured decay down to min_lr_frac·lr at the final step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.min_lr_frac;
        let frac = match self.decay {
            DecaySchedule::Constant => 1.0,
            DecaySchedule::Linear => floor + (1.0 - floor) * (1.0 - t),
            DecaySchedule::Cosine => {
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        self.lr * frac
    }
}

/// Which tensors decoupled weight decay touches: the matrices, not the
/// norm gains, biases, or 1-dimensional router read-out vectors.
fn weight_decays(name: &str) -> bool {
    name == "embed"
        || name == "lm_head"
        || name == "feed.w"
        || name.ends_with(".wq")
        || name.ends_with(".wk")
        || name.ends_with(".wv")
        || name.ends_with(".wo")
        || name.ends_with(".w_gate")
        || name.ends_with(".w_up")
        || name.ends_with(".w_down")
        || name.ends_with(".w1")
}

pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(weights: &Weights<T>) -> Self {
        let mut m = Vec::new();
        weights.visit(|_, s| m.push(vec![T::zero(); s.len()]));
        let v = m.clone();
        AdamW { m, v, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One decoupled-weight-decay update. `t` is the 1-based update count
    /// (for bias correction), `clip_norm` 0 disables clipping.
    pub fn update(
        &mut self,
        weights: &mut Weights<T>,
        grads: &Weights<T>,
        t: u64,
        lr: f64,
        weight_decay: f64,
        clip_norm: f64,
    ) {
        let mut sq = 0.0f64;
        grads.visit(|_, s| {
            for g in s {
                sq += g.into_f64() * g.into_f64();
            }
        });
        let norm = sq.sqrt();
        let clip = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };

        let b1 = real::<T>(self.beta1);
        let b2 = real::<T>(self.beta2);
        let one_m_b1 = real::<T>(1.0 - self.beta1);
        let one_m_b2 = real::<T>(1.0 - self.beta2);
        let corr1 = real::<T>(1.0 / (1.0 - self.beta1.powi(t as i32)));
        let corr2 = real::<T>(1.0 / (1.0 - self.beta2.powi(t as i32)));
        let eps = real::<T>(self.eps);
        let lr_t = real::<T>(lr);
        let clip_t = real::<T>(clip);

        let mut g_flat: Vec<Vec<T>> = Vec::with_capacity(self.m.len());
        grads.visit(|_, s| g_flat.push(s.to_vec()));
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        weights.visit_mut(|name, w| {
            let g = &g_flat[idx];
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            let wd = if weight_decays(name) { real::<T>(lr * weight_decay) } else { T::zero() };
            for i in 0..w.len() {
                let gi = g[i] * clip_t;
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let mhat = m[i] * corr1;
                let vhat = v[i] * corr2;
                w[i] = w[i] - lr_t * mhat / (vhat.sqrt() + eps) - wd * w[i];
            }
            idx += 1;
        });
    }

    /// Optimizer slots as checkpoint blobs, named after their tensors.
    pub fn to_blobs(&self, weights: &Weights<T>) -> Vec<(String, Vec<u8>)> {
        let mut names = Vec::new();
        weights.visit(|name, _| names.push(name.to_string()));
        let mut blobs = Vec::with_capacity(names.len() * 2);
        for (kind, slots) in [("m", &self.m), ("v", &self.v)] {
            for (name, slot) in names.iter().zip(slots) {
                let mut bytes = Vec::with_capacity(slot.len() * T::PRECISION.bytes());
                for &x in slot {
                    x.write_le(&mut bytes);
                }
                blobs.push((format!("adam.{kind}.{name}"), bytes));
            }
        }
        blobs
    }

    pub fn from_checkpoint(ckpt: &RawCheckpoint, weights: &Weights<T>) -> Result<Self> {
        let mut opt = Self::new(weights);
        let mut names = Vec::new();
        weights.visit(|name, _| names.push(name.to_string()));
        let width = T::PRECISION.bytes();
        for (kind, slots) in [("m", &mut opt.m), ("v", &mut opt.v)] {
            for (name, slot) in names.iter().zip(slots.iter_mut()) {
                let key = format!("adam.{kind}.{name}");
                let bytes = ckpt
                    .blob(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer slot {key} absent")))?;
                if bytes.len() != slot.len() * width {
                    return Err(Error::Checkpoint(format!("optimizer slot {key} has wrong size")));
                }
                for (i, c) in bytes.chunks_exact(width).enumerate() {
                    slot[i] = T::read_le(c);
                }
            }
        }
        Ok(opt)
    }
}

/// One metrics line; serialized as-is to JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub tokens: u64,
    pub ce: f64,
    pub adaptive: f64,
    pub prune_ratio: f64,
    pub mean_len: f64,
    pub flops_cum: f64,
}

pub fn append_jsonl(path: &Path, m: &TrainMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(m).expect("metrics always serialize");
    writeln!(f, "{line}")?;
    Ok(())
}

pub struct Trainer<T: Real> {
    pub model: LatentModel<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Completed update steps.
    pub step: u64,
    pub tokens_seen: u64,
    pub flops_cum: f64,
}

struct BatchStats {
    ce: f64,
    adaptive: f64,
    lens: Vec<crate::halting::LatentLen>,
    flops: f64,
    tokens: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = LatentModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(&model.weights);
        Ok(Trainer { model, opt, cfg, step: 0, tokens_seen: 0, flops_cum: 0.0 })
    }

    pub fn resume(cfg: TrainConfig, ckpt: &RawCheckpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.cfg != cfg.model {
            return Err(Error::Checkpoint(
                "checkpoint model shape differs from the config".into(),
            ));
        }
        let weights = ckpt.load_weights::<T>()?;
        let model = LatentModel::from_parts(cfg.model.clone(), weights)?;
        let opt = AdamW::from_checkpoint(ckpt, &model.weights)?;
        let u64_blob = |name: &str| -> Result<u64> {
            let b = ckpt
                .blob(name)
                .ok_or_else(|| Error::Checkpoint(format!("counter {name} absent")))?;
            Ok(u64::from_le_bytes(
                b.try_into().map_err(|_| Error::Checkpoint(format!("counter {name} malformed")))?,
            ))
        };
        let step = u64_blob("trainer.step")?;
        let tokens_seen = u64_blob("trainer.tokens")?;
        let flops_cum = f64::from_bits(u64_blob("trainer.flops")?);
        Ok(Trainer { model, opt, cfg, step, tokens_seen, flops_cum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extras = self.opt.to_blobs(&self.model.weights);
        extras.push(("trainer.step".into(), self.step.to_le_bytes().to_vec()));
        extras.push(("trainer.tokens".into(), self.tokens_seen.to_le_bytes().to_vec()));
        extras.push(("trainer.flops".into(), self.flops_cum.to_bits().to_le_bytes().to_vec()));
        crate::model::save_checkpoint(path, &self.cfg.model, &self.model.weights, &extras)
    }

    fn forward_backward(&self, batch: &[&[u32]], grads: &mut Weights<T>) -> Result<BatchStats> {
        let mut stats =
            BatchStats { ce: 0.0, adaptive: 0.0, lens: Vec::new(), flops: 0.0, tokens: 0 };
        for w in batch {
            let inputs = &w[..w.len() - 1];
            let targets = &w[1..];
            let opts =
                UnrollOptions { with_tape: true, targets: Some(targets), ..Default::default() };
            let seq = self.model.unroll_seq(inputs, &opts)?;
            let loss =
                seq_loss_and_grad(&self.model, &seq, targets, &self.cfg.adaptive, grads)?;
            stats.ce += loss.ce;
            stats.adaptive += loss.adaptive;
            stats.lens.extend(seq.latent_lens());
            stats.flops += count_active_flops(&seq.active_counts, &self.model.cfg);
            stats.tokens += inputs.len() as u64;
        }
        stats.ce /= batch.len() as f64;
        stats.adaptive /= batch.len() as f64;
        Ok(stats)
    }

    /// One optimizer step over a batch of windows (each window_len tokens).
    pub fn train_step(&mut self, batch: &[&[u32]]) -> Result<TrainMetrics> {
        assert!(!batch.is_empty());
        let mut grads = Weights::zeros(&self.cfg.model);
        let stats = self.forward_backward(batch, &mut grads)?;
        let total = stats.ce + stats.adaptive;
        if !total.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: total });
        }
        // gradients summed over the batch become the batch mean
        let inv = real::<T>(1.0 / batch.len() as f64);
        let gref = &mut grads;
        gref.visit_mut(|_, s| {
            for x in s.iter_mut() {
                *x = *x * inv;
            }
        });
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        self.opt.update(
            &mut self.model.weights,
            gref,
            self.step,
            lr,
            self.cfg.weight_decay,
            self.cfg.clip_norm,
        );
        self.tokens_seen += stats.tokens;
        self.flops_cum += stats.flops;
        let l_max = self.cfg.model.max_latent_len;
        Ok(TrainMetrics {
            step: self.step,
            tokens: self.tokens_seen,
            ce: stats.ce,
            adaptive: stats.adaptive,
            // a model with no latent budget has nothing to prune; log zero
            prune_ratio: if l_max == 0 { 0.0 } else { prune_ratio(&stats.lens, l_max)? },
            mean_len: mean_latent_len(&stats.lens),
            flops_cum: self.flops_cum,
        })
    }

    /// Run until `cfg.steps`, resuming mid-epoch if the trainer already has
    /// completed steps. Calls `on_metrics` every `log_every` steps and on
    /// the final step.
    pub fn train_loop(
        &mut self,
        corpus: &Corpus,
        on_metrics: impl FnMut(&TrainMetrics) -> Result<()>,
    ) -> Result<()> {
        self.run_until(corpus, self.cfg.steps, on_metrics)
    }

    /// Like train_loop but stops after `stop_step` completed steps, as an
    /// interrupted run would. The schedule still spans cfg.steps, so a
    /// later resume picks up exactly where this left off.
    pub fn run_until(
        &mut self,
        corpus: &Corpus,
        stop_step: u64,
        mut on_metrics: impl FnMut(&TrainMetrics) -> Result<()>,
    ) -> Result<()> {
        if corpus.vocab_size as usize != self.cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocab {} vs model vocab {}",
                corpus.vocab_size, self.cfg.model.vocab_size
            )));
        }
        let ws: Vec<&[u32]> = windows(&corpus.ids, self.cfg.window_len).collect();
        let bs = self.cfg.batch_size;
        if ws.len() < bs {
            return Err(Error::Config(format!(
                "{} windows cannot fill a batch of {bs}",
                ws.len()
            )));
        }
        let steps_per_epoch = (ws.len() / bs) as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        while self.step < stop_step.min(self.cfg.steps) {
            let epoch = self.step / steps_per_epoch;
            let within = (self.step % steps_per_epoch) as usize;
            let order = match &cached {
                Some((e, o)) if *e == epoch => o,
                _ => {
                    cached = Some((epoch, epoch_order(ws.len(), self.cfg.seed, epoch)));
                    &cached.as_ref().unwrap().1
                }
            };
            let batch: Vec<&[u32]> =
                order[within * bs..(within + 1) * bs].iter().map(|&i| ws[i]).collect();
            let metrics = self.train_step(&batch)?;
            if metrics.step % self.cfg.log_every == 0 || metrics.step == self.cfg.steps {
                on_metrics(&metrics)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalStats {
    pub ce: f64,
    pub ppl: f64,
    pub adaptive: f64,
    pub prune_ratio: f64,
    pub mean_len: f64,
    pub n_tokens: u64,
}

/// Forward-only evaluation over every full window of a corpus.
pub fn evaluate<T: Real>(
    model: &LatentModel<T>,
    acfg: &AdaptiveLossConfig,
    corpus: &Corpus,
    window_len: usize,
    max_windows: Option<usize>,
) -> Result<EvalStats> {
    let mut ce = 0.0;
    let mut adaptive = 0.0;
    let mut lens = Vec::new();
    let mut n_tokens = 0u64;
    let mut n_windows = 0usize;
    for w in windows(&corpus.ids, window_len) {
        if let Some(cap) = max_windows {
            if n_windows >= cap {
                break;
            }
        }
        let inputs = &w[..w.len() - 1];
        let targets = &w[1..];
        let opts = UnrollOptions { targets: Some(targets), ..Default::default() };
        let seq: SeqUnroll<T> = model.unroll_seq(inputs, &opts)?;
        let loss = seq_loss(model, &seq, targets, acfg)?;
        ce += loss.ce * inputs.len() as f64;
        adaptive += loss.adaptive * inputs.len() as f64;
        lens.extend(seq.latent_lens());
        n_tokens += inputs.len() as u64;
        n_windows += 1;
    }
    if n_tokens == 0 {
        return Err(Error::invalid("no full windows to evaluate"));
    }
    let ce = ce / n_tokens as f64;
    let l_max = model.cfg.max_latent_len;
    Ok(EvalStats {
        ce,
        ppl: ce.exp(),
        adaptive: adaptive / n_tokens as f64,
        prune_ratio: if l_max == 0 { 0.0 } else { prune_ratio(&lens, l_max)? },
        mean_len: mean_latent_len(&lens),
        n_tokens,
    })
}
