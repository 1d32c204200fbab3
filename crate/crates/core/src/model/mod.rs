//! The adaptive latent transformer.
//!
//! A pre-norm decoder block stack (RMSNorm, rotary attention, SwiGLU) that is
//! run up to K_max = ℓ_max + 1 times per position. Pass k consumes the
//! previous pass's last-layer state as its input embedding, attends under the
//! (position, step) visibility rule of [`crate::mask`], and produces a router
//! gate; positions whose next-step reach would fall under τ are pruned from
//! later passes. Keys and values are cached per (layer, step) and reused
//! across passes, so each pass only computes its own rows.

mod backward;
mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, RawCheckpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halting::{clamp_gate, HaltingSchedule};
use crate::mask::{KeyBlock, StepMask};
use crate::math::{self, Mat};
use crate::real::{real, Precision, Real};

/// How the router that emits continue gates is shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouterKind {
    /// No router at all: every position runs all K_max passes and the final
    /// pass's state is the prediction state (no mixing, no adaptive loss).
    #[serde(rename = "none")]
    None,
    /// One affine head on z shared by all steps.
    #[serde(rename = "shared-affine")]
    SharedAffine,
    /// One two-layer SiLU head shared by all steps.
    #[serde(rename = "shared-two-layer")]
    SharedTwoLayer,
    /// A separate affine head per step.
    #[serde(rename = "per-step-affine")]
    PerStepAffine,
    /// A separate two-layer head per step.
    #[serde(rename = "per-step-two-layer")]
    PerStepTwoLayer,
}

impl RouterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterKind::None => "none",
            RouterKind::SharedAffine => "shared-affine",
            RouterKind::SharedTwoLayer => "shared-two-layer",
            RouterKind::PerStepAffine => "per-step-affine",
            RouterKind::PerStepTwoLayer => "per-step-two-layer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(RouterKind::None),
            "shared-affine" => Some(RouterKind::SharedAffine),
            "shared-two-layer" => Some(RouterKind::SharedTwoLayer),
            "per-step-affine" => Some(RouterKind::PerStepAffine),
            "per-step-two-layer" => Some(RouterKind::PerStepTwoLayer),
            _ => None,
        }
    }
}

/// How a pass's output state becomes the next pass's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedKind {
    #[serde(rename = "identity")]
    Identity,
    /// Learned affine map, initialized at the identity.
    #[serde(rename = "affine")]
    Affine,
}

impl FeedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedKind::Identity => "identity",
            FeedKind::Affine => "affine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(FeedKind::Identity),
            "affine" => Some(FeedKind::Affine),
            _ => None,
        }
    }
}

fn default_router() -> RouterKind {
    RouterKind::SharedAffine
}
fn default_feed() -> FeedKind {
    FeedKind::Identity
}
fn default_tau() -> f64 {
    0.1
}
fn default_router_hidden() -> usize {
    32
}
fn default_detach() -> bool {
    true
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// ℓ_max: latent passes beyond the mandatory first one. 0 disables the
    /// whole mechanism and leaves a vanilla causal transformer.
    pub max_latent_len: usize,
    /// τ: a step runs only while its reach probability stays ≥ τ.
    #[serde(default = "default_tau")]
    pub reach_threshold: f64,
    #[serde(default = "default_router")]
    pub router: RouterKind,
    #[serde(default = "default_router_hidden")]
    pub router_hidden: usize,
    #[serde(default = "default_feed")]
    pub feed: FeedKind,
    /// When true (default) the router reads a detached copy of z: its
    /// gradient reaches only router parameters, never the backbone.
    #[serde(default = "default_detach")]
    pub detach_router_input: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub max_seq_len: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

impl ModelConfig {
    /// Total passes per position, counting the mandatory first one.
    pub fn k_max(&self) -> usize {
        self.max_latent_len + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return err("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return err("zero-sized model dimension".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return err(format!("head_dim {} must be even for rotary pairs", self.head_dim()));
        }
        if !(self.reach_threshold > 0.0 && self.reach_threshold <= 1.0) {
            return err(format!("reach_threshold must be in (0,1], got {}", self.reach_threshold));
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be positive".into());
        }
        if matches!(self.router, RouterKind::SharedTwoLayer | RouterKind::PerStepTwoLayer)
            && self.router_hidden == 0
        {
            return err("router_hidden must be positive for two-layer routers".into());
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        let router = match self.router {
            RouterKind::None => 0,
            RouterKind::SharedAffine => d + 1,
            RouterKind::SharedTwoLayer => self.router_hidden * (d + 2) + 1,
            RouterKind::PerStepAffine => self.k_max() * (d + 1),
            RouterKind::PerStepTwoLayer => self.k_max() * (self.router_hidden * (d + 2) + 1),
        };
        let feed = match self.feed {
            FeedKind::Identity => 0,
            FeedKind::Affine => d * d + d,
        };
        2 * self.vocab_size * d + self.n_layers * per_layer + d + router + feed
    }

    /// Parameters that do work per token: everything but the embedding table.
    /// The LM head, router and feed map are matmuls, so they count.
    pub fn non_embed_params(&self) -> usize {
        self.total_params() - self.vocab_size * self.d_model
    }
}

/// Kaplan-style compute estimate: 6 FLOPs per parameter per processed
/// (position, step) row. `active_counts[k-1]` is how many positions ran pass
/// k; with pruning disabled this is exactly K_max × the vanilla estimate.
pub fn count_active_flops(active_counts: &[usize], cfg: &ModelConfig) -> f64 {
    let rows: usize = active_counts.iter().sum();
    6.0 * cfg.non_embed_params() as f64 * rows as f64
}

/// What a plain causal transformer of the same shape would spend.
pub fn vanilla_flops(cfg: &ModelConfig, n_tokens: u64) -> f64 {
    6.0 * cfg.non_embed_params() as f64 * n_tokens as f64
}

#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Mat<T>,
    pub w_up: Mat<T>,
    pub w_down: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct AffineHead<T> {
    pub w: Vec<T>,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct TwoLayerHead<T> {
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub enum RouterWeights<T> {
    None,
    SharedAffine(AffineHead<T>),
    SharedTwoLayer(TwoLayerHead<T>),
    PerStepAffine(Vec<AffineHead<T>>),
    PerStepTwoLayer(Vec<TwoLayerHead<T>>),
}

#[derive(Debug, Clone)]
pub enum FeedWeights<T> {
    Identity,
    Affine { w: Mat<T>, b: Vec<T> },
}

#[derive(Debug, Clone)]
pub struct Weights<T> {
    pub embed: Mat<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Mat<T>,
    pub router: RouterWeights<T>,
    pub feed: FeedWeights<T>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let affine = || AffineHead { w: vec![T::zero(); d], b: T::zero() };
        let two_layer = || TwoLayerHead {
            w1: Mat::zeros(cfg.router_hidden, d),
            b1: vec![T::zero(); cfg.router_hidden],
            w2: vec![T::zero(); cfg.router_hidden],
            b2: T::zero(),
        };
        Weights {
            embed: Mat::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![T::zero(); d],
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    mlp_norm: vec![T::zero(); d],
                    w_gate: Mat::zeros(ff, d),
                    w_up: Mat::zeros(ff, d),
                    w_down: Mat::zeros(d, ff),
                })
                .collect(),
            final_norm: vec![T::zero(); d],
            lm_head: Mat::zeros(cfg.vocab_size, d),
            router: match cfg.router {
                RouterKind::None => RouterWeights::None,
                RouterKind::SharedAffine => RouterWeights::SharedAffine(affine()),
                RouterKind::SharedTwoLayer => RouterWeights::SharedTwoLayer(two_layer()),
                RouterKind::PerStepAffine => {
                    RouterWeights::PerStepAffine((0..cfg.k_max()).map(|_| affine()).collect())
                }
                RouterKind::PerStepTwoLayer => {
                    RouterWeights::PerStepTwoLayer((0..cfg.k_max()).map(|_| two_layer()).collect())
                }
            },
            feed: match cfg.feed {
                FeedKind::Identity => FeedWeights::Identity,
                FeedKind::Affine => {
                    FeedWeights::Affine { w: Mat::zeros(d, d), b: vec![T::zero(); d] }
                }
            },
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).unwrap();
        let mut fill = |m: &mut [T], scale: f64| {
            for v in m.iter_mut() {
                *v = real::<T>(normal.sample(&mut rng) * scale);
            }
        };
        fill(&mut w.embed.data, 1.0);
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for l in &mut w.layers {
            fill(&mut l.wq.data, 1.0);
            fill(&mut l.wk.data, 1.0);
            fill(&mut l.wv.data, 1.0);
            fill(&mut l.wo.data, resid_scale);
            fill(&mut l.w_gate.data, 1.0);
            fill(&mut l.w_up.data, 1.0);
            fill(&mut l.w_down.data, resid_scale);
            l.attn_norm.fill(T::one());
            l.mlp_norm.fill(T::one());
        }
        w.final_norm.fill(T::one());
        fill(&mut w.lm_head.data, 1.0);
        // Router weights start at zero with bias +2: gates open near σ(2) ≈
        // 0.88 so early training explores the full latent budget.
        let open = real::<T>(2.0);
        match &mut w.router {
            RouterWeights::None => {}
            RouterWeights::SharedAffine(a) => a.b = open,
            RouterWeights::SharedTwoLayer(t) => {
                fill(&mut t.w1.data, 1.0);
                t.b2 = open;
            }
            RouterWeights::PerStepAffine(heads) => {
                for a in heads {
                    a.b = open;
                }
            }
            RouterWeights::PerStepTwoLayer(heads) => {
                for t in heads {
                    fill(&mut t.w1.data, 1.0);
                    t.b2 = open;
                }
            }
        }
        if let FeedWeights::Affine { w: fw, .. } = &mut w.feed {
            for i in 0..fw.rows {
                fw.row_mut(i)[i] = T::one();
            }
        }
        w
    }

    /// Visit every parameter tensor in a fixed, documented order. Checkpoint
    /// blob names and optimizer slots both key off this order.
    pub fn visit<F: FnMut(&str, &[T])>(&self, mut f: F) {
        self.visit_names(|name, slice, _| f(name, slice));
    }

    pub fn visit_mut<F: FnMut(&str, &mut [T])>(&mut self, mut f: F) {
        // mirror of visit(); keep the orders identical
        f("embed", &mut self.embed.data);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.attn_norm"), &mut l.attn_norm);
            f(&format!("layer{i}.wq"), &mut l.wq.data);
            f(&format!("layer{i}.wk"), &mut l.wk.data);
            f(&format!("layer{i}.wv"), &mut l.wv.data);
            f(&format!("layer{i}.wo"), &mut l.wo.data);
            f(&format!("layer{i}.mlp_norm"), &mut l.mlp_norm);
            f(&format!("layer{i}.w_gate"), &mut l.w_gate.data);
            f(&format!("layer{i}.w_up"), &mut l.w_up.data);
            f(&format!("layer{i}.w_down"), &mut l.w_down.data);
        }
        f("final_norm", &mut self.final_norm);
        f("lm_head", &mut self.lm_head.data);
        match &mut self.router {
            RouterWeights::None => {}
            RouterWeights::SharedAffine(a) => {
                f("router.w", &mut a.w);
                let mut b = [a.b];
                f("router.b", &mut b);
                a.b = b[0];
            }
            RouterWeights::SharedTwoLayer(t) => {
                f("router.w1", &mut t.w1.data);
                f("router.b1", &mut t.b1);
                f("router.w2", &mut t.w2);
                let mut b = [t.b2];
                f("router.b2", &mut b);
                t.b2 = b[0];
            }
            RouterWeights::PerStepAffine(heads) => {
                for (s, a) in heads.iter_mut().enumerate() {
                    f(&format!("router.step{s}.w"), &mut a.w);
                    let mut b = [a.b];
                    f(&format!("router.step{s}.b"), &mut b);
                    a.b = b[0];
                }
            }
            RouterWeights::PerStepTwoLayer(heads) => {
                for (s, t) in heads.iter_mut().enumerate() {
                    f(&format!("router.step{s}.w1"), &mut t.w1.data);
                    f(&format!("router.step{s}.b1"), &mut t.b1);
                    f(&format!("router.step{s}.w2"), &mut t.w2);
                    let mut b = [t.b2];
                    f(&format!("router.step{s}.b2"), &mut b);
                    t.b2 = b[0];
                }
            }
        }
        if let FeedWeights::Affine { w, b } = &mut self.feed {
            f("feed.w", &mut w.data);
            f("feed.b", b);
        }
    }

    fn visit_names<F: FnMut(&str, &[T], usize)>(&self, mut f: F) {
        let mut idx = 0;
        let mut emit = |name: &str, slice: &[T]| {
            f(name, slice, idx);
            idx += 1;
        };
        emit("embed", &self.embed.data);
        for (i, l) in self.layers.iter().enumerate() {
            emit(&format!("layer{i}.attn_norm"), &l.attn_norm);
            emit(&format!("layer{i}.wq"), &l.wq.data);
            emit(&format!("layer{i}.wk"), &l.wk.data);
            emit(&format!("layer{i}.wv"), &l.wv.data);
            emit(&format!("layer{i}.wo"), &l.wo.data);
            emit(&format!("layer{i}.mlp_norm"), &l.mlp_norm);
            emit(&format!("layer{i}.w_gate"), &l.w_gate.data);
            emit(&format!("layer{i}.w_up"), &l.w_up.data);
            emit(&format!("layer{i}.w_down"), &l.w_down.data);
        }
        emit("final_norm", &self.final_norm);
        emit("lm_head", &self.lm_head.data);
        match &self.router {
            RouterWeights::None => {}
            RouterWeights::SharedAffine(a) => {
                emit("router.w", &a.w);
                emit("router.b", &[a.b]);
            }
            RouterWeights::SharedTwoLayer(t) => {
                emit("router.w1", &t.w1.data);
                emit("router.b1", &t.b1);
                emit("router.w2", &t.w2);
                emit("router.b2", &[t.b2]);
            }
            RouterWeights::PerStepAffine(heads) => {
                for (s, a) in heads.iter().enumerate() {
                    emit(&format!("router.step{s}.w"), &a.w);
                    emit(&format!("router.step{s}.b"), &[a.b]);
                }
            }
            RouterWeights::PerStepTwoLayer(heads) => {
                for (s, t) in heads.iter().enumerate() {
                    emit(&format!("router.step{s}.w1"), &t.w1.data);
                    emit(&format!("router.step{s}.b1"), &t.b1);
                    emit(&format!("router.step{s}.w2"), &t.w2);
                    emit(&format!("router.step{s}.b2"), &[t.b2]);
                }
            }
        }
        if let FeedWeights::Affine { w, b } = &self.feed {
            emit("feed.w", &w.data);
            emit("feed.b", b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, s| n += s.len());
        n
    }
}

/// Per-layer key/value rows for one latent step, positions ascending.
#[derive(Debug, Clone)]
pub struct KvBlock<T> {
    pub positions: Vec<usize>,
    /// `[layer]` → (keys, values), each row-per-position of width d_model.
    pub layers: Vec<(Mat<T>, Mat<T>)>,
}

/// Step-major, position-minor cache of every executed (position, step) row.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    n_layers: usize,
    d_model: usize,
    blocks: Vec<KvBlock<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache { n_layers: cfg.n_layers, d_model: cfg.d_model, blocks: Vec::new() }
    }

    pub fn n_steps(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, step: usize) -> &KvBlock<T> {
        &self.blocks[step - 1]
    }

    fn ensure_block(&mut self, step: usize) {
        while self.blocks.len() < step {
            self.blocks.push(KvBlock {
                positions: Vec::new(),
                layers: (0..self.n_layers).map(|_| (Mat::zeros(0, 0), Mat::zeros(0, 0))).collect(),
            });
        }
    }

    /// Register rows for `positions` at `step`; K/V content is then appended
    /// layer by layer with [`KvCache::append_rows`].
    pub fn begin_step(&mut self, step: usize, positions: &[usize]) {
        self.ensure_block(step);
        let block = &mut self.blocks[step - 1];
        if let Some(&last) = block.positions.last() {
            assert!(positions.first().map_or(true, |&p| p > last), "positions must ascend");
        }
        block.positions.extend_from_slice(positions);
    }

    pub fn append_rows(&mut self, step: usize, layer: usize, k_rows: &Mat<T>, v_rows: &Mat<T>) {
        let d = self.d_model;
        let block = &mut self.blocks[step - 1];
        let (k, v) = &mut block.layers[layer];
        if k.cols == 0 {
            *k = Mat::zeros(0, d);
            *v = Mat::zeros(0, d);
        }
        k.data.extend_from_slice(&k_rows.data);
        k.rows += k_rows.rows;
        v.data.extend_from_slice(&v_rows.data);
        v.rows += v_rows.rows;
    }

    pub fn occupied(&self, pos: usize, step: usize) -> bool {
        step >= 1
            && step <= self.blocks.len()
            && self.blocks[step - 1].positions.binary_search(&pos).is_ok()
    }

    /// Key blocks for a step-k query, in cache layout order.
    pub fn key_blocks(&self, up_to_step: usize) -> Vec<KeyBlock> {
        (1..=up_to_step)
            .map(|s| KeyBlock { step: s, positions: self.blocks[s - 1].positions.clone() })
            .collect()
    }
}

/// Everything the unroll records per (position, step): the mixed-state
/// ingredients and the router telemetry. Outer index is the position;
/// inner vectors cover the executed prefix (length K* of that position).
#[derive(Debug, Clone)]
pub struct LatentStates<T> {
    pub z: Vec<Vec<Vec<T>>>,
    pub router_logit: Vec<Vec<T>>,
    pub gates: Vec<Vec<T>>,
    /// Ground-truth probability after each pass, when targets were supplied.
    pub p_target: Vec<Vec<T>>,
}

impl<T: Real> LatentStates<T> {
    fn with_positions(n: usize) -> Self {
        LatentStates {
            z: vec![Vec::new(); n],
            router_logit: vec![Vec::new(); n],
            gates: vec![Vec::new(); n],
            p_target: vec![Vec::new(); n],
        }
    }
}

/// Saved activations of one layer of one step, enough to run its adjoint.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    pub x_in: Mat<T>,
    pub n1: Mat<T>,
    pub inv1: Vec<T>,
    pub q: Mat<T>,
    /// Attention probabilities per row, head-major over the visible keys.
    pub probs: Vec<Vec<T>>,
    pub att_cat: Mat<T>,
    pub x_mid: Mat<T>,
    pub n2: Mat<T>,
    pub inv2: Vec<T>,
    pub gate_pre: Mat<T>,
    pub up: Mat<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepTape<T> {
    pub active: Vec<usize>,
    pub layers: Vec<LayerTape<T>>,
    pub final_in: Mat<T>,
    pub final_inv: Vec<T>,
    /// Router hidden pre-activations for two-layer routers.
    pub router_hidden_pre: Option<Mat<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub steps: Vec<StepTape<T>>,
    pub cache: KvCache<T>,
}

/// A nudge added to the *input* of one grid cell before its pass runs; used
/// to probe which downstream states depend on that cell.
#[derive(Debug, Clone)]
pub struct InputNudge<T> {
    pub pos: usize,
    pub step: usize,
    pub delta: Vec<T>,
}

/// Knobs for probing and tests; `Default` is the production path.
pub struct UnrollOptions<'a, T> {
    /// Replace the configured τ (e.g. a tiny value to force all steps).
    pub tau_override: Option<f64>,
    /// Override the router gate at (pos, step); the forced zero at K_max
    /// still applies. Lets tests script exact pruning patterns.
    pub gate_script: Option<&'a dyn Fn(usize, usize) -> Option<f64>>,
    pub input_nudge: Option<&'a InputNudge<T>>,
    /// Record activations for a backward pass.
    pub with_tape: bool,
    /// Next-token ids per position; enables the p_target trajectory.
    pub targets: Option<&'a [u32]>,
}

impl<'a, T> Default for UnrollOptions<'a, T> {
    fn default() -> Self {
        UnrollOptions {
            tau_override: None,
            gate_script: None,
            input_nudge: None,
            with_tape: false,
            targets: None,
        }
    }
}

/// The unroll of one sequence: schedules, states, mixed prediction states,
/// and (when requested) the tape for the backward pass.
pub struct SeqUnroll<T> {
    pub tokens: Vec<u32>,
    pub schedules: Vec<HaltingSchedule<T>>,
    pub states: LatentStates<T>,
    pub z_final: Mat<T>,
    /// Positions still running each pass; `active_counts[k-1]` at pass k.
    pub active_counts: Vec<usize>,
    pub(crate) tape: Option<Tape<T>>,
}

impl<T: Real> SeqUnroll<T> {
    pub fn k_stars(&self) -> Vec<usize> {
        self.schedules.iter().map(|s| s.k_star).collect()
    }

    pub fn latent_lens(&self) -> Vec<crate::halting::LatentLen> {
        self.schedules.iter().map(|s| s.latent_len()).collect()
    }
}

pub struct LatentModel<T> {
    pub cfg: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Real> LatentModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config precision {} does not match instantiation {}",
                cfg.precision,
                T::PRECISION
            )));
        }
        let weights = Weights::init(&cfg, seed);
        Ok(LatentModel { cfg, weights })
    }

    pub fn from_parts(cfg: ModelConfig, weights: Weights<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(LatentModel { cfg, weights })
    }

    /// Input rows for a pass: token embeddings at step 1, the fed-back state
    /// of the previous pass after that.
    pub fn embed_step_input(&self, tokens: &[u32], step: usize, prev_z: Option<&Mat<T>>) -> Mat<T> {
        let d = self.cfg.d_model;
        if step == 1 {
            let mut x = Mat::zeros(tokens.len(), d);
            for (i, &t) in tokens.iter().enumerate() {
                x.row_mut(i).copy_from_slice(self.weights.embed.row(t as usize));
            }
            x
        } else {
            let prev = prev_z.expect("steps past 1 feed on the previous state");
            match &self.weights.feed {
                FeedWeights::Identity => prev.clone(),
                FeedWeights::Affine { w, b } => {
                    let mut x = math::matmul_nt(prev, w);
                    for i in 0..x.rows {
                        math::axpy(T::one(), b, x.row_mut(i));
                    }
                    x
                }
            }
        }
    }

    /// One latent pass for the active positions: appends this step's K/V to
    /// the cache and returns the per-row final states plus the layer tapes.
    pub(crate) fn forward_step(
        &self,
        step: usize,
        active: &[usize],
        input: &Mat<T>,
        cache: &mut KvCache<T>,
    ) -> (Mat<T>, Vec<LayerTape<T>>, Mat<T>, Vec<T>) {
        let cfg = &self.cfg;
        let (d, nh, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = real::<T>(1.0 / (hd as f64).sqrt());
        cache.begin_step(step, active);
        let mask = StepMask::build(step, active, cache.key_blocks(step));
        let mut x = input.clone();
        let mut tapes = Vec::with_capacity(cfg.n_layers);
        for (li, lw) in self.weights.layers.iter().enumerate() {
            let x_in = x.clone();
            let mut n1 = Mat::zeros(x.rows, d);
            let mut inv1 = Vec::with_capacity(x.rows);
            for i in 0..x.rows {
                inv1.push(math::rmsnorm(x_in.row(i), &lw.attn_norm, n1.row_mut(i)));
            }
            let mut q = math::matmul_nt(&n1, &lw.wq);
            let mut k_rows = math::matmul_nt(&n1, &lw.wk);
            let v_rows = math::matmul_nt(&n1, &lw.wv);
            for (i, &pos) in active.iter().enumerate() {
                math::rope_apply(q.row_mut(i), pos, nh, hd, cfg.rope_base, false);
                math::rope_apply(k_rows.row_mut(i), pos, nh, hd, cfg.rope_base, false);
            }
            cache.append_rows(step, li, &k_rows, &v_rows);
            // attention over all blocks ≤ step under the 2D visibility rule
            let mut att_cat = Mat::zeros(x.rows, d);
            let mut probs_rows = Vec::with_capacity(x.rows);
            for i in 0..x.rows {
                let qi = q.row(i);
                let n_vis: usize = mask.visible_prefix[i].iter().sum();
                let mut probs = vec![T::zero(); nh * n_vis];
                let out = att_cat.row_mut(i);
                for h in 0..nh {
                    let hr = h * hd..(h + 1) * hd;
                    let qh = &qi[hr.clone()];
                    let scores = &mut probs[h * n_vis..(h + 1) * n_vis];
                    let mut w = 0;
                    for (bi, block) in mask.key_blocks.iter().enumerate() {
                        let vis = mask.visible_prefix[i][bi];
                        let (bk, _) = &cache.block(block.step).layers[li];
                        for r in 0..vis {
                            scores[w] = math::dot(qh, &bk.row(r)[hr.clone()]) * scale;
                            w += 1;
                        }
                    }
                    debug_assert_eq!(w, n_vis);
                    math::softmax(scores);
                    let mut w = 0;
                    for (bi, block) in mask.key_blocks.iter().enumerate() {
                        let vis = mask.visible_prefix[i][bi];
                        let (_, bv) = &cache.block(block.step).layers[li];
                        for r in 0..vis {
                            math::axpy(scores[w], &bv.row(r)[hr.clone()], &mut out[hr.clone()]);
                            w += 1;
                        }
                    }
                }
                probs_rows.push(probs);
            }
            let mut x_mid = x_in.clone();
            let proj = math::matmul_nt(&att_cat, &lw.wo);
            for i in 0..x.rows {
                math::axpy(T::one(), proj.row(i), x_mid.row_mut(i));
            }
            let mut n2 = Mat::zeros(x.rows, d);
            let mut inv2 = Vec::with_capacity(x.rows);
            for i in 0..x.rows {
                inv2.push(math::rmsnorm(x_mid.row(i), &lw.mlp_norm, n2.row_mut(i)));
            }
            let gate_pre = math::matmul_nt(&n2, &lw.w_gate);
            let up = math::matmul_nt(&n2, &lw.w_up);
            let mut act = Mat::zeros(x.rows, cfg.d_ff);
            for i in 0..x.rows {
                let (g, u, a) = (gate_pre.row(i), up.row(i), act.row_mut(i));
                for j in 0..cfg.d_ff {
                    a[j] = math::silu(g[j]) * u[j];
                }
            }
            let down = math::matmul_nt(&act, &lw.w_down);
            let mut x_out = x_mid.clone();
            for i in 0..x.rows {
                math::axpy(T::one(), down.row(i), x_out.row_mut(i));
            }
            tapes.push(LayerTape {
                x_in,
                n1,
                inv1,
                q,
                probs: probs_rows,
                att_cat,
                x_mid: x_mid.clone(),
                n2,
                inv2,
                gate_pre,
                up,
            });
            x = x_out;
        }
        let mut z = Mat::zeros(x.rows, d);
        let mut final_inv = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            final_inv.push(math::rmsnorm(x.row(i), &self.weights.final_norm, z.row_mut(i)));
        }
        (z, tapes, x, final_inv)
    }

    pub(crate) fn router_logit_rows(&self, step: usize, z: &Mat<T>) -> (Vec<T>, Option<Mat<T>>) {
        match &self.weights.router {
            RouterWeights::None => (vec![T::zero(); z.rows], None),
            RouterWeights::SharedAffine(a) => {
                ((0..z.rows).map(|i| math::dot(z.row(i), &a.w) + a.b).collect(), None)
            }
            RouterWeights::PerStepAffine(heads) => {
                let a = &heads[step - 1];
                ((0..z.rows).map(|i| math::dot(z.row(i), &a.w) + a.b).collect(), None)
            }
            RouterWeights::SharedTwoLayer(t) => Self::two_layer_logits(t, z),
            RouterWeights::PerStepTwoLayer(heads) => Self::two_layer_logits(&heads[step - 1], z),
        }
    }

    fn two_layer_logits(t: &TwoLayerHead<T>, z: &Mat<T>) -> (Vec<T>, Option<Mat<T>>) {
        let mut pre = math::matmul_nt(z, &t.w1);
        for i in 0..pre.rows {
            math::axpy(T::one(), &t.b1, pre.row_mut(i));
        }
        let logits = (0..pre.rows)
            .map(|i| {
                let mut acc = t.b2;
                for (p, w) in pre.row(i).iter().zip(&t.w2) {
                    acc = acc + math::silu(*p) * *w;
                }
                acc
            })
            .collect();
        (logits, Some(pre))
    }

    /// Ground-truth probability of `target` under the LM head read-out of `z`.
    pub fn p_target_of(&self, z: &[T], target: u32) -> T {
        let logits: Vec<T> =
            (0..self.cfg.vocab_size).map(|v| math::dot(z, self.weights.lm_head.row(v))).collect();
        let lse = math::log_sum_exp(&logits);
        (logits[target as usize] - lse).exp()
    }

    /// Run the full adaptive unroll over one sequence of input tokens.
    pub fn unroll_seq(&self, tokens: &[u32], opts: &UnrollOptions<'_, T>) -> Result<SeqUnroll<T>> {
        let cfg = &self.cfg;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if n > cfg.max_seq_len {
            return Err(Error::ContextOverflow { pos: n, max: cfg.max_seq_len });
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::invalid(format!("token id {t} outside vocab {}", cfg.vocab_size)));
            }
        }
        if let Some(tg) = opts.targets {
            if tg.len() != n {
                return Err(Error::invalid("targets must align with tokens"));
            }
        }
        let tau = opts.tau_override.unwrap_or(cfg.reach_threshold);
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid(format!("threshold must be in (0,1], got {tau}")));
        }
        let tau_t = real::<T>(tau);
        let k_max = cfg.k_max();
        let adaptive = cfg.router != RouterKind::None;

        let mut cache = KvCache::new(cfg);
        let mut states = LatentStates::with_positions(n);
        let mut steps_tape: Vec<StepTape<T>> = Vec::new();
        let mut active: Vec<usize> = (0..n).collect();
        let mut reach: Vec<T> = vec![T::one(); n];
        let mut active_counts = Vec::new();
        let mut prev_z: Option<Mat<T>> = None;
        let mut prev_active: Vec<usize> = Vec::new();

        for step in 1..=k_max {
            if active.is_empty() {
                break;
            }
            let mut input = if step == 1 {
                self.embed_step_input(tokens, 1, None)
            } else {
                // gather the previous step's states for the still-active rows
                let prev = prev_z.as_ref().unwrap();
                let mut rows = Mat::zeros(active.len(), cfg.d_model);
                for (i, pos) in active.iter().enumerate() {
                    let pi = prev_active.binary_search(pos).expect("active shrinks monotonically");
                    rows.row_mut(i).copy_from_slice(prev.row(pi));
                }
                self.embed_step_input(tokens, step, Some(&rows))
            };
            if let Some(nudge) = opts.input_nudge {
                if nudge.step == step {
                    if let Some(i) = active.iter().position(|&p| p == nudge.pos) {
                        math::axpy(T::one(), &nudge.delta, input.row_mut(i));
                    }
                }
            }
            let (z, layer_tapes, final_in, final_inv) =
                self.forward_step(step, &active, &input, &mut cache);
            let (logits, hidden_pre) = self.router_logit_rows(step, &z);

            let mut next_active = Vec::with_capacity(active.len());
            for (i, &pos) in active.iter().enumerate() {
                let mut g = if !adaptive {
                    // no router: run the full budget, exit only at K_max
                    T::one()
                } else {
                    clamp_gate(math::sigmoid(logits[i]))
                };
                if let Some(script) = opts.gate_script {
                    if let Some(sg) = script(pos, step) {
                        g = real::<T>(sg);
                    }
                }
                if step == k_max {
                    g = T::zero();
                }
                states.z[pos].push(z.row(i).to_vec());
                states.router_logit[pos].push(logits[i]);
                states.gates[pos].push(g);
                if let Some(tg) = opts.targets {
                    states.p_target[pos].push(self.p_target_of(z.row(i), tg[pos]));
                }
                let next_reach = reach[pos] * g;
                if step < k_max && next_reach >= tau_t {
                    reach[pos] = next_reach;
                    next_active.push(pos);
                }
            }
            active_counts.push(active.len());
            if opts.with_tape {
                steps_tape.push(StepTape {
                    active: active.clone(),
                    layers: layer_tapes,
                    final_in,
                    final_inv,
                    router_hidden_pre: hidden_pre,
                });
            }
            prev_active = std::mem::take(&mut active);
            active = next_active;
            let keep = &prev_active;
            // prev_z rows follow prev_active indexing
            let mut pz = Mat::zeros(keep.len(), cfg.d_model);
            for (i, &pos) in keep.iter().enumerate() {
                pz.row_mut(i).copy_from_slice(&states.z[pos][step - 1]);
            }
            prev_z = Some(pz);
        }

        // Halting schedules over the executed prefixes; without a router the
        // output state is simply the final pass's state.
        let mut schedules = Vec::with_capacity(n);
        let mut z_final = Mat::zeros(n, cfg.d_model);
        for pos in 0..n {
            if adaptive {
                let sched = HaltingSchedule::from_executed_prefix(&states.gates[pos], tau_t)?;
                let steps_z = Mat::from_rows(states.z[pos].clone());
                let mixed = crate::halting::mix_states(&sched.hat_exit, &steps_z)?;
                z_final.row_mut(pos).copy_from_slice(&mixed);
                schedules.push(sched);
            } else {
                let last = states.z[pos].last().unwrap();
                z_final.row_mut(pos).copy_from_slice(last);
                let k_star = states.z[pos].len();
                let mut gates = vec![T::one(); k_star];
                gates[k_star - 1] = T::zero();
                // degenerate schedule: all mass exits at the last pass
                let gv = crate::halting::GateVector::new(gates)?;
                schedules.push(HaltingSchedule::from_gates(&gv, tau_t)?);
            }
        }
        Ok(SeqUnroll {
            tokens: tokens.to_vec(),
            schedules,
            states,
            z_final,
            active_counts,
            tape: if opts.with_tape { Some(Tape { steps: steps_tape, cache }) } else { None },
        })
    }

    /// LM-head logits for a batch of states.
    pub fn lm_logits(&self, z: &Mat<T>) -> Mat<T> {
        math::matmul_nt(z, &self.weights.lm_head)
    }
}
