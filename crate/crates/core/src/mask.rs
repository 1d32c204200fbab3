//! Visibility over the (position, latent step) grid.
//!
//! A grid cell (t, k) may attend to (t', k') iff t' ≤ t and k' ≤ k and the
//! destination cell was actually executed. Latent steps therefore run in
//! parallel across positions without splicing extra slots into the 1D
//! sequence: at k = 1 the rule collapses to the ordinary causal mask, and a
//! cell never sees a *later* step of an *earlier* position, which is what
//! separates this scheme from the sequential insert-into-the-stream one.
//!
//! Position ids are shared across steps: every (t, k) carries position t.

use crate::real::Real;

/// One cell of the latent grid. `pos` is 0-based; `step` is 1-based to match
/// the halting math (step 1 is the pass every token always runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridIndex {
    pub pos: usize,
    pub step: usize,
}

impl GridIndex {
    pub fn new(pos: usize, step: usize) -> Self {
        assert!(step >= 1, "steps are 1-based");
        GridIndex { pos, step }
    }

    /// Rotary/positional id of this cell: the token position, regardless of
    /// step, so latent passes of one token stack on a single position.
    pub fn position_id(self) -> usize {
        self.pos
    }
}

/// Occupancy of the full grid: which (pos, step) cells executed. Per
/// position that is a prefix of steps, 1..=K*.
#[derive(Debug, Clone)]
pub struct ParallelMask {
    n_pos: usize,
    k_max: usize,
    k_star: Vec<usize>,
}

impl ParallelMask {
    /// All cells of all steps occupied (no pruning).
    pub fn full(n_pos: usize, k_max: usize) -> Self {
        ParallelMask { n_pos, k_max, k_star: vec![k_max; n_pos] }
    }

    /// Occupancy from per-position executed prefix lengths.
    pub fn from_k_stars(k_star: Vec<usize>, k_max: usize) -> Self {
        assert!(k_star.iter().all(|&k| k >= 1 && k <= k_max));
        ParallelMask { n_pos: k_star.len(), k_max, k_star }
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn active(&self, cell: GridIndex) -> bool {
        cell.pos < self.n_pos && cell.step >= 1 && cell.step <= self.k_star[cell.pos]
    }

    /// May `src` attend to `dst`?
    pub fn visible(&self, src: GridIndex, dst: GridIndex) -> bool {
        dst.pos <= src.pos && dst.step <= src.step && self.active(dst)
    }
}

/// Blocked score for masked pairs: most negative finite value of the working
/// precision, halved so adding a real score cannot overflow to −∞ and poison
/// the softmax with NaNs.
#[inline]
pub fn neg_sentinel<T: Real>() -> T {
    T::min_value() / (T::one() + T::one())
}

/// Keys cached for one latent step, positions ascending.
#[derive(Debug, Clone)]
pub struct KeyBlock {
    pub step: usize,
    pub positions: Vec<usize>,
}

/// Mask rows for the queries of one latent step against a step-major,
/// position-minor key layout (all step-1 keys, then step-2 keys, ...).
/// Because block positions are sorted, each row reduces to a visible prefix
/// length per block.
#[derive(Debug, Clone)]
pub struct StepMask {
    pub step: usize,
    pub query_pos: Vec<usize>,
    pub key_blocks: Vec<KeyBlock>,
    /// `[query][block]` → number of leading keys of that block the query sees.
    pub visible_prefix: Vec<Vec<usize>>,
}

impl StepMask {
    /// Build the mask for queries at `step` over the given key blocks
    /// (steps 1..=step, in order; the last block is the in-flight step
    /// itself, so in-step attention stays causal).
    pub fn build(step: usize, query_pos: &[usize], key_blocks: Vec<KeyBlock>) -> Self {
        assert!(step >= 1);
        assert_eq!(key_blocks.len(), step, "one block per step up to the query step");
        for (i, b) in key_blocks.iter().enumerate() {
            assert_eq!(b.step, i + 1);
            assert!(b.positions.windows(2).all(|w| w[0] < w[1]), "block positions ascending");
        }
        let visible_prefix = query_pos
            .iter()
            .map(|&q| {
                key_blocks
                    .iter()
                    .map(|b| b.positions.partition_point(|&p| p <= q))
                    .collect()
            })
            .collect();
        StepMask { step, query_pos: query_pos.to_vec(), key_blocks, visible_prefix }
    }

    pub fn total_keys(&self) -> usize {
        self.key_blocks.iter().map(|b| b.positions.len()).sum()
    }

    /// Additive mask row for one query: 0 where visible, the negative
    /// sentinel where blocked, laid out block-major like the KV cache.
    pub fn additive_row<T: Real>(&self, query: usize) -> Vec<T> {
        let mut row = Vec::with_capacity(self.total_keys());
        for (b, block) in self.key_blocks.iter().enumerate() {
            let vis = self.visible_prefix[query][b];
            for i in 0..block.positions.len() {
                row.push(if i < vis { T::zero() } else { neg_sentinel::<T>() });
            }
        }
        row
    }
}
