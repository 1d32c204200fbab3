//! Reference implementations used to cross-check the engine.
//!
//! Everything here is written for obviousness, not speed: flat layouts, a
//! visibility predicate evaluated per key instead of prefix bookkeeping, and
//! halting arithmetic recomputed as plain running products. Only the weight
//! tensors and the scalar helpers in [`crate::math`] are shared with the
//! engine, so a bug in the cache, the mask builder, or the schedule
//! machinery shows up as a divergence.

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::halting::{GateVector, GATE_EPS};
use crate::math::{self, Mat};
use crate::model::{FeedWeights, LatentModel, RouterWeights};
use crate::real::{real, Real};

/// The grid unroll recomputed the simple way: one flat key/value list per
/// layer in execution order, masked per query by the visibility predicate.
pub struct DenseUnroll<T> {
    /// Executed states per position, one row per pass.
    pub z: Vec<Vec<Vec<T>>>,
    pub gates: Vec<Vec<T>>,
    pub k_stars: Vec<usize>,
    pub z_final: Mat<T>,
}

fn clamp_unit<T: Real>(g: T) -> T {
    let lo = real::<T>(GATE_EPS);
    let hi = T::one() - lo;
    g.max(lo).min(hi)
}

fn router_logit_plain<T: Real>(router: &RouterWeights<T>, step: usize, z: &[T]) -> T {
    let affine = |w: &[T], b: T| {
        let mut acc = b;
        for (x, wi) in z.iter().zip(w) {
            acc = acc + *x * *wi;
        }
        acc
    };
    let two_layer = |t: &crate::model::TwoLayerHead<T>| {
        let mut acc = t.b2;
        for j in 0..t.w2.len() {
            let mut pre = t.b1[j];
            for (x, wi) in z.iter().zip(t.w1.row(j)) {
                pre = pre + *x * *wi;
            }
            acc = acc + math::silu(pre) * t.w2[j];
        }
        acc
    };
    match router {
        RouterWeights::None => T::zero(),
        RouterWeights::SharedAffine(a) => affine(&a.w, a.b),
        RouterWeights::PerStepAffine(heads) => affine(&heads[step - 1].w, heads[step - 1].b),
        RouterWeights::SharedTwoLayer(t) => two_layer(t),
        RouterWeights::PerStepTwoLayer(heads) => two_layer(&heads[step - 1]),
    }
}

fn feed_plain<T: Real>(feed: &FeedWeights<T>, z: &[T]) -> Vec<T> {
    match feed {
        FeedWeights::Identity => z.to_vec(),
        FeedWeights::Affine { w, b } => {
            let mut out = b.clone();
            for (o, out_v) in out.iter_mut().enumerate() {
                for (x, wi) in z.iter().zip(w.row(o)) {
                    *out_v = *out_v + *x * *wi;
                }
            }
            out
        }
    }
}

/// Unroll `tokens` with threshold `tau`, recomputing everything densely.
pub fn dense_forward<T: Real>(model: &LatentModel<T>, tokens: &[u32], tau: f64) -> DenseUnroll<T> {
    let cfg = &model.cfg;
    let (d, nh, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let n = tokens.len();
    let k_max = cfg.k_max();
    let tau_t = real::<T>(tau);
    let scale = real::<T>(1.0 / (hd as f64).sqrt());
    let sentinel = T::min_value() / real::<T>(2.0);

    let mut z_grid: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut gates: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut run_reach: Vec<T> = vec![T::one(); n];
    let mut running: Vec<bool> = vec![true; n];
    // flat key/value list per layer, plus the (pos, step) of each entry
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut kv: Vec<(Vec<Vec<T>>, Vec<Vec<T>>)> = vec![(Vec::new(), Vec::new()); cfg.n_layers];

    for step in 1..=k_max {
        let active: Vec<usize> = (0..n).filter(|&p| running[p]).collect();
        if active.is_empty() {
            break;
        }
        let mut x: Vec<Vec<T>> = active
            .iter()
            .map(|&p| {
                if step == 1 {
                    model.weights.embed.row(tokens[p] as usize).to_vec()
                } else {
                    feed_plain(&model.weights.feed, &z_grid[p][step - 2])
                }
            })
            .collect();
        for &p in &active {
            cells.push((p, step));
        }
        for (li, lw) in model.weights.layers.iter().enumerate() {
            // project and stash this pass's keys and values first
            let mut n1: Vec<Vec<T>> = Vec::with_capacity(active.len());
            let mut q: Vec<Vec<T>> = Vec::with_capacity(active.len());
            for (i, &p) in active.iter().enumerate() {
                let mut nr = vec![T::zero(); d];
                math::rmsnorm(&x[i], &lw.attn_norm, &mut nr);
                let mut qi = vec![T::zero(); d];
                let mut ki = vec![T::zero(); d];
                let mut vi = vec![T::zero(); d];
                for o in 0..d {
                    qi[o] = math::dot(&nr, lw.wq.row(o));
                    ki[o] = math::dot(&nr, lw.wk.row(o));
                    vi[o] = math::dot(&nr, lw.wv.row(o));
                }
                math::rope_apply(&mut qi, p, nh, hd, cfg.rope_base, false);
                math::rope_apply(&mut ki, p, nh, hd, cfg.rope_base, false);
                kv[li].0.push(ki);
                kv[li].1.push(vi);
                n1.push(nr);
                q.push(qi);
            }
            let n_keys = kv[li].0.len();
            for (i, &p) in active.iter().enumerate() {
                let mut att = vec![T::zero(); d];
                for h in 0..nh {
                    let hr = h * hd..(h + 1) * hd;
                    let mut scores = vec![T::zero(); n_keys];
                    for (c, &(cp, cs)) in cells.iter().enumerate() {
                        scores[c] = if cp <= p && cs <= step {
                            math::dot(&q[i][hr.clone()], &kv[li].0[c][hr.clone()]) * scale
                        } else {
                            sentinel
                        };
                    }
                    math::softmax(&mut scores);
                    for (c, w) in scores.iter().enumerate() {
                        math::axpy(*w, &kv[li].1[c][hr.clone()], &mut att[hr.clone()]);
                    }
                }
                let mut proj = vec![T::zero(); d];
                for o in 0..d {
                    proj[o] = math::dot(&att, lw.wo.row(o));
                }
                math::axpy(T::one(), &proj, &mut x[i]);
                let mut n2 = vec![T::zero(); d];
                math::rmsnorm(&x[i], &lw.mlp_norm, &mut n2);
                let mut mlp = vec![T::zero(); d];
                for o in 0..d {
                    let mut acc = T::zero();
                    for j in 0..cfg.d_ff {
                        let gate = math::silu(math::dot(&n2, lw.w_gate.row(j)));
                        let up = math::dot(&n2, lw.w_up.row(j));
                        acc = acc + lw.w_down.row(o)[j] * gate * up;
                    }
                    mlp[o] = acc;
                }
                math::axpy(T::one(), &mlp, &mut x[i]);
            }
        }
        for (i, &p) in active.iter().enumerate() {
            let mut z = vec![T::zero(); d];
            math::rmsnorm(&x[i], &model.weights.final_norm, &mut z);
            let mut g = if matches!(model.weights.router, RouterWeights::None) {
                T::one()
            } else {
                clamp_unit(math::sigmoid(router_logit_plain(&model.weights.router, step, &z)))
            };
            if step == k_max {
                g = T::zero();
            }
            z_grid[p].push(z);
            gates[p].push(g);
            let next = run_reach[p] * g;
            if step == k_max || next < tau_t {
                running[p] = false;
            } else {
                run_reach[p] = next;
            }
        }
    }

    let mut z_final = Mat::zeros(n, d);
    let mut k_stars = Vec::with_capacity(n);
    for p in 0..n {
        let ks = gates[p].len();
        k_stars.push(ks);
        if matches!(model.weights.router, RouterWeights::None) {
            z_final.row_mut(p).copy_from_slice(&z_grid[p][ks - 1]);
            continue;
        }
        // truncated exit weights by running product, residual on the last pass
        let mut reach = T::one();
        for k in 0..ks {
            let w = if k < ks - 1 { reach * (T::one() - gates[p][k]) } else { reach };
            math::axpy(w, &z_grid[p][k], z_final.row_mut(p));
            reach = reach * gates[p][k];
        }
    }
    DenseUnroll { z: z_grid, gates, k_stars, z_final }
}

/// Plain causal transformer forward over explicit input rows: row i is
/// position i and attends to rows 0..=i. Returns the post-final-norm states.
pub fn causal_forward<T: Real>(model: &LatentModel<T>, inputs: &Mat<T>) -> Mat<T> {
    let cfg = &model.cfg;
    let (d, nh, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let rows = inputs.rows;
    let scale = real::<T>(1.0 / (hd as f64).sqrt());
    let mut x = inputs.clone();
    for lw in &model.weights.layers {
        let mut n1 = Mat::zeros(rows, d);
        for i in 0..rows {
            math::rmsnorm(x.row(i), &lw.attn_norm, n1.row_mut(i));
        }
        let mut q = math::matmul_nt(&n1, &lw.wq);
        let mut k = math::matmul_nt(&n1, &lw.wk);
        let v = math::matmul_nt(&n1, &lw.wv);
        for i in 0..rows {
            math::rope_apply(q.row_mut(i), i, nh, hd, cfg.rope_base, false);
            math::rope_apply(k.row_mut(i), i, nh, hd, cfg.rope_base, false);
        }
        let mut att = Mat::zeros(rows, d);
        for i in 0..rows {
            for h in 0..nh {
                let hr = h * hd..(h + 1) * hd;
                let mut scores: Vec<T> =
                    (0..=i).map(|j| math::dot(&q.row(i)[hr.clone()], &k.row(j)[hr.clone()]) * scale).collect();
                math::softmax(&mut scores);
                for (j, w) in scores.iter().enumerate() {
                    math::axpy(*w, &v.row(j)[hr.clone()], &mut att.row_mut(i)[hr.clone()]);
                }
            }
        }
        let proj = math::matmul_nt(&att, &lw.wo);
        for i in 0..rows {
            math::axpy(T::one(), proj.row(i), x.row_mut(i));
        }
        let mut n2 = Mat::zeros(rows, d);
        for i in 0..rows {
            math::rmsnorm(x.row(i), &lw.mlp_norm, n2.row_mut(i));
        }
        let gate_pre = math::matmul_nt(&n2, &lw.w_gate);
        let up = math::matmul_nt(&n2, &lw.w_up);
        let mut act = Mat::zeros(rows, cfg.d_ff);
        for i in 0..rows {
            for j in 0..cfg.d_ff {
                act.row_mut(i)[j] = math::silu(gate_pre.row(i)[j]) * up.row(i)[j];
            }
        }
        let down = math::matmul_nt(&act, &lw.w_down);
        for i in 0..rows {
            math::axpy(T::one(), down.row(i), x.row_mut(i));
        }
    }
    let mut z = Mat::zeros(rows, d);
    for i in 0..rows {
        math::rmsnorm(x.row(i), &model.weights.final_norm, z.row_mut(i));
    }
    z
}

/// Token embeddings as input rows for [`causal_forward`].
pub fn embed_rows<T: Real>(model: &LatentModel<T>, tokens: &[u32]) -> Mat<T> {
    let mut x = Mat::zeros(tokens.len(), model.cfg.d_model);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(model.weights.embed.row(t as usize));
    }
    x
}

/// The contrasting scheme: latent passes spliced into the 1D sequence as
/// extra slots with their own position ids, attention plain causal over the
/// expanded sequence. `lens[t]` extra slots follow token t, each fed the
/// previous slot's output state. `nudge` adds a delta to one slot's input.
pub struct SequentialTrace<T> {
    /// (token index, depth) per expanded slot; depth 0 is the token row.
    pub cells: Vec<(usize, usize)>,
    pub states: Mat<T>,
}

pub fn sequential_forward<T: Real>(
    model: &LatentModel<T>,
    tokens: &[u32],
    lens: &[usize],
    nudge: Option<(usize, &[T])>,
) -> SequentialTrace<T> {
    assert_eq!(tokens.len(), lens.len());
    let d = model.cfg.d_model;
    let mut cells = Vec::new();
    for (t, &l) in lens.iter().enumerate() {
        for k in 0..=l {
            cells.push((t, k));
        }
    }
    let total = cells.len();
    let mut inputs = Mat::zeros(total, d);
    let mut states = Mat::zeros(total, d);
    for s in 0..total {
        let (t, k) = cells[s];
        let row: Vec<T> = if k == 0 {
            model.weights.embed.row(tokens[t] as usize).to_vec()
        } else {
            feed_plain(&model.weights.feed, states.row(s - 1))
        };
        inputs.row_mut(s).copy_from_slice(&row);
        if let Some((at, delta)) = nudge {
            if at == s {
                math::axpy(T::one(), delta, inputs.row_mut(s));
            }
        }
        // each new slot's input depends on the previous slot's output, so
        // the prefix is recomputed from scratch every time
        let mut prefix = Mat::zeros(s + 1, d);
        prefix.data.copy_from_slice(&inputs.data[..(s + 1) * d]);
        let z = causal_forward(model, &prefix);
        states.row_mut(s).copy_from_slice(z.row(s));
    }
    SequentialTrace { cells, states }
}

/// Simulate the halting chain: at pass k continue with probability g⁽ᵏ⁾,
/// otherwise exit. Returns empirical exit frequencies per pass.
pub fn halting_mc<T: Real>(gates: &GateVector<T>, trials: u64, seed: u64) -> Vec<f64> {
    let gs = gates.gates();
    let mut counts = vec![0u64; gs.len()];
    let mut rng = SmallRng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut k = 0;
        loop {
            let u: f64 = rng.random();
            if u >= gs[k].into_f64() {
                break;
            }
            k += 1;
        }
        counts[k] += 1;
    }
    counts.iter().map(|&c| c as f64 / trials as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halting::compute_exit;
    use crate::halting::compute_reach;
    use crate::model::{FeedKind, ModelConfig, RouterKind, UnrollOptions};
    use crate::real::Precision;

    fn cfg32(router: RouterKind, feed: FeedKind, l_max: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_latent_len: l_max,
            reach_threshold: 0.3,
            router,
            router_hidden: 6,
            feed,
            detach_router_input: true,
            rope_base: 10000.0,
            max_seq_len: 16,
            precision: Precision::F32,
        }
    }

    fn spread_router32(model: &mut LatentModel<f32>) {
        let tweak = |w: &mut [f32], s: f64, amp: f64| {
            for (j, v) in w.iter_mut().enumerate() {
                *v = (((j as f64) * 0.61 + s).sin() * amp) as f32;
            }
        };
        match &mut model.weights.router {
            RouterWeights::SharedAffine(a) => {
                tweak(&mut a.w, 0.5, 2.5);
                a.b = 0.3;
            }
            RouterWeights::PerStepAffine(heads) => {
                for (s, a) in heads.iter_mut().enumerate() {
                    tweak(&mut a.w, s as f64, 2.5);
                    a.b = 0.4 - s as f32 * 0.2;
                }
            }
            RouterWeights::SharedTwoLayer(t) => {
                tweak(&mut t.w2, 0.8, 1.5);
                t.b2 = 0.3;
            }
            RouterWeights::PerStepTwoLayer(heads) => {
                for (s, t) in heads.iter_mut().enumerate() {
                    tweak(&mut t.w2, s as f64 + 0.2, 1.5);
                    t.b2 = 0.2;
                }
            }
            RouterWeights::None => {}
        }
    }

    #[test]
    fn engine_matches_dense_recompute_across_shapes() {
        let shapes = [
            (RouterKind::SharedAffine, FeedKind::Identity, 3),
            (RouterKind::PerStepAffine, FeedKind::Affine, 2),
            (RouterKind::SharedTwoLayer, FeedKind::Identity, 2),
            (RouterKind::PerStepTwoLayer, FeedKind::Affine, 3),
            (RouterKind::None, FeedKind::Identity, 2),
        ];
        for (i, &(router, feed, l_max)) in shapes.iter().enumerate() {
            let cfg = cfg32(router, feed, l_max);
            let mut model = LatentModel::<f32>::new(cfg, 100 + i as u64).unwrap();
            spread_router32(&mut model);
            let tokens = [7u32, 2, 11, 0, 5, 9, 3];
            let seq = model.unroll_seq(&tokens, &UnrollOptions::default()).unwrap();
            let dense = dense_forward(&model, &tokens, model.cfg.reach_threshold);
            assert_eq!(seq.k_stars(), dense.k_stars, "shape {i}");
            let diff = seq.z_final.max_abs_diff(&dense.z_final);
            assert!(diff <= 1e-4, "shape {i}: z_final diverges by {diff}");
            for p in 0..tokens.len() {
                for (k, (a, b)) in
                    seq.states.gates[p].iter().zip(&dense.gates[p]).enumerate()
                {
                    assert!((a - b).abs() <= 1e-4, "gate ({p},{k})");
                }
            }
        }
    }

    #[test]
    fn strict_threshold_disables_pruning_in_both() {
        let cfg = cfg32(RouterKind::SharedAffine, FeedKind::Identity, 3);
        let mut model = LatentModel::<f32>::new(cfg, 9).unwrap();
        spread_router32(&mut model);
        let tokens = [1u32, 8, 4, 12];
        // gates clamp at 1e-6, so reach before the final pass is at least
        // 1e-6^(K_max−1); any threshold under that can never prune
        let opts = UnrollOptions { tau_override: Some(1e-30), ..Default::default() };
        let seq = model.unroll_seq(&tokens, &opts).unwrap();
        let dense = dense_forward(&model, &tokens, 1e-30);
        assert!(seq.k_stars().iter().all(|&k| k == model.cfg.k_max()));
        assert_eq!(seq.k_stars(), dense.k_stars);
        assert!(seq.z_final.max_abs_diff(&dense.z_final) <= 1e-4);
    }

    #[test]
    fn single_pass_engine_is_a_causal_transformer() {
        let cfg = cfg32(RouterKind::SharedAffine, FeedKind::Identity, 0);
        let model = LatentModel::<f32>::new(cfg, 17).unwrap();
        let tokens = [3u32, 9, 1, 6, 0, 12];
        let seq = model.unroll_seq(&tokens, &UnrollOptions::default()).unwrap();
        let z = causal_forward(&model, &embed_rows(&model, &tokens));
        let diff = seq.z_final.max_abs_diff(&z);
        assert!(diff <= 1e-6, "single-pass unroll differs from causal forward by {diff}");
        assert!(seq.k_stars().iter().all(|&k| k == 1));
    }

    #[test]
    fn grid_and_spliced_schemes_disagree_on_purpose() {
        let cfg = cfg32(RouterKind::SharedAffine, FeedKind::Identity, 1);
        let model = LatentModel::<f32>::new(cfg, 23).unwrap();
        let tokens = [4u32, 10, 2];
        let lens = [1usize, 1, 1];
        let delta = vec![0.05f32; model.cfg.d_model];

        let base = sequential_forward(&model, &tokens, &lens, None);
        // slot 1 is token 0's first latent pass; nudging it shifts every
        // later slot in the spliced scheme, token rows included
        let bumped = sequential_forward(&model, &tokens, &lens, Some((1, &delta)));
        let slot_x2 = base.cells.iter().position(|&c| c == (1, 0)).unwrap();
        let moved: f32 = base
            .states
            .row(slot_x2)
            .iter()
            .zip(bumped.states.row(slot_x2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(moved > 0.0, "spliced scheme should leak the nudge into the next token");

        // the grid scheme keeps pass 1 of every position independent of any
        // pass-2 state: same nudge, zero movement, bitwise
        let nudge = crate::model::InputNudge { pos: 0, step: 2, delta: delta.clone() };
        let opts = UnrollOptions { input_nudge: Some(&nudge), ..Default::default() };
        let plain = model.unroll_seq(&tokens, &UnrollOptions::default()).unwrap();
        let nudged = model.unroll_seq(&tokens, &opts).unwrap();
        for p in 0..tokens.len() {
            assert_eq!(
                plain.states.z[p][0], nudged.states.z[p][0],
                "pass-1 state of position {p} must not see a pass-2 nudge"
            );
        }
    }

    #[test]
    fn chain_simulation_matches_exit_distribution() {
        let gates = GateVector::new(vec![0.5f64, 0.5, 0.5, 0.0]).unwrap();
        let trials = 100_000u64;
        let freq = halting_mc(&gates, trials, 1234);
        let reach = compute_reach(gates.gates());
        let exit = compute_exit(gates.gates(), &reach);
        for k in 0..exit.len() {
            let p = exit[k];
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                (freq[k] - p).abs() <= 3.0 * sigma,
                "pass {k}: empirical {} vs analytic {p} (3sigma {})",
                freq[k],
                3.0 * sigma
            );
        }
    }
}
