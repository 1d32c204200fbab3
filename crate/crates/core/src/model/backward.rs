//! Reverse pass over a taped unroll.
//!
//! Steps unwind in reverse order. Key/value gradients flow backwards across
//! steps: pass k's attention scatters into the cached K/V of every block
//! j ≤ k, and those accumulators are consumed when block j's own pass is
//! unwound. The fed-back input of pass k+1 likewise deposits gradient on
//! pass k's output state. The truncation point K* and the gate clamp are
//! treated as constants of the backward pass, and p_target never carries
//! gradient.

use crate::halting::{clamp_gate, mix_weight_backward};
use crate::mask::StepMask;
use crate::math::{self, Mat};
use crate::real::{real, Real};

use super::{
    FeedWeights, KvCache, LatentModel, LayerTape, LayerWeights, RouterKind, RouterWeights,
    SeqUnroll, StepTape, TwoLayerHead, Weights,
};

impl<T: Real> LatentModel<T> {
    /// Accumulate parameter gradients for one taped sequence.
    ///
    /// `d_z_final` is ∂L/∂z_final per position. `d_gate_direct` carries loss
    /// terms that touch gates outside the mixing weights (the adaptive
    /// penalty), aligned with each position's executed prefix; mixing-weight
    /// contributions are added on top. Gradient reaches a gate's logit only
    /// when the stored gate actually came from the router at that step (not
    /// forced, not clamped, not scripted).
    pub fn backward_seq(
        &self,
        seq: &SeqUnroll<T>,
        d_z_final: &Mat<T>,
        d_gate_direct: Option<&[Vec<T>]>,
        grads: &mut Weights<T>,
    ) {
        let cfg = &self.cfg;
        let tape = seq.tape.as_ref().expect("unroll must be taped for backward");
        let n = seq.tokens.len();
        let k_used = tape.steps.len();
        let adaptive = cfg.router != RouterKind::None;

        // ∂L/∂z per executed (position, step), filled by the mixing, router
        // and feed paths, consumed step by step.
        let mut d_z: Vec<Vec<Vec<T>>> = (0..n)
            .map(|p| seq.states.z[p].iter().map(|z| vec![T::zero(); z.len()]).collect())
            .collect();
        let mut d_gates: Vec<Vec<T>> =
            (0..n).map(|p| vec![T::zero(); seq.states.gates[p].len()]).collect();

        // mixing: z_final = Σ_k hat_k z_k, with hat a function of the gates
        for pos in 0..n {
            let dzf = d_z_final.row(pos);
            if adaptive {
                let sched = &seq.schedules[pos];
                let ks = sched.k_star;
                let mut d_hat = Vec::with_capacity(ks);
                for k in 0..ks {
                    d_hat.push(math::dot(dzf, &seq.states.z[pos][k]));
                    math::axpy(sched.hat_exit[k], dzf, &mut d_z[pos][k]);
                }
                let d_g = mix_weight_backward(&seq.states.gates[pos], &d_hat);
                for k in 0..ks {
                    d_gates[pos][k] = d_gates[pos][k] + d_g[k];
                }
            } else {
                let last = d_z[pos].len() - 1;
                math::axpy(T::one(), dzf, &mut d_z[pos][last]);
            }
        }
        if let Some(direct) = d_gate_direct {
            assert_eq!(direct.len(), n);
            for pos in 0..n {
                assert_eq!(direct[pos].len(), d_gates[pos].len());
                for k in 0..direct[pos].len() {
                    d_gates[pos][k] = d_gates[pos][k] + direct[pos][k];
                }
            }
        }

        // gates → router logits → router parameters (and, when the router
        // input is not detached, back into the states it read)
        if adaptive {
            for (ki, st) in tape.steps.iter().enumerate() {
                let step = ki + 1;
                if step == cfg.k_max() {
                    continue; // forced gate, no logit behind it
                }
                for (i, &pos) in st.active.iter().enumerate() {
                    let logit = seq.states.router_logit[pos][ki];
                    let g_raw = math::sigmoid(logit);
                    let g_clamped = clamp_gate(g_raw);
                    if seq.states.gates[pos][ki] != g_clamped {
                        continue; // scripted gate: the logit did not produce it
                    }
                    if g_clamped != g_raw {
                        continue; // clamp active: zero slope
                    }
                    let d_logit = d_gates[pos][ki] * g_raw * (T::one() - g_raw);
                    if d_logit == T::zero() {
                        continue;
                    }
                    let z_row = &seq.states.z[pos][ki];
                    let d_z_row =
                        if cfg.detach_router_input { None } else { Some(&mut d_z[pos][ki]) };
                    self.router_logit_backward(step, i, st, z_row, d_logit, grads, d_z_row);
                }
            }
        }

        // transformer backward, last executed step first
        let cache = &tape.cache;
        let mut d_kv: Vec<Vec<(Mat<T>, Mat<T>)>> = (0..cfg.n_layers)
            .map(|li| {
                (0..k_used)
                    .map(|s| {
                        let rows = cache.block(s + 1).layers[li].0.rows;
                        (Mat::zeros(rows, cfg.d_model), Mat::zeros(rows, cfg.d_model))
                    })
                    .collect()
            })
            .collect();

        for ki in (0..k_used).rev() {
            let step = ki + 1;
            let st = &tape.steps[ki];
            let rows = st.active.len();
            // one begin_step per pass, so block rows line up with the active set
            debug_assert_eq!(&cache.block(step).positions, &st.active);
            let mask = StepMask::build(step, &st.active, cache.key_blocks(step));

            let mut dz_rows = Mat::zeros(rows, cfg.d_model);
            for (i, &pos) in st.active.iter().enumerate() {
                dz_rows.row_mut(i).copy_from_slice(&d_z[pos][ki]);
            }
            // final norm
            let mut d_x = Mat::zeros(rows, cfg.d_model);
            for i in 0..rows {
                math::rmsnorm_bwd(
                    st.final_in.row(i),
                    &self.weights.final_norm,
                    st.final_inv[i],
                    dz_rows.row(i),
                    d_x.row_mut(i),
                    &mut grads.final_norm,
                );
            }
            for li in (0..cfg.n_layers).rev() {
                d_x = self.layer_backward(
                    li,
                    &st.active,
                    &st.layers[li],
                    &mask,
                    cache,
                    step,
                    &d_x,
                    &mut d_kv[li],
                    &mut grads.layers[li],
                );
            }
            // input rows: token embedding at step 1, the fed-back state after
            if step == 1 {
                for (i, &pos) in st.active.iter().enumerate() {
                    let tok = seq.tokens[pos] as usize;
                    math::axpy(T::one(), d_x.row(i), grads.embed.row_mut(tok));
                }
            } else {
                match (&self.weights.feed, &mut grads.feed) {
                    (FeedWeights::Identity, _) => {
                        for (i, &pos) in st.active.iter().enumerate() {
                            math::axpy(T::one(), d_x.row(i), &mut d_z[pos][ki - 1]);
                        }
                    }
                    (FeedWeights::Affine { w, .. }, FeedWeights::Affine { w: gw, b: gb }) => {
                        let mut prev = Mat::zeros(rows, cfg.d_model);
                        for (i, &pos) in st.active.iter().enumerate() {
                            prev.row_mut(i).copy_from_slice(&seq.states.z[pos][ki - 1]);
                        }
                        math::matmul_acc_dw(&d_x, &prev, gw);
                        for i in 0..rows {
                            math::axpy(T::one(), d_x.row(i), gb);
                        }
                        let mut d_prev = Mat::zeros(rows, cfg.d_model);
                        math::matmul_acc_dx(&d_x, w, &mut d_prev);
                        for (i, &pos) in st.active.iter().enumerate() {
                            math::axpy(T::one(), d_prev.row(i), &mut d_z[pos][ki - 1]);
                        }
                    }
                    _ => unreachable!("feed weight/grad kinds always match"),
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn router_logit_backward(
        &self,
        step: usize,
        row: usize,
        st: &StepTape<T>,
        z_row: &[T],
        d_logit: T,
        grads: &mut Weights<T>,
        d_z_row: Option<&mut Vec<T>>,
    ) {
        match (&self.weights.router, &mut grads.router) {
            (RouterWeights::SharedAffine(a), RouterWeights::SharedAffine(ga)) => {
                math::axpy(d_logit, z_row, &mut ga.w);
                ga.b = ga.b + d_logit;
                if let Some(dz) = d_z_row {
                    math::axpy(d_logit, &a.w, dz);
                }
            }
            (RouterWeights::PerStepAffine(heads), RouterWeights::PerStepAffine(gheads)) => {
                let a = &heads[step - 1];
                let ga = &mut gheads[step - 1];
                math::axpy(d_logit, z_row, &mut ga.w);
                ga.b = ga.b + d_logit;
                if let Some(dz) = d_z_row {
                    math::axpy(d_logit, &a.w, dz);
                }
            }
            (RouterWeights::SharedTwoLayer(t), RouterWeights::SharedTwoLayer(gt)) => {
                Self::two_layer_backward(t, gt, st, row, z_row, d_logit, d_z_row);
            }
            (RouterWeights::PerStepTwoLayer(heads), RouterWeights::PerStepTwoLayer(gheads)) => {
                Self::two_layer_backward(
                    &heads[step - 1],
                    &mut gheads[step - 1],
                    st,
                    row,
                    z_row,
                    d_logit,
                    d_z_row,
                );
            }
            _ => unreachable!("router weight/grad kinds always match"),
        }
    }

    fn two_layer_backward(
        t: &TwoLayerHead<T>,
        gt: &mut TwoLayerHead<T>,
        st: &StepTape<T>,
        row: usize,
        z_row: &[T],
        d_logit: T,
        d_z_row: Option<&mut Vec<T>>,
    ) {
        let pre = st
            .router_hidden_pre
            .as_ref()
            .expect("two-layer router tapes its hidden pre-activations")
            .row(row);
        let h = pre.len();
        gt.b2 = gt.b2 + d_logit;
        let mut d_pre = vec![T::zero(); h];
        for j in 0..h {
            gt.w2[j] = gt.w2[j] + d_logit * math::silu(pre[j]);
            d_pre[j] = d_logit * t.w2[j] * math::silu_grad(pre[j]);
        }
        for j in 0..h {
            math::axpy(d_pre[j], z_row, gt.w1.row_mut(j));
            gt.b1[j] = gt.b1[j] + d_pre[j];
        }
        if let Some(dz) = d_z_row {
            for j in 0..h {
                math::axpy(d_pre[j], t.w1.row(j), dz);
            }
        }
    }

    /// Adjoint of one layer of one pass. Scatters attention gradient into
    /// the per-block K/V accumulators and consumes this step's own block,
    /// which is complete once this layer's attention has been unwound.
    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        li: usize,
        active: &[usize],
        lt: &LayerTape<T>,
        mask: &StepMask,
        cache: &KvCache<T>,
        own_step: usize,
        d_out: &Mat<T>,
        d_kv_layer: &mut [(Mat<T>, Mat<T>)],
        grads: &mut LayerWeights<T>,
    ) -> Mat<T> {
        let cfg = &self.cfg;
        let (d, nh, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = real::<T>(1.0 / (hd as f64).sqrt());
        let lw = &self.weights.layers[li];
        let rows = active.len();

        // x_out = x_mid + down(act(n2)); residual carries d_out into x_mid
        let mut d_x_mid = d_out.clone();
        let mut act = Mat::zeros(rows, cfg.d_ff);
        for i in 0..rows {
            let (g, u, a) = (lt.gate_pre.row(i), lt.up.row(i), act.row_mut(i));
            for j in 0..cfg.d_ff {
                a[j] = math::silu(g[j]) * u[j];
            }
        }
        math::matmul_acc_dw(d_out, &act, &mut grads.w_down);
        let mut d_act = Mat::zeros(rows, cfg.d_ff);
        math::matmul_acc_dx(d_out, &lw.w_down, &mut d_act);
        let mut d_gate_pre = Mat::zeros(rows, cfg.d_ff);
        let mut d_up = Mat::zeros(rows, cfg.d_ff);
        for i in 0..rows {
            let (da, g, u) = (d_act.row(i), lt.gate_pre.row(i), lt.up.row(i));
            let (dg, du) = (d_gate_pre.row_mut(i), d_up.row_mut(i));
            for j in 0..cfg.d_ff {
                dg[j] = da[j] * u[j] * math::silu_grad(g[j]);
                du[j] = da[j] * math::silu(g[j]);
            }
        }
        math::matmul_acc_dw(&d_gate_pre, &lt.n2, &mut grads.w_gate);
        math::matmul_acc_dw(&d_up, &lt.n2, &mut grads.w_up);
        let mut d_n2 = Mat::zeros(rows, d);
        math::matmul_acc_dx(&d_gate_pre, &lw.w_gate, &mut d_n2);
        math::matmul_acc_dx(&d_up, &lw.w_up, &mut d_n2);
        for i in 0..rows {
            math::rmsnorm_bwd(
                lt.x_mid.row(i),
                &lw.mlp_norm,
                lt.inv2[i],
                d_n2.row(i),
                d_x_mid.row_mut(i),
                &mut grads.mlp_norm,
            );
        }

        // x_mid = x_in + wo(att_cat)
        math::matmul_acc_dw(&d_x_mid, &lt.att_cat, &mut grads.wo);
        let mut d_att_cat = Mat::zeros(rows, d);
        math::matmul_acc_dx(&d_x_mid, &lw.wo, &mut d_att_cat);

        // attention: out_h = Σ_r p_r V_r, p = softmax(q·K/√hd) over the
        // visible prefixes of every block ≤ own_step
        let mut d_q = Mat::zeros(rows, d);
        for i in 0..rows {
            let qi = lt.q.row(i);
            let n_vis: usize = mask.visible_prefix[i].iter().sum();
            let d_out_i = d_att_cat.row(i);
            for h in 0..nh {
                let hr = h * hd..(h + 1) * hd;
                let probs = &lt.probs[i][h * n_vis..(h + 1) * n_vis];
                let d_out_h = &d_out_i[hr.clone()];
                let mut d_p = vec![T::zero(); n_vis];
                let mut w = 0;
                for (bi, block) in mask.key_blocks.iter().enumerate() {
                    let vis = mask.visible_prefix[i][bi];
                    let (_, bv) = &cache.block(block.step).layers[li];
                    for r in 0..vis {
                        d_p[w] = math::dot(d_out_h, &bv.row(r)[hr.clone()]);
                        w += 1;
                    }
                }
                let mut s = T::zero();
                for w in 0..n_vis {
                    s = s + probs[w] * d_p[w];
                }
                let mut w = 0;
                for (bi, block) in mask.key_blocks.iter().enumerate() {
                    let vis = mask.visible_prefix[i][bi];
                    let (bk, _) = &cache.block(block.step).layers[li];
                    let (dbk, dbv) = &mut d_kv_layer[block.step - 1];
                    for r in 0..vis {
                        let d_score = probs[w] * (d_p[w] - s);
                        math::axpy(d_score * scale, &bk.row(r)[hr.clone()], &mut d_q.row_mut(i)[hr.clone()]);
                        math::axpy(d_score * scale, &qi[hr.clone()], &mut dbk.row_mut(r)[hr.clone()]);
                        math::axpy(probs[w], d_out_h, &mut dbv.row_mut(r)[hr.clone()]);
                        w += 1;
                    }
                }
            }
        }

        // own block is now fully accumulated: later steps were unwound
        // earlier, and only this layer's attention reads this layer's rows
        let (mut dk_own, dv_own) =
            std::mem::replace(&mut d_kv_layer[own_step - 1], (Mat::zeros(0, 0), Mat::zeros(0, 0)));
        for (i, &pos) in active.iter().enumerate() {
            math::rope_apply(d_q.row_mut(i), pos, nh, hd, cfg.rope_base, true);
            math::rope_apply(dk_own.row_mut(i), pos, nh, hd, cfg.rope_base, true);
        }
        math::matmul_acc_dw(&d_q, &lt.n1, &mut grads.wq);
        math::matmul_acc_dw(&dk_own, &lt.n1, &mut grads.wk);
        math::matmul_acc_dw(&dv_own, &lt.n1, &mut grads.wv);
        let mut d_n1 = Mat::zeros(rows, d);
        math::matmul_acc_dx(&d_q, &lw.wq, &mut d_n1);
        math::matmul_acc_dx(&dk_own, &lw.wk, &mut d_n1);
        math::matmul_acc_dx(&dv_own, &lw.wv, &mut d_n1);

        let mut d_x_in = d_x_mid;
        for i in 0..rows {
            math::rmsnorm_bwd(
                lt.x_in.row(i),
                &lw.attn_norm,
                lt.inv1[i],
                d_n1.row(i),
                d_x_in.row_mut(i),
                &mut grads.attn_norm,
            );
        }
        d_x_in
    }
}
