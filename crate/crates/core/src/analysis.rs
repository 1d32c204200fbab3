//! Post-hoc analysis: does the model spend latent passes where they help?
//!
//! The tools here work from forward unrolls only. Difficulty is measured as
//! the model's own cross-entropy on the target, depth as the latent length
//! the halting rule chose, and per-pass progress as the change in target
//! probability when the budget is forced to run out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::data::{windows, BOS, EOS};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::{LatentModel, UnrollOptions};
use crate::real::Real;

/// Threshold override that cannot prune: gates clamp at 1e-6, so reach
/// before the final pass is at least 1e-6^(K_max−1) for any sane budget.
pub const FULL_BUDGET_TAU: f64 = 1e-30;

/// One prediction site: the input token, what it had to predict, how deep
/// the halting rule went, and how well the mixed state did.
#[derive(Debug, Clone, Serialize)]
pub struct TokenReport {
    pub token: u32,
    pub target: u32,
    pub latent_len: usize,
    /// −ln p(target), from the mixed prediction state.
    pub ce: f64,
    pub p_target: f64,
}

/// Forward the model over every full window and record one report per
/// prediction site.
pub fn collect_reports<T: Real>(
    model: &LatentModel<T>,
    ids: &[u32],
    window_len: usize,
) -> Result<Vec<TokenReport>> {
    collect_reports_after(model, ids, window_len, 0)
}

/// Like [`collect_reports`], but drops each window's first `warmup`
/// prediction sites. With short analysis windows the earliest positions see
/// almost no context; their difficulty says more about the window boundary
/// than about the token.
pub fn collect_reports_after<T: Real>(
    model: &LatentModel<T>,
    ids: &[u32],
    window_len: usize,
    warmup: usize,
) -> Result<Vec<TokenReport>> {
    let mut out = Vec::new();
    for w in windows(ids, window_len) {
        let inputs = &w[..w.len() - 1];
        let targets = &w[1..];
        let seq = model.unroll_seq(inputs, &UnrollOptions::default())?;
        let logits = model.lm_logits(&seq.z_final);
        for pos in warmup..inputs.len() {
            let row: Vec<T> = logits.row(pos).to_vec();
            let lse = log_sum_exp(&row);
            let logp = (row[targets[pos] as usize] - lse).into_f64();
            out.push(TokenReport {
                token: inputs[pos],
                target: targets[pos],
                latent_len: seq.schedules[pos].k_star - 1,
                ce: -logp,
                p_target: logp.exp(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no prediction sites to analyze"));
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "correlation needs at least two points");
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // 1-based ranks, averaged over the tie run
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct DifficultyBucket {
    pub ce_lo: f64,
    pub ce_hi: f64,
    pub count: usize,
    pub mean_ce: f64,
    pub mean_len: f64,
}

/// Bucket prediction sites by difficulty on a log scale (cross-entropy
/// clamped below at 1e-4) and average the chosen depth per bucket.
pub fn difficulty_buckets(reports: &[TokenReport], n_buckets: usize) -> Vec<DifficultyBucket> {
    assert!(n_buckets >= 2);
    const CE_FLOOR: f64 = 1e-4;
    let logs: Vec<f64> = reports.iter().map(|r| r.ce.max(CE_FLOOR).ln()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_buckets as f64).max(1e-12);
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); n_buckets];
    for (r, &l) in reports.iter().zip(&logs) {
        let b = (((l - lo) / width) as usize).min(n_buckets - 1);
        sums[b].0 += 1;
        sums[b].1 += r.ce;
        sums[b].2 += r.latent_len as f64;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (c, _, _))| *c > 0)
        .map(|(b, &(c, ce, len))| DifficultyBucket {
            ce_lo: (lo + b as f64 * width).exp(),
            ce_hi: (lo + (b + 1) as f64 * width).exp(),
            count: c,
            mean_ce: ce / c as f64,
            mean_len: len / c as f64,
        })
        .collect()
}

/// Spearman correlation between bucket difficulty and bucket mean depth.
pub fn difficulty_depth_correlation(buckets: &[DifficultyBucket]) -> f64 {
    let xs: Vec<f64> = buckets.iter().map(|b| b.mean_ce).collect();
    let ys: Vec<f64> = buckets.iter().map(|b| b.mean_len).collect();
    spearman(&xs, &ys)
}

#[derive(Debug, Clone, Serialize)]
pub struct LenGroup {
    pub latent_len: usize,
    pub count: usize,
    pub mean_p_target: f64,
}

/// Group prediction sites by chosen depth; deeper groups should be the
/// model's harder cases, with lower final target probability.
pub fn length_vs_p_target(reports: &[TokenReport]) -> Vec<LenGroup> {
    let max_len = reports.iter().map(|r| r.latent_len).max().unwrap_or(0);
    let mut sums = vec![(0usize, 0.0f64); max_len + 1];
    for r in reports {
        sums[r.latent_len].0 += 1;
        sums[r.latent_len].1 += r.p_target;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (c, _))| *c > 0)
        .map(|(l, &(c, p))| LenGroup { latent_len: l, count: c, mean_p_target: p / c as f64 })
        .collect()
}

pub fn length_p_correlation(groups: &[LenGroup]) -> f64 {
    let xs: Vec<f64> = groups.iter().map(|g| g.latent_len as f64).collect();
    let ys: Vec<f64> = groups.iter().map(|g| g.mean_p_target).collect();
    spearman(&xs, &ys)
}

#[derive(Debug, Clone, Serialize)]
pub struct GainBucket {
    pub p_lo: f64,
    pub p_hi: f64,
    pub count: usize,
    pub mean_gain: f64,
}

/// (confidence before a pass, confidence change across it), collected with
/// the budget forced to run to K_max so every pass is observed.
pub fn probe_pairs<T: Real>(
    model: &LatentModel<T>,
    ids: &[u32],
    window_len: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for w in windows(ids, window_len) {
        let inputs = &w[..w.len() - 1];
        let targets = &w[1..];
        let opts = UnrollOptions {
            tau_override: Some(FULL_BUDGET_TAU),
            targets: Some(targets),
            ..Default::default()
        };
        let seq = model.unroll_seq(inputs, &opts)?;
        for pos in 0..inputs.len() {
            let traj = &seq.states.p_target[pos];
            debug_assert_eq!(traj.len(), model.cfg.k_max(), "full budget observes every pass");
            for k in 0..traj.len() - 1 {
                pairs.push((traj[k].into_f64(), (traj[k + 1] - traj[k]).into_f64()));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no probe pairs collected"));
    }
    Ok(pairs)
}

pub fn gain_buckets(pairs: &[(f64, f64)], n_buckets: usize) -> Vec<GainBucket> {
    assert!(n_buckets >= 2);
    let width = 1.0 / n_buckets as f64;
    let mut sums = vec![(0usize, 0.0f64); n_buckets];
    for &(p, g) in pairs {
        let b = ((p / width) as usize).min(n_buckets - 1);
        sums[b].0 += 1;
        sums[b].1 += g;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (c, _))| *c > 0)
        .map(|(b, &(c, g))| GainBucket {
            p_lo: b as f64 * width,
            p_hi: (b + 1) as f64 * width,
            count: c,
            mean_gain: g / c as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub buckets: Vec<GainBucket>,
    /// Mean gain in the least-confident populated bucket minus the overall
    /// mean gain.
    pub stat: f64,
    /// One-sided permutation p-value for stat > 0.
    pub p_value: f64,
    pub n_pairs: usize,
}

fn low_bucket_excess(pairs: &[(f64, f64)], n_buckets: usize) -> f64 {
    let width = 1.0 / n_buckets as f64;
    let mut sums = vec![(0usize, 0.0f64); n_buckets];
    let mut total = 0.0;
    for &(p, g) in pairs {
        let b = ((p / width) as usize).min(n_buckets - 1);
        sums[b].0 += 1;
        sums[b].1 += g;
        total += g;
    }
    let overall = total / pairs.len() as f64;
    match sums.iter().find(|(c, _)| *c > 0) {
        Some(&(c, g)) => g / c as f64 - overall,
        None => 0.0,
    }
}

/// Does the least-confident bucket gain more per pass than average? The
/// null shuffles gains across confidence levels; with a single populated
/// bucket the statistic is 0 and the p-value honestly comes out 1.
pub fn probe_significance(
    pairs: &[(f64, f64)],
    n_buckets: usize,
    n_perms: usize,
    seed: u64,
) -> ProbeSummary {
    assert!(!pairs.is_empty());
    let observed = low_bucket_excess(pairs, n_buckets);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut gains: Vec<f64> = pairs.iter().map(|&(_, g)| g).collect();
    let mut at_least = 0usize;
    for _ in 0..n_perms {
        gains.shuffle(&mut rng);
        let permuted: Vec<(f64, f64)> =
            pairs.iter().zip(&gains).map(|(&(p, _), &g)| (p, g)).collect();
        if low_bucket_excess(&permuted, n_buckets) >= observed {
            at_least += 1;
        }
    }
    ProbeSummary {
        buckets: gain_buckets(pairs, n_buckets),
        stat: observed,
        p_value: (at_least + 1) as f64 / (n_perms + 1) as f64,
        n_pairs: pairs.len(),
    }
}

/// Depth-annotated text for eyeballing where the model lingers.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    /// Display string and latent length per position.
    pub tokens: Vec<(String, usize)>,
    pub l_max: usize,
}

fn display_token(id: u32) -> String {
    match id {
        BOS => "⟨bos⟩".into(),
        EOS => "⟨eos⟩".into(),
        10 => "⏎".into(),
        32..=126 => char::from(id as u8).to_string(),
        _ => "·".into(),
    }
}

pub fn case_study<T: Real>(model: &LatentModel<T>, ids: &[u32]) -> Result<CaseStudy> {
    let seq = model.unroll_seq(ids, &UnrollOptions::default())?;
    let tokens = ids
        .iter()
        .zip(seq.schedules.iter())
        .map(|(&id, s)| (display_token(id), s.k_star - 1))
        .collect();
    Ok(CaseStudy { tokens, l_max: model.cfg.max_latent_len })
}

/// Position on the fixed 0..l_max color scale.
fn depth_frac(len: usize, l_max: usize) -> f64 {
    if l_max == 0 {
        0.0
    } else {
        len as f64 / l_max as f64
    }
}

fn ansi_color(frac: f64) -> u8 {
    // blue-to-red ramp through the 6x6x6 cube
    let r = (frac * 5.0).round() as u16;
    let b = ((1.0 - frac) * 5.0).round() as u16;
    (16 + 36 * r + b) as u8
}

fn rgb_color(frac: f64) -> (u8, u8, u8) {
    let lerp = |a: f64, b: f64| (a + (b - a) * frac).round() as u8;
    (lerp(59.0, 180.0), lerp(76.0, 4.0), lerp(192.0, 38.0))
}

impl CaseStudy {
    /// Terminal rendering: background color encodes the latent length.
    pub fn ansi(&self) -> String {
        let mut out = String::new();
        for (text, len) in &self.tokens {
            let c = ansi_color(depth_frac(*len, self.l_max));
            out.push_str(&format!("\x1b[48;5;{c}m\x1b[38;5;15m{text}\x1b[0m"));
        }
        out.push('\n');
        out.push_str("depth:");
        for l in 0..=self.l_max {
            let c = ansi_color(depth_frac(l, self.l_max));
            out.push_str(&format!(" \x1b[48;5;{c}m\x1b[38;5;15m {l} \x1b[0m"));
        }
        out.push('\n');
        out
    }

    /// Self-contained HTML page with the same fixed color scale.
    pub fn html(&self) -> String {
        let escape = |s: &str| {
            s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
        };
        let mut spans = String::new();
        for (text, len) in &self.tokens {
            let (r, g, b) = rgb_color(depth_frac(*len, self.l_max));
            spans.push_str(&format!(
                "<span title=\"{len}\" style=\"background:rgb({r},{g},{b})\">{}</span>",
                escape(text)
            ));
        }
        let mut legend = String::new();
        for l in 0..=self.l_max {
            let (r, g, b) = rgb_color(depth_frac(l, self.l_max));
            legend.push_str(&format!(
                "<span class=\"sw\" style=\"background:rgb({r},{g},{b})\">{l}</span>"
            ));
        }
        format!(
            "<!doctype html>\n<html><head><meta charset=\"utf-8\">\n\
             <title>latent depth per token</title>\n<style>\n\
             body {{ font-family: monospace; margin: 2em; background: #111; color: #eee; }}\n\
             .text {{ white-space: pre-wrap; word-break: break-all; line-height: 1.7; }}\n\
             .text span {{ color: #fff; padding: 1px 0; }}\n\
             .legend {{ margin-top: 1.5em; }}\n\
             .sw {{ color: #fff; padding: 2px 8px; margin-right: 4px; }}\n\
             </style></head><body>\n\
             <div class=\"text\">{spans}</div>\n\
             <div class=\"legend\">latent passes beyond the first: {legend}</div>\n\
             </body></html>\n"
        )
    }
}
