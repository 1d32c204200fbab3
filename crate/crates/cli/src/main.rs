//! Command-line driver: corpus preparation, training, evaluation, decoding,
//! and the analysis reports, all over the byte-level tokenizer.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use alct_core::analysis::{
    case_study, collect_reports_after, difficulty_buckets, difficulty_depth_correlation,
    length_p_correlation, length_vs_p_target, probe_pairs, probe_significance,
};
use alct_core::data::{decode_to_string, encode_bytes, read_corpus, write_corpus, BYTE_VOCAB};
use alct_core::trainer::append_jsonl;
use alct_core::{
    evaluate, generate, load_checkpoint, AdaptiveLossConfig, Corpus, GenerateConfig,
    LatentModel, Precision, RawCheckpoint, Real, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "alct", version, about = "Adaptive latent chain-of-thought at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pack a plain-text file into the binary corpus format.
    Tokenize {
        /// Input text file.
        #[arg(long)]
        text: PathBuf,
        /// Output corpus path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; checkpoints and a metrics log land in --out-dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training corpus: binary corpus file or plain text.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from an earlier checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint every N steps (0 saves only the final state).
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Window length in tokens; defaults to the model's context limit.
        #[arg(long)]
        window: Option<usize>,
        /// Report the adaptive term at this strength.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
    },
    /// Decode a continuation of a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Softmax temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one JSON record per decoded token.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Confidence-gain probe: does an extra pass help where confidence is low?
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Color a text by per-token latent depth (terminal + HTML).
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text_file: PathBuf,
        /// Output HTML path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Difficulty-vs-depth and depth-vs-confidence tables.
    Curves {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for the tables.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 8)]
        buckets: usize,
        /// Skip each window's first N prediction sites (context burn-in).
        #[arg(long, default_value_t = 0)]
        warmup: usize,
    },
}

/// Binary corpus if the magic matches, otherwise text through the tokenizer.
fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let head = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if head.starts_with(b"ALCT") {
        return Ok(read_corpus(path)?);
    }
    Ok(Corpus { vocab_size: BYTE_VOCAB, ids: encode_bytes(&head) })
}

fn open_checkpoint(path: &Path) -> anyhow::Result<RawCheckpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Run `$body` with `$T` bound to the precision the value carries.
macro_rules! with_precision {
    ($prec:expr, $T:ident, $body:block) => {
        match $prec {
            Precision::F32 => {
                type $T = f32;
                $body
            }
            Precision::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}

fn model_from<T: Real>(ckpt: &RawCheckpoint) -> anyhow::Result<LatentModel<T>> {
    Ok(LatentModel::from_parts(ckpt.cfg.clone(), ckpt.load_weights::<T>()?)?)
}

fn default_window(ckpt: &RawCheckpoint, window: Option<usize>) -> usize {
    window.unwrap_or(ckpt.cfg.max_seq_len + 1)
}

fn cmd_train(
    config: &Path,
    corpus: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    save_every: u64,
) -> anyhow::Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = load_corpus(corpus)?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    with_precision!(cfg.model.precision, T, {
        let mut tr: Trainer<T> = match resume {
            Some(p) => Trainer::resume(cfg, &open_checkpoint(p)?)?,
            None => Trainer::new(cfg)?,
        };
        let steps = tr.cfg.steps;
        if tr.step >= steps {
            bail!("checkpoint is already at step {}, nothing to do", tr.step);
        }
        while tr.step < steps {
            let stop =
                if save_every == 0 { steps } else { (tr.step + save_every).min(steps) };
            tr.run_until(&data, stop, |m| {
                println!(
                    "step {:>6}  ce {:.4}  adaptive {:.5}  prune {:.3}  mean_len {:.2}  flops {:.3e}",
                    m.step, m.ce, m.adaptive, m.prune_ratio, m.mean_len, m.flops_cum
                );
                append_jsonl(&metrics_path, m)
            })?;
            if tr.step < steps {
                tr.save(&out_dir.join(format!("step{:07}.ckpt", tr.step)))?;
            }
        }
        tr.save(&out_dir.join("final.ckpt"))?;
        println!(
            "done: {} steps, {} tokens, {:.3e} active FLOPs -> {}",
            tr.step,
            tr.tokens_seen,
            tr.flops_cum,
            out_dir.join("final.ckpt").display()
        );
        Ok(())
    })
}

fn cmd_eval(
    ckpt: &Path,
    corpus: &Path,
    window: Option<usize>,
    lambda: f64,
    beta: f64,
) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(ckpt)?;
    let data = load_corpus(corpus)?;
    let window = default_window(&ckpt, window);
    let acfg = AdaptiveLossConfig { lambda, beta };
    with_precision!(ckpt.cfg.precision, T, {
        let model = model_from::<T>(&ckpt)?;
        let s = evaluate(&model, &acfg, &data, window, None)?;
        println!("tokens      {}", s.n_tokens);
        println!("ce          {:.6}", s.ce);
        println!("ppl         {:.4}", s.ppl);
        println!("adaptive    {:.6}", s.adaptive);
        println!("prune_ratio {:.4}", s.prune_ratio);
        println!("mean_len    {:.3}", s.mean_len);
        Ok(())
    })
}

fn cmd_generate(
    ckpt: &Path,
    prompt: &str,
    max_new: usize,
    temp: f64,
    seed: u64,
    trace: Option<&Path>,
) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(ckpt)?;
    // keep the prompt open-ended: BOS plus bytes, no closing EOS
    let mut ids = encode_bytes(prompt.as_bytes());
    ids.pop();
    with_precision!(ckpt.cfg.precision, T, {
        let model = model_from::<T>(&ckpt)?;
        let gcfg = GenerateConfig { max_new, temperature: temp, seed, stop_at: None };
        let out = generate(&model, &ids, &gcfg)?;
        println!("{}", decode_to_string(&out.tokens));
        let lens: Vec<usize> = out.traces.iter().map(|t| t.latent_len).collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        eprintln!("mean latent length {mean:.2} over {} positions", lens.len());
        if let Some(path) = trace {
            let mut f = fs::File::create(path)?;
            for t in &out.traces {
                serde_json::to_writer(&mut f, t)?;
                writeln!(f)?;
            }
            eprintln!("trace -> {}", path.display());
        }
        Ok(())
    })
}

fn cmd_probe(
    ckpt: &Path,
    corpus: &Path,
    out: &Path,
    window: Option<usize>,
) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(ckpt)?;
    let data = load_corpus(corpus)?;
    let window = default_window(&ckpt, window);
    with_precision!(ckpt.cfg.precision, T, {
        let model = model_from::<T>(&ckpt)?;
        let pairs = probe_pairs(&model, &data.ids, window)?;
        let summary = probe_significance(&pairs, 10, 2000, 0);
        let mut table = String::new();
        table.push_str("p_lo\tp_hi\tcount\tmean_gain\n");
        for b in &summary.buckets {
            table.push_str(&format!(
                "{:.2}\t{:.2}\t{}\t{:+.6}\n",
                b.p_lo, b.p_hi, b.count, b.mean_gain
            ));
        }
        table.push_str(&format!(
            "# low-confidence excess gain {:+.6}, permutation p {:.4}, {} pairs\n",
            summary.stat, summary.p_value, summary.n_pairs
        ));
        fs::write(out, &table)?;
        print!("{table}");
        Ok(())
    })
}

fn cmd_report(ckpt: &Path, text_file: &Path, out: &Path) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(ckpt)?;
    let text = fs::read(text_file)?;
    let ids = encode_bytes(&text);
    with_precision!(ckpt.cfg.precision, T, {
        let model = model_from::<T>(&ckpt)?;
        // long texts run block by block; depth context resets at block seams
        let mut study = alct_core::analysis::CaseStudy {
            tokens: Vec::new(),
            l_max: ckpt.cfg.max_latent_len,
        };
        for chunk in ids.chunks(ckpt.cfg.max_seq_len) {
            study.tokens.extend(case_study(&model, chunk)?.tokens);
        }
        println!("{}", study.ansi());
        fs::write(out, study.html())?;
        println!("html -> {}", out.display());
        Ok(())
    })
}

fn cmd_curves(
    ckpt: &Path,
    corpus: &Path,
    out: &Path,
    window: Option<usize>,
    n_buckets: usize,
    warmup: usize,
) -> anyhow::Result<()> {
    let ckpt = open_checkpoint(ckpt)?;
    let data = load_corpus(corpus)?;
    let window = default_window(&ckpt, window);
    fs::create_dir_all(out)?;
    with_precision!(ckpt.cfg.precision, T, {
        let model = model_from::<T>(&ckpt)?;
        let reports = collect_reports_after(&model, &data.ids, window, warmup)?;

        let buckets = difficulty_buckets(&reports, n_buckets);
        let mut t1 = String::from("ce_lo\tce_hi\tcount\tmean_ce\tmean_len\n");
        for b in &buckets {
            t1.push_str(&format!(
                "{:.4}\t{:.4}\t{}\t{:.4}\t{:.3}\n",
                b.ce_lo, b.ce_hi, b.count, b.mean_ce, b.mean_len
            ));
        }
        t1.push_str(&match buckets.len() {
            0..=1 => "# spearman(difficulty, mean_len) undefined: single bucket\n".into(),
            _ => format!(
                "# spearman(difficulty, mean_len) = {:+.3}\n",
                difficulty_depth_correlation(&buckets)
            ),
        });
        fs::write(out.join("difficulty_vs_len.tsv"), &t1)?;

        let groups = length_vs_p_target(&reports);
        let mut t2 = String::from("latent_len\tcount\tmean_p_target\n");
        for g in &groups {
            t2.push_str(&format!(
                "{}\t{}\t{:.4}\n",
                g.latent_len, g.count, g.mean_p_target
            ));
        }
        t2.push_str(&match groups.len() {
            0..=1 => "# spearman(latent_len, mean_p_target) undefined: single depth\n".into(),
            _ => format!(
                "# spearman(latent_len, mean_p_target) = {:+.3}\n",
                length_p_correlation(&groups)
            ),
        });
        fs::write(out.join("len_vs_confidence.tsv"), &t2)?;

        print!("{t1}\n{t2}");
        println!("tables -> {}", out.display());
        Ok(())
    })
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Tokenize { text, out } => {
            let bytes = fs::read(&text).with_context(|| format!("reading {}", text.display()))?;
            let ids = encode_bytes(&bytes);
            write_corpus(&out, BYTE_VOCAB, &ids)?;
            println!("{} bytes -> {} tokens -> {}", bytes.len(), ids.len(), out.display());
            Ok(())
        }
        Cmd::Train { config, corpus, out_dir, resume, save_every } => {
            cmd_train(&config, &corpus, &out_dir, resume.as_deref(), save_every)
        }
        Cmd::Eval { ckpt, corpus, window, lambda, beta } => {
            cmd_eval(&ckpt, &corpus, window, lambda, beta)
        }
        Cmd::Generate { ckpt, prompt, max_new, temp, seed, trace } => {
            cmd_generate(&ckpt, &prompt, max_new, temp, seed, trace.as_deref())
        }
        Cmd::Probe { ckpt, corpus, out, window } => cmd_probe(&ckpt, &corpus, &out, window),
        Cmd::Report { ckpt, text_file, out } => cmd_report(&ckpt, &text_file, &out),
        Cmd::Curves { ckpt, corpus, out, window, buckets, warmup } => {
            cmd_curves(&ckpt, &corpus, &out, window, buckets, warmup)
        }
    }
}
