//! Batch command-line front end for the decoupled multimodal contrastive
//! learning toolkit.
//!
//! Configuration resolves in three layers: built-in defaults, then the
//! `--config` TOML file, then command-line flags. Every run echoes the
//! fully resolved configuration before doing any work.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dmcl_core::data::{gen_synthetic, load_corpus, load_eval, save_corpus, SynthConfig};
use dmcl_core::encoders::EncoderConfig;
use dmcl_core::evaluator::{evaluate, nearest_neighbors, stats_to_csv, EvalMode, Thresholds};
use dmcl_core::objective::{AnchorDirection, LossWeights};
use dmcl_core::trainer::{format_log_line, load_checkpoint, train, OptimizerKind, TrainConfig};
use dmcl_core::verify::{gradient_suite, summarize, DEFAULT_SUITE_SEEDS};
use dmcl_core::TokenSequence;

const ABLATION_HELP: &str = "Ablations:
  --no-local   drops the local (word-patch attention) contrastive term;
  --no-anchor  drops the teacher-anchored regularizer.
Either flag zeroes the removed coefficient and rescales the remaining
loss coefficients proportionally so they sum to 1; with both flags the
objective reduces to the global contrastive term alone.";

#[derive(Parser)]
#[command(
    name = "dmcl",
    version,
    about = "Decoupled multimodal contrastive learning: train dual encoders with global/local InfoNCE plus a teacher anchor, evaluate with the text encoder alone",
    after_help = ABLATION_HELP
)]
struct Cli {
    /// TOML config file; sections: [weights], [encoder], [train], [synth], [eval]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Learning rate
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Gradient accumulation steps per optimizer update
    #[arg(long = "grad-acc", global = true)]
    grad_acc: Option<usize>,

    /// Weight of the global contrastive term
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Weight of the local contrastive term
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Distillation/cosine mix inside the anchor term
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    tau_sigma: Option<f64>,
    #[arg(long, global = true)]
    tau_c: Option<f64>,
    #[arg(long, global = true)]
    tau_prime: Option<f64>,

    /// Entailment threshold
    #[arg(long, global = true)]
    psi1: Option<f64>,
    /// Contradiction threshold
    #[arg(long, global = true)]
    psi2: Option<f64>,

    /// Drop the local contrastive term (see Ablations)
    #[arg(long, global = true)]
    no_local: bool,
    /// Drop the anchor term (see Ablations)
    #[arg(long, global = true)]
    no_anchor: bool,

    /// Output path (corpus for synth, checkpoint for train, report for eval)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired corpus file (JSON lines)
    Synth {
        #[arg(long)]
        contexts: Option<usize>,
        #[arg(long)]
        pairs_per_context: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Tokens per sentence
        #[arg(long)]
        sentence_len: Option<usize>,
        #[arg(long)]
        grid_side: Option<usize>,
        #[arg(long)]
        patch_width: Option<usize>,
        /// Patch noise scale
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train on a corpus file; writes a checkpoint and a per-batch log
    Train {
        /// Corpus file (JSON lines)
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Training log path (default: checkpoint path + ".log")
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on sentence pairs; prints a JSON report
    Eval {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Eval pairs file (JSON lines)
        #[arg(long, value_name = "PATH")]
        pairs: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Write per-label five-number stats as CSV
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Rank corpus sentences by L1 distance to a query sentence
    Nn {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Query token ids, comma separated (e.g. "3,17,5")
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Run the finite-difference gradient verification suite
    Gradcheck {
        /// Random instances per check
        #[arg(long, default_value_t = DEFAULT_SUITE_SEEDS)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sts,
    Nli,
}

// ── config file ─────────────────────────────────────────────────────

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    weights: Option<LossWeights>,
    encoder: Option<EncoderConfig>,
    train: Option<TrainSection>,
    synth: Option<SynthConfig>,
    eval: Option<EvalSection>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    grad_accumulation_steps: Option<usize>,
    optimizer: Option<OptimizerKind>,
    anchor_direction: Option<AnchorDirection>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    psi1: Option<f64>,
    psi2: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, String> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", p.display()))
        }
    }
}

struct Resolved {
    train: TrainConfig,
    synth: SynthConfig,
    psi1: Option<f64>,
    psi2: Option<f64>,
}

fn resolve(cli: &Cli, file: &FileConfig) -> Result<Resolved, String> {
    let mut weights = file.weights.unwrap_or_default();
    if let Some(v) = cli.gamma {
        weights.gamma = v;
    }
    if let Some(v) = cli.beta {
        weights.beta = v;
    }
    if let Some(v) = cli.epsilon {
        weights.epsilon = v;
    }
    if let Some(v) = cli.tau_sigma {
        weights.tau_sigma = v;
    }
    if let Some(v) = cli.tau_c {
        weights.tau_c = v;
    }
    if let Some(v) = cli.tau_prime {
        weights.tau_prime = v;
    }

    // ablations: zero the removed coefficient, rescale the rest to sum 1
    if cli.no_local || cli.no_anchor {
        let anchor = if cli.no_anchor {
            0.0
        } else {
            weights.anchor_weight().max(0.0)
        };
        let local = if cli.no_local { 0.0 } else { weights.beta };
        let global = weights.gamma;
        let total = global + local + anchor;
        if total <= 0.0 {
            return Err("ablation removed every loss term with positive weight".into());
        }
        weights.gamma = global / total;
        weights.beta = local / total;
    }

    let encoder = file.encoder.clone().unwrap_or_default();
    let ts = file.train.as_ref();
    let defaults = TrainConfig::default();
    let seed = cli.seed.or(file.seed).unwrap_or(defaults.seed);
    let train = TrainConfig {
        weights,
        encoder,
        batch_size: cli
            .batch_size
            .or(ts.and_then(|t| t.batch_size))
            .unwrap_or(defaults.batch_size),
        learning_rate: cli
            .lr
            .or(ts.and_then(|t| t.learning_rate))
            .unwrap_or(defaults.learning_rate),
        epochs: cli
            .epochs
            .or(ts.and_then(|t| t.epochs))
            .unwrap_or(defaults.epochs),
        grad_accumulation_steps: cli
            .grad_acc
            .or(ts.and_then(|t| t.grad_accumulation_steps))
            .unwrap_or(defaults.grad_accumulation_steps),
        optimizer: ts.and_then(|t| t.optimizer).unwrap_or(defaults.optimizer),
        seed,
        anchor_direction: ts
            .and_then(|t| t.anchor_direction)
            .unwrap_or(defaults.anchor_direction),
        checkpoint_path: None,
    };

    let mut synth = file.synth.clone().unwrap_or_default();
    if cli.seed.or(file.seed).is_some() {
        synth.seed = seed;
    }

    let es = file.eval.as_ref();
    let psi1 = cli.psi1.or(es.and_then(|e| e.psi1));
    let psi2 = cli.psi2.or(es.and_then(|e| e.psi2));

    Ok(Resolved {
        train,
        synth,
        psi1,
        psi2,
    })
}

fn echo_section<T: serde::Serialize>(header: &str, value: &T) {
    match toml::to_string(value) {
        Ok(body) => {
            println!("[{header}]");
            for line in body.lines() {
                println!("{line}");
            }
        }
        Err(e) => println!("[{header}] <unprintable: {e}>"),
    }
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    let file = load_file_config(cli.config.as_deref())?;
    let resolved = resolve(&cli, &file)?;

    match &cli.cmd {
        Cmd::Synth {
            contexts,
            pairs_per_context,
            vocab_size,
            sentence_len,
            grid_side,
            patch_width,
            noise,
        } => {
            let mut cfg = resolved.synth;
            if let Some(v) = contexts {
                cfg.num_contexts = *v;
            }
            if let Some(v) = pairs_per_context {
                cfg.pairs_per_context = *v;
            }
            if let Some(v) = vocab_size {
                cfg.vocab_size = *v;
            }
            if let Some(v) = sentence_len {
                cfg.tokens_per_sentence = *v;
            }
            if let Some(v) = grid_side {
                cfg.grid_side = *v;
            }
            if let Some(v) = patch_width {
                cfg.patch_width = *v;
            }
            if let Some(v) = noise {
                cfg.noise_scale = *v;
            }
            println!("# resolved configuration");
            echo_section("synth", &cfg);
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
            let corpus = gen_synthetic(&cfg).map_err(|e| e.to_string())?;
            save_corpus(&corpus, &out).map_err(|e| e.to_string())?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
            Ok(())
        }

        Cmd::Train { corpus, log } => {
            let mut cfg = resolved.train;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("model.ckpt"));
            cfg.checkpoint_path = Some(out.clone());
            println!("# resolved configuration");
            echo_section("weights", &cfg.weights);
            echo_section("encoder", &cfg.encoder);
            echo_section("train", &TrainEcho::from(&cfg));

            let data = load_corpus(corpus).map_err(|e| e.to_string())?;
            let (ckpt, history) = train(&data, &cfg).map_err(|e| e.to_string())?;

            let log_path = log.clone().unwrap_or_else(|| {
                let mut p = out.clone();
                p.set_extension("ckpt.log");
                p
            });
            let mut lines = String::new();
            for (i, b) in history.iter().enumerate() {
                lines.push_str(&format_log_line(i as u64, b));
                lines.push('\n');
            }
            std::fs::write(&log_path, lines).map_err(|e| e.to_string())?;

            let last = history
                .last()
                .expect("training produced at least one batch");
            println!(
                "trained {} steps; final batch: {}",
                ckpt.step,
                format_log_line(ckpt.step - 1, last)
            );
            println!("checkpoint: {}", out.display());
            println!("log: {}", log_path.display());
            Ok(())
        }

        Cmd::Eval {
            ckpt,
            pairs,
            mode,
            csv,
        } => {
            let thresholds = match (resolved.psi1, resolved.psi2) {
                (None, None) => None,
                (p1, p2) => Some(
                    Thresholds::new(
                        p1.unwrap_or(Thresholds::default().psi1),
                        p2.unwrap_or(Thresholds::default().psi2),
                    )
                    .map_err(|e| e.to_string())?,
                ),
            };
            println!("# resolved configuration");
            println!(
                "mode = {}",
                match mode {
                    ModeArg::Sts => "sts",
                    ModeArg::Nli => "nli",
                }
            );
            match &thresholds {
                Some(t) => println!("thresholds = {{ psi1 = {}, psi2 = {} }}", t.psi1, t.psi2),
                None => println!("thresholds = \"grid-searched on the dev half\""),
            }

            let checkpoint = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
            let eval_pairs = load_eval(pairs).map_err(|e| e.to_string())?;
            let mode = match mode {
                ModeArg::Sts => EvalMode::Sts,
                ModeArg::Nli => EvalMode::Nli,
            };
            let report = evaluate(&eval_pairs, &checkpoint.params, mode, thresholds)
                .map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
            match &cli.out {
                Some(path) => {
                    std::fs::write(path, format!("{json}\n")).map_err(|e| e.to_string())?;
                    println!("report: {}", path.display());
                }
                None => println!("{json}"),
            }
            if let Some(csv_path) = csv {
                match &report.per_label_stats {
                    Some(stats) => {
                        std::fs::write(csv_path, stats_to_csv(stats)).map_err(|e| e.to_string())?;
                        println!("per-label stats: {}", csv_path.display());
                    }
                    None => return Err("--csv requires nli mode (per-label stats)".into()),
                }
            }
            Ok(())
        }

        Cmd::Nn {
            ckpt,
            corpus,
            query,
            k,
        } => {
            println!("# resolved configuration");
            println!("k = {k}");
            println!("query = {query:?}");
            let checkpoint = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
            let data = load_corpus(corpus).map_err(|e| e.to_string())?;
            let ids: Vec<u32> = query
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<u32>()
                        .map_err(|e| format!("bad token id {t:?}: {e}"))
                })
                .collect::<Result<_, _>>()?;
            let q = TokenSequence::new(ids).map_err(|e| e.to_string())?;
            let sentences: Vec<TokenSequence> =
                data.samples.iter().map(|s| s.text.clone()).collect();
            let hits = nearest_neighbors(&q, &sentences, *k, &checkpoint.params)
                .map_err(|e| e.to_string())?;
            for (rank, (idx, dist)) in hits.iter().enumerate() {
                println!(
                    "{}. corpus[{idx}] l1={dist:.6} tokens={:?}",
                    rank + 1,
                    sentences[*idx].ids()
                );
            }
            Ok(())
        }

        Cmd::Gradcheck { seeds } => {
            println!("# resolved configuration");
            println!("seeds = {seeds}");
            let entries = gradient_suite(*seeds).map_err(|e| e.to_string())?;
            let mut all_passed = true;
            for (name, worst, passed) in summarize(&entries) {
                println!(
                    "{}: worst rel error {:.3e} over {} seeds ... {}",
                    name,
                    worst,
                    seeds,
                    if passed { "PASS" } else { "FAIL" }
                );
                all_passed &= passed;
            }
            if all_passed {
                println!("gradient suite: all {} checks passed", entries.len());
                Ok(())
            } else {
                Err("gradient suite reported failures".into())
            }
        }
    }
}

/// Flat view of the train section for the configuration echo.
#[derive(serde::Serialize)]
struct TrainEcho {
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    grad_accumulation_steps: usize,
    optimizer: OptimizerKind,
    seed: u64,
    anchor_direction: AnchorDirection,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_path: Option<PathBuf>,
}

impl From<&TrainConfig> for TrainEcho {
    fn from(c: &TrainConfig) -> Self {
        TrainEcho {
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            grad_accumulation_steps: c.grad_accumulation_steps,
            optimizer: c.optimizer,
            seed: c.seed,
            anchor_direction: c.anchor_direction,
            checkpoint_path: c.checkpoint_path.clone(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
