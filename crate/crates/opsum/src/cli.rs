//! One binary, composable subcommands: ingest, embed, sdc, train,
//! summarize, eval, ablate, annotate, pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure (a machine-readable error
//! record goes to stderr), 2 usage errors (argument parsing). Every run
//! appends a manifest under the output directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::annotate::{annotate_testset, make_transport_factory, AnnotationClientConfig, PromptKind, TransportKind};
use crate::corpus::{load_corpus, write_corpus, Split};
use crate::eval::{run_ablation, MultiRef};
use crate::generate::GenerationConfig;
use crate::manifest::RunManifest;
use crate::model::{load_checkpoint, Arch};
use crate::pipeline::{
    run_pipeline, stage_embed, stage_eval, stage_sdc, stage_summarize, stage_train,
    EmbedderChoice, EvalStageConfig, ModelStageConfig, PipelineConfig, PipelineError,
};
use crate::sdc::{SdcHyperparams, SdcMode};
use crate::train::TrainConfig;

#[derive(Parser, Debug)]
#[command(
    name = "opsum",
    about = "Multi-source opinion summarization: synthetic data construction, training, decoding, evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Where outputs and manifests go.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Configuration file (required by `pipeline`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EmbedderArgs {
    /// Embedding backend.
    #[arg(long, default_value = "fallback", value_parser = ["external", "precomputed", "fallback"])]
    embedder: String,
    /// Checkpoint name (external) or vectors file (precomputed).
    #[arg(long, default_value = "")]
    checkpoint: String,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    dimension: usize,
}

impl EmbedderArgs {
    fn choice(&self) -> EmbedderChoice {
        EmbedderChoice {
            kind: self.embedder.clone(),
            checkpoint: self.checkpoint.clone(),
            dimension: self.dimension,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct GenerationArgs {
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long, default_value_t = 3)]
    no_repeat_ngram: usize,
    #[arg(long, default_value_t = 100)]
    max_length: usize,
    #[arg(long, default_value_t = 0)]
    min_length: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
}

impl GenerationArgs {
    fn config(&self) -> GenerationConfig {
        GenerationConfig {
            beam_size: self.beam_size,
            no_repeat_ngram: self.no_repeat_ngram,
            max_length: self.max_length,
            min_length: self.min_length,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate a corpus; write the normalized copy and a load report.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        split: Split,
        /// Where to write the load report (default: beside the input file).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed every corpus text into a precomputed-vectors file.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        embedder: EmbedderArgs,
        /// Vector cache directory (omit to disable caching).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output vectors file (default: <out-dir>/embeddings.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Construct synthetic training quadruplets.
    Sdc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        embedder: EmbedderArgs,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 85.0)]
        percentile: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda2: f64,
        #[arg(long, default_value_t = 10)]
        m_cap: usize,
        /// Pseudo-summary selection strategy.
        #[arg(long, default_value = "full")]
        mode: SdcMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a summarizer on quadruplets.
    Train {
        #[arg(long)]
        quads: PathBuf,
        #[arg(long, default_value = "medos")]
        arch: Arch,
        #[arg(long, default_value_t = 2e-6)]
        learning_rate: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        adam_eps: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long)]
        grad_clip: Option<f64>,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 2)]
        num_layers: usize,
        #[arg(long, default_value_t = 4)]
        num_heads: usize,
        #[arg(long, default_value_t = 96)]
        max_review_len: usize,
        #[arg(long, default_value_t = 32)]
        max_desc_len: usize,
        #[arg(long, default_value_t = 48)]
        max_qa_len: usize,
        #[arg(long, default_value_t = 24)]
        max_tgt_len: usize,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
    },
    /// Generate one summary per product with beam search.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        generation: GenerationArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against gold summaries.
    Eval {
        /// Predictions file (line-delimited {product_id, summary, logprob}).
        #[arg(long)]
        pred: PathBuf,
        /// Gold corpus with gold summaries.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated metrics among r1, r2, rl.
        #[arg(long, default_value = "r1,r2,rl", value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, default_value = "max")]
        multi_ref: MultiRef,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the four source configurations (all, no QA, no description,
    /// reviews only) with one checkpoint.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        generation: GenerationArgs,
        #[arg(long, default_value = "max")]
        multi_ref: MultiRef,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extend a test corpus with generated reference summaries.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kind: PromptKind,
        #[arg(long, default_value = "stub")]
        transport: TransportKind,
        /// Fixture directory for the stub transport.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Endpoint identifier recorded in provenance.
        #[arg(long, default_value = "default-endpoint")]
        endpoint: String,
        #[arg(long, default_value_t = 2)]
        max_retries: usize,
        #[arg(long, default_value_t = 30)]
        rate_limit_per_minute: u32,
        /// Bounded concurrent in-flight requests.
        #[arg(long, default_value_t = 2)]
        max_in_flight: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ingest -> embed -> sdc -> train -> summarize -> eval from the
    /// `--config` file, skipping unchanged stages.
    Pipeline,
}

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write as _;
    let _ = writeln!(std::io::stdout(), "{args}");
}

macro_rules! emitln {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

/// Machine-readable error record printed to stderr on failure.
#[derive(serde::Serialize)]
struct ErrorRecord<'a> {
    error: String,
    subcommand: &'a str,
}

fn fail(subcommand: &str, err: impl std::fmt::Display) -> i32 {
    let rec = ErrorRecord {
        error: err.to_string(),
        subcommand,
    };
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
    1
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders usage; its exit code is 2 for usage errors and
            // 0 for --help/--version.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    dispatch(cli)
}

fn dispatch(cli: Cli) -> i32 {
    let out_dir = cli.out_dir.clone();
    let seed = cli.seed;
    let global_config = cli.config.clone();
    match cli.command {
        Command::Ingest { input, split, report } => {
            let mut manifest = RunManifest::new(
                "ingest",
                serde_json::json!({"input": input, "split": split}),
                seed,
            );
            manifest.record_input(&input);
            let result = (|| -> Result<_, PipelineError> {
                let (corpus, load_report) = load_corpus(&input, split)?;
                std::fs::create_dir_all(&out_dir).map_err(|source| PipelineError::Io {
                    path: out_dir.clone(),
                    source,
                })?;
                let corpus_out = out_dir.join("corpus.jsonl");
                write_corpus(&corpus, &corpus_out)?;
                // The report lands beside the input unless redirected.
                let report_out = match report {
                    Some(custom) => {
                        load_report.write_to(&custom)?;
                        custom
                    }
                    None => load_report.write_beside(&input)?,
                };
                Ok((corpus_out, report_out))
            })();
            match result {
                Ok((corpus_out, report_out)) => {
                    manifest.record_output(&corpus_out);
                    manifest.record_output(&report_out);
                    emitln!("ingested -> {}", corpus_out.display());
                    finish(manifest, &out_dir, "ingest")
                }
                Err(e) => fail("ingest", e),
            }
        }
        Command::Embed {
            input,
            split,
            embedder,
            cache_dir,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join("embeddings.jsonl"));
            let mut manifest = RunManifest::new(
                "embed",
                serde_json::json!({"input": input, "embedder": embedder.choice()}),
                seed,
            );
            manifest.record_input(&input);
            match stage_embed(&input, split, &embedder.choice(), cache_dir.as_deref(), &out) {
                Ok(()) => {
                    manifest.record_output(&out);
                    emitln!("embeddings -> {}", out.display());
                    finish(manifest, &out_dir, "embed")
                }
                Err(e) => fail("embed", e),
            }
        }
        Command::Sdc {
            input,
            split,
            embedder,
            k,
            percentile,
            lambda1,
            lambda2,
            m_cap,
            mode,
            out,
        } => {
            let hp = SdcHyperparams {
                k,
                percentile,
                lambda1,
                lambda2,
                m_cap,
            };
            let out = out.unwrap_or_else(|| out_dir.join("quadruplets.jsonl"));
            let skipped_out = out.with_extension("skipped.jsonl");
            let mut manifest = RunManifest::new(
                "sdc",
                serde_json::json!({"input": input, "hyperparams": hp, "mode": mode, "embedder": embedder.choice()}),
                seed,
            );
            manifest.record_input(&input);
            let provider = match embedder.choice().to_provider() {
                Ok(p) => p,
                Err(e) => return fail("sdc", e),
            };
            match stage_sdc(&input, split, &provider, &hp, mode, seed, &out, &skipped_out) {
                Ok(count) => {
                    manifest.record_output(&out);
                    manifest.record_output(&skipped_out);
                    emitln!("{count} quadruplets -> {}", out.display());
                    finish(manifest, &out_dir, "sdc")
                }
                Err(e) => fail("sdc", e),
            }
        }
        Command::Train {
            quads,
            arch,
            learning_rate,
            batch_size,
            epochs,
            max_steps,
            adam_eps,
            weight_decay,
            grad_clip,
            hidden_dim,
            num_layers,
            num_heads,
            max_review_len,
            max_desc_len,
            max_qa_len,
            max_tgt_len,
            dropout,
        } => {
            let model_cfg = ModelStageConfig {
                arch,
                hidden_dim,
                num_layers,
                num_heads,
                max_review_len,
                max_desc_len,
                max_qa_len,
                max_tgt_len,
                dropout,
                tie_embeddings: true,
            };
            let train_cfg = TrainConfig {
                learning_rate,
                batch_size,
                epochs,
                adam_eps,
                weight_decay,
                grad_clip,
                seed,
                max_steps,
                ..TrainConfig::default()
            };
            let mut manifest = RunManifest::new(
                "train",
                serde_json::json!({"quads": quads, "model": model_cfg, "train": train_cfg}),
                seed,
            );
            manifest.record_input(&quads);
            match stage_train(&quads, &model_cfg, &train_cfg, &out_dir) {
                Ok(ckpt) => {
                    manifest.record_output(&ckpt);
                    emitln!("checkpoint -> {}", ckpt.display());
                    finish(manifest, &out_dir, "train")
                }
                Err(e) => fail("train", e),
            }
        }
        Command::Summarize {
            checkpoint,
            input,
            split,
            generation,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join("summaries.jsonl"));
            let mut manifest = RunManifest::new(
                "summarize",
                serde_json::json!({"checkpoint": checkpoint, "input": input, "generation": generation.config()}),
                seed,
            );
            manifest.record_input(&checkpoint);
            manifest.record_input(&input);
            match stage_summarize(&checkpoint, &input, split, &generation.config(), &out) {
                Ok(count) => {
                    manifest.record_output(&out);
                    emitln!("{count} summaries -> {}", out.display());
                    finish(manifest, &out_dir, "summarize")
                }
                Err(e) => fail("summarize", e),
            }
        }
        Command::Eval {
            pred,
            gold,
            split,
            metrics,
            multi_ref,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join("eval.json"));
            let eval_cfg = EvalStageConfig {
                metrics,
                multi_ref,
            };
            let mut manifest = RunManifest::new(
                "eval",
                serde_json::json!({"pred": pred, "gold": gold, "eval": eval_cfg}),
                seed,
            );
            manifest.record_input(&pred);
            manifest.record_input(&gold);
            match stage_eval(&pred, &gold, split, &eval_cfg, &out) {
                Ok(reports) => {
                    manifest.record_output(&out);
                    for r in &reports {
                        emitln!(
                            "{}: f1 {:.2} (precision {:.2}, recall {:.2}) over {} products",
                            r.variant,
                            r.mean_f1 * 100.0,
                            r.mean_precision * 100.0,
                            r.mean_recall * 100.0,
                            r.per_product.len()
                        );
                    }
                    finish(manifest, &out_dir, "eval")
                }
                Err(e) => fail("eval", e),
            }
        }
        Command::Ablate {
            checkpoint,
            input,
            split,
            generation,
            multi_ref,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join("ablation.json"));
            let mut manifest = RunManifest::new(
                "ablate",
                serde_json::json!({"checkpoint": checkpoint, "input": input, "generation": generation.config(), "multi_ref": multi_ref}),
                seed,
            );
            manifest.record_input(&checkpoint);
            manifest.record_input(&input);
            let result = (|| -> Result<_, PipelineError> {
                let (model, tok) = load_checkpoint(&checkpoint)?;
                let (corpus, _) = load_corpus(&input, split)?;
                let table =
                    run_ablation(&model, &tok, &corpus.products, &generation.config(), multi_ref)
                        .map_err(|e| PipelineError::Incompatible(e.to_string()))?;
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent).ok();
                }
                std::fs::write(
                    &out,
                    serde_json::to_string_pretty(&table).expect("table serializes"),
                )
                .map_err(|source| PipelineError::Io {
                    path: out.clone(),
                    source,
                })?;
                Ok(table)
            })();
            match result {
                Ok(table) => {
                    manifest.record_output(&out);
                    for row in &table.rows {
                        emitln!(
                            "{:<26} r1 {:.2}  r2 {:.2}  rl {:.2}",
                            row.label,
                            row.r1 * 100.0,
                            row.r2 * 100.0,
                            row.rl * 100.0
                        );
                    }
                    finish(manifest, &out_dir, "ablate")
                }
                Err(e) => fail("ablate", e),
            }
        }
        Command::Annotate {
            input,
            kind,
            transport,
            fixtures,
            endpoint,
            max_retries,
            rate_limit_per_minute,
            max_in_flight,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join(format!("extended.{kind}.jsonl")));
            let store = out_dir.join(format!("annotations.{kind}.jsonl"));
            let cfg = AnnotationClientConfig {
                endpoint,
                max_retries,
                timeout_secs: 60,
                rate_limit_per_minute,
                max_in_flight,
                transport,
                fixture_dir: fixtures,
            };
            let mut manifest = RunManifest::new(
                "annotate",
                serde_json::json!({"input": input, "kind": kind.as_str(), "config": cfg}),
                seed,
            );
            manifest.record_input(&input);
            let result = (|| -> Result<_, PipelineError> {
                let (corpus, _) = load_corpus(&input, Split::Test)?;
                let factory = make_transport_factory(&cfg)?;
                std::fs::create_dir_all(&out_dir).ok();
                let run = annotate_testset(&corpus, &cfg, kind, &factory, &store)?;
                write_corpus(&run.extended, &out)?;
                Ok(run)
            })();
            match result {
                Ok(run) => {
                    manifest.record_output(&out);
                    manifest.record_output(&store);
                    emitln!(
                        "annotated {} products ({} already stored, {} failed) -> {}",
                        run.annotated,
                        run.skipped_existing,
                        run.failed,
                        out.display()
                    );
                    finish(manifest, &out_dir, "annotate")
                }
                Err(e) => fail("annotate", e),
            }
        }
        Command::Pipeline => {
            let Some(config) = global_config else {
                eprintln!("error: `pipeline` requires --config <file>");
                return 2;
            };
            let mut manifest = RunManifest::new("pipeline", serde_json::json!({"config": config}), seed);
            manifest.record_input(&config);
            let parsed: Result<PipelineConfig, _> = std::fs::read_to_string(&config)
                .map_err(|e| e.to_string())
                .and_then(|body| serde_json::from_str(&body).map_err(|e| e.to_string()));
            let cfg = match parsed {
                Ok(cfg) => cfg,
                Err(e) => return fail("pipeline", format!("config {}: {e}", config.display())),
            };
            match run_pipeline(&cfg, &out_dir, seed) {
                Ok(stages) => {
                    for stage in &stages {
                        for output in &stage.outputs {
                            manifest.record_output(output);
                        }
                        emitln!(
                            "{:<10} {}",
                            stage.name,
                            if stage.skipped { "skipped (up to date)" } else { "ran" }
                        );
                    }
                    finish(manifest, &out_dir, "pipeline")
                }
                Err(e @ PipelineError::Incompatible(_)) => {
                    let _ = fail("pipeline", e);
                    2
                }
                Err(e) => fail("pipeline", e),
            }
        }
    }
}

fn finish(manifest: RunManifest, out_dir: &std::path::Path, subcommand: &str) -> i32 {
    match manifest.append(out_dir) {
        Ok(()) => 0,
        Err(e) => fail(subcommand, e),
    }
}

