//! Stage orchestration: ingest, embed, quadruplet construction, training,
//! summarization, and evaluation as composable steps over one config.
//!
//! Stage outputs are content-addressed: each stage records a signature
//! (SHA-256 over its config and input hashes) beside its outputs, and a
//! re-run with unchanged inputs is skipped. Corrupting or deleting an
//! input invalidates every downstream stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::AnnotateError;
use crate::corpus::{load_corpus, write_corpus, Corpus, CorpusError, Split};
use crate::embed::{EmbedError, EmbeddingCache, EmbeddingProviderConfig, ProviderKind, VectorRecord};
use crate::eval::{corpus_rouge, EvalReport, MultiRef, RougeVariant};
use crate::generate::{summarize_product, GenError, GenerationConfig, SummaryOutput};
use crate::manifest::{file_sha256, text_sha256, ManifestError};
use crate::model::{load_checkpoint, Arch, ModelConfig, ModelError, SummaryModel};
use crate::rng::Rng;
use crate::sdc::{run_sdc, SdcError, SdcHyperparams, SdcMode, SyntheticQuadruplet};
use crate::tokenizer::Tokenizer;
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stages are incompatible: {0}")]
    Incompatible(String),
    #[error("pipeline file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {line} of {path}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Sdc(#[from] SdcError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which embedding backend a run uses, as configured from the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderChoice {
    /// One of `fallback`, `precomputed`, `external`.
    pub kind: String,
    /// Checkpoint name (external) or vectors-file path (precomputed).
    #[serde(default)]
    pub checkpoint: String,
    pub dimension: usize,
}

impl Default for EmbedderChoice {
    fn default() -> Self {
        EmbedderChoice {
            kind: "fallback".to_string(),
            checkpoint: String::new(),
            dimension: 64,
        }
    }
}

impl EmbedderChoice {
    pub fn to_provider(&self) -> Result<EmbeddingProviderConfig, PipelineError> {
        let provider_kind = match self.kind.as_str() {
            "fallback" => ProviderKind::HashedNgramFallback,
            "precomputed" => ProviderKind::PrecomputedFile,
            "external" => ProviderKind::ExternalCheckpoint,
            other => {
                return Err(PipelineError::Incompatible(format!(
                    "unknown embedder kind {other:?}, expected fallback|precomputed|external"
                )))
            }
        };
        Ok(EmbeddingProviderConfig {
            provider_kind,
            checkpoint_name: self.checkpoint.clone(),
            dimension: self.dimension,
            max_retries: 2,
        })
    }
}

/// Model dimensions without the vocabulary size (derived from data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStageConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_review_len: usize,
    pub max_desc_len: usize,
    pub max_qa_len: usize,
    pub max_tgt_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelStageConfig {
    fn default() -> Self {
        ModelStageConfig {
            arch: Arch::Medos,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            max_review_len: 96,
            max_desc_len: 32,
            max_qa_len: 48,
            max_tgt_len: 24,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }
}

impl ModelStageConfig {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_review_len: self.max_review_len,
            max_desc_len: self.max_desc_len,
            max_qa_len: self.max_qa_len,
            max_tgt_len: self.max_tgt_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdcStageConfig {
    #[serde(flatten)]
    pub hyperparams: SdcHyperparams,
    pub mode: SdcMode,
}

impl Default for SdcStageConfig {
    fn default() -> Self {
        SdcStageConfig {
            hyperparams: SdcHyperparams::default(),
            mode: SdcMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStageConfig {
    pub metrics: Vec<String>,
    pub multi_ref: MultiRef,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig {
            metrics: vec!["r1".into(), "r2".into(), "rl".into()],
            multi_ref: MultiRef::Max,
        }
    }
}

/// Full pipeline configuration, read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub embedder: EmbedderChoice,
    #[serde(default)]
    pub sdc: SdcStageConfig,
    #[serde(default)]
    pub model: ModelStageConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generate: GenerationConfig,
    #[serde(default)]
    pub eval: EvalStageConfig,
}

fn default_split() -> Split {
    Split::Train
}

// ---------------------------------------------------------------------------
// JSONL helpers
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item).expect("item serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| PipelineError::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Loads and normalizes a corpus, writing the normalized copy and the load
/// report into `out_dir`.
pub fn stage_ingest(
    input: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (corpus, report) = load_corpus(input, split)?;
    let corpus_out = out_dir.join("corpus.jsonl");
    write_corpus(&corpus, &corpus_out)?;
    let report_out = out_dir.join("ingest.report.json");
    report.write_to(&report_out)?;
    Ok((corpus_out, report_out))
}

/// Every distinct text of a corpus, in first-appearance order: review
/// texts, descriptions, and concatenated question-answers.
pub fn corpus_texts(corpus: &Corpus) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut texts = Vec::new();
    let mut push = |t: &str| {
        if !t.is_empty() && seen.insert(t.to_string()) {
            texts.push(t.to_string());
        }
    };
    for p in &corpus.products {
        for r in &p.reviews {
            push(&r.text);
        }
        if let Some(d) = &p.description {
            push(d);
        }
        for qa in &p.qa_pairs {
            push(&qa.concatenated);
        }
    }
    texts
}

/// Embeds every corpus text and writes a precomputed-vectors file
/// (`{"key": <text>, "vector": [...]}` per line).
pub fn stage_embed(
    corpus_path: &Path,
    split: Split,
    choice: &EmbedderChoice,
    cache_dir: Option<&Path>,
    out_path: &Path,
) -> Result<(), PipelineError> {
    let (corpus, _) = load_corpus(corpus_path, split)?;
    let texts = corpus_texts(&corpus);
    let provider = choice.to_provider()?;
    let matrix = match cache_dir {
        Some(dir) => EmbeddingCache::new(dir).embed_cached(&provider, &texts)?,
        None => crate::embed::embed_texts(&provider, &texts)?,
    };
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut body = String::new();
    for i in 0..matrix.rows() {
        let rec = VectorRecord {
            key: matrix.row_key(i),
            vector: matrix.row(i),
        };
        body.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        body.push('\n');
    }
    std::fs::write(out_path, body).map_err(io_err(out_path))?;
    Ok(())
}

/// Builds quadruplets for a corpus and writes them (plus skip records).
#[allow(clippy::too_many_arguments)]
pub fn stage_sdc(
    corpus_path: &Path,
    split: Split,
    provider: &EmbeddingProviderConfig,
    hp: &SdcHyperparams,
    mode: SdcMode,
    seed: u64,
    out_path: &Path,
    skipped_path: &Path,
) -> Result<usize, PipelineError> {
    let (corpus, _) = load_corpus(corpus_path, split)?;
    let run = run_sdc(&corpus.products, provider, hp, mode, seed)?;
    write_jsonl(out_path, &run.quadruplets)?;
    write_jsonl(skipped_path, &run.skipped)?;
    Ok(run.quadruplets.len())
}

/// Builds the vocabulary over quadruplet texts, initializes a model, and
/// trains it. The final checkpoint is copied to `out_dir/checkpoint.json`.
pub fn stage_train(
    quads_path: &Path,
    model_cfg: &ModelStageConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let quads: Vec<SyntheticQuadruplet> = read_jsonl(quads_path)?;
    if quads.is_empty() {
        return Err(PipelineError::Incompatible(format!(
            "no quadruplets in {}",
            quads_path.display()
        )));
    }
    let mut texts: Vec<String> = Vec::new();
    for q in &quads {
        texts.extend(q.input_reviews.iter().cloned());
        texts.extend(q.description.iter().cloned());
        texts.extend(q.qa.iter().cloned());
        texts.push(q.pseudo_summary.clone());
    }
    let tok = Tokenizer::build(texts.iter().map(String::as_str));
    let config = model_cfg.to_model_config(tok.vocab_size());
    let mut rng = Rng::new(train_cfg.seed).fork("model-init");
    let mut model = SummaryModel::init(model_cfg.arch, config, &mut rng)?;
    let report = train(&mut model, &quads, &tok, train_cfg, Some(out_dir))?;

    let log_path = out_dir.join("train.log.jsonl");
    let log: Vec<serde_json::Value> = report
        .loss_curve
        .iter()
        .map(|(step, loss)| serde_json::json!({"step": step, "loss": loss}))
        .collect();
    write_jsonl(&log_path, &log)?;

    let stable = out_dir.join("checkpoint.json");
    match &report.final_checkpoint {
        Some(path) => {
            std::fs::copy(path, &stable).map_err(io_err(&stable))?;
        }
        None => {
            crate::model::save_checkpoint(&stable, &model, &tok)?;
        }
    }
    Ok(stable)
}

/// Summarizes every product of a corpus with a trained checkpoint.
pub fn stage_summarize(
    checkpoint: &Path,
    corpus_path: &Path,
    split: Split,
    gen_cfg: &GenerationConfig,
    out_path: &Path,
) -> Result<usize, PipelineError> {
    let (model, tok) = load_checkpoint(checkpoint)?;
    let (corpus, _) = load_corpus(corpus_path, split)?;
    let mut outputs: Vec<SummaryOutput> = Vec::new();
    for p in &corpus.products {
        if p.reviews.is_empty() {
            continue;
        }
        outputs.push(summarize_product(&model, &tok, p, gen_cfg)?);
    }
    write_jsonl(out_path, &outputs)?;
    Ok(outputs.len())
}

/// Scores predictions against gold summaries for each requested metric.
/// Writes three artifacts beside `out_path`: the JSON report itself, one
/// machine-readable line per (metric, product), and a rendered text table
/// with scores scaled x100.
pub fn stage_eval(
    pred_path: &Path,
    gold_path: &Path,
    split: Split,
    eval_cfg: &EvalStageConfig,
    out_path: &Path,
) -> Result<Vec<EvalReport>, PipelineError> {
    let preds: Vec<SummaryOutput> = read_jsonl(pred_path)?;
    let (gold, _) = load_corpus(gold_path, split)?;
    let mut reports = Vec::new();
    for metric in &eval_cfg.metrics {
        let variant: RougeVariant = metric
            .parse()
            .map_err(PipelineError::Incompatible)?;
        reports.push(corpus_rouge(&preds, &gold.products, variant, eval_cfg.multi_ref));
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let body = serde_json::to_string_pretty(&reports).expect("reports serialize");
    std::fs::write(out_path, body).map_err(io_err(out_path))?;

    let per_product_path = out_path.with_extension("per_product.jsonl");
    let mut records = Vec::new();
    for r in &reports {
        for p in &r.per_product {
            records.push(serde_json::json!({
                "metric": r.variant.to_string(),
                "product_id": p.product_id,
                "precision": p.precision,
                "recall": p.recall,
                "f1": p.f1,
                "references": p.references,
            }));
        }
    }
    write_jsonl(&per_product_path, &records)?;

    let table_path = out_path.with_extension("txt");
    let mut table = format!("{:<8} {:>10} {:>10} {:>10} {:>10}\n", "metric", "precision", "recall", "f1", "products");
    for r in &reports {
        table.push_str(&format!(
            "{:<8} {:>10.2} {:>10.2} {:>10.2} {:>10}\n",
            r.variant.to_string(),
            r.mean_precision * 100.0,
            r.mean_recall * 100.0,
            r.mean_f1 * 100.0,
            r.per_product.len()
        ));
    }
    std::fs::write(&table_path, table).map_err(io_err(&table_path))?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Pipeline driver with content-addressed skipping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageState {
    signature: String,
    /// Output paths with the content hash recorded when the stage ran, so
    /// corrupted outputs invalidate the stage.
    outputs: Vec<(PathBuf, String)>,
}

impl StageState {
    fn capture(signature: String, outputs: &[PathBuf]) -> Result<Self, PipelineError> {
        let mut hashed = Vec::with_capacity(outputs.len());
        for p in outputs {
            hashed.push((p.clone(), file_sha256(p)?));
        }
        Ok(StageState {
            signature,
            outputs: hashed,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub name: String,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

fn stage_signature(config_json: &str, inputs: &[&Path]) -> Result<String, PipelineError> {
    let mut material = String::from(config_json);
    for input in inputs {
        material.push('\n');
        material.push_str(&file_sha256(input)?);
    }
    Ok(text_sha256(&material))
}

fn state_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("state").join(format!("{stage}.json"))
}

fn load_state(out_dir: &Path, stage: &str) -> Option<StageState> {
    let body = std::fs::read_to_string(state_path(out_dir, stage)).ok()?;
    serde_json::from_str(&body).ok()
}

fn store_state(out_dir: &Path, stage: &str, state: &StageState) -> Result<(), PipelineError> {
    let path = state_path(out_dir, stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let body = serde_json::to_string_pretty(state).expect("state serializes");
    std::fs::write(&path, body).map_err(io_err(&path))
}

fn up_to_date(state: Option<&StageState>, signature: &str) -> bool {
    match state {
        Some(s) => {
            s.signature == signature
                && s.outputs
                    .iter()
                    .all(|(p, hash)| file_sha256(p).is_ok_and(|h| h == *hash))
        }
        None => false,
    }
}

/// Validates stage compatibility before anything runs.
pub fn check_pipeline(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if !cfg.corpus.exists() {
        return Err(PipelineError::Incompatible(format!(
            "corpus {} does not exist",
            cfg.corpus.display()
        )));
    }
    cfg.embedder.to_provider()?;
    for metric in &cfg.eval.metrics {
        metric
            .parse::<RougeVariant>()
            .map_err(PipelineError::Incompatible)?;
    }
    let (corpus, _) = load_corpus(&cfg.corpus, cfg.split)?;
    if corpus.products.is_empty() {
        return Err(PipelineError::Incompatible("corpus has no products".into()));
    }
    if !corpus
        .products
        .iter()
        .any(|p| p.gold_summaries.as_ref().is_some_and(|g| !g.is_empty()))
    {
        return Err(PipelineError::Incompatible(
            "eval stage needs at least one product with gold summaries".into(),
        ));
    }
    Ok(())
}

/// Runs ingest -> embed -> sdc -> train -> summarize -> eval, skipping
/// stages whose signature and outputs are unchanged.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<StageOutcome>, PipelineError> {
    check_pipeline(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut outcomes = Vec::new();

    // ingest
    let corpus_out = out_dir.join("corpus.jsonl");
    let report_out = out_dir.join("ingest.report.json");
    {
        let sig = stage_signature(
            &serde_json::to_string(&(&cfg.split,)).expect("serializes"),
            &[&cfg.corpus],
        )?;
        let skipped = up_to_date(load_state(out_dir, "ingest").as_ref(), &sig);
        if !skipped {
            stage_ingest(&cfg.corpus, cfg.split, out_dir)?;
            store_state(out_dir, "ingest", &StageState::capture(sig, &[corpus_out.clone(), report_out.clone()])?)?;
        }
        outcomes.push(StageOutcome {
            name: "ingest".into(),
            skipped,
            outputs: vec![corpus_out.clone(), report_out.clone()],
        });
    }

    // embed
    let embeddings_out = out_dir.join("embeddings.jsonl");
    {
        let sig = stage_signature(
            &serde_json::to_string(&cfg.embedder).expect("serializes"),
            &[&corpus_out],
        )?;
        let skipped = up_to_date(load_state(out_dir, "embed").as_ref(), &sig);
        if !skipped {
            stage_embed(
                &corpus_out,
                cfg.split,
                &cfg.embedder,
                Some(&out_dir.join("cache")),
                &embeddings_out,
            )?;
            store_state(out_dir, "embed", &StageState::capture(sig, std::slice::from_ref(&embeddings_out))?)?;
        }
        outcomes.push(StageOutcome {
            name: "embed".into(),
            skipped,
            outputs: vec![embeddings_out.clone()],
        });
    }

    // sdc (reads the embed stage's vectors as a precomputed provider)
    let quads_out = out_dir.join("quadruplets.jsonl");
    let skipped_out = out_dir.join("sdc.skipped.jsonl");
    {
        let sig = stage_signature(
            &serde_json::to_string(&(&cfg.sdc, seed)).expect("serializes"),
            &[&corpus_out, &embeddings_out],
        )?;
        let skipped = up_to_date(load_state(out_dir, "sdc").as_ref(), &sig);
        if !skipped {
            let provider = EmbeddingProviderConfig::precomputed(&embeddings_out, cfg.embedder.dimension);
            stage_sdc(
                &corpus_out,
                cfg.split,
                &provider,
                &cfg.sdc.hyperparams,
                cfg.sdc.mode,
                seed,
                &quads_out,
                &skipped_out,
            )?;
            store_state(out_dir, "sdc", &StageState::capture(sig, &[quads_out.clone(), skipped_out.clone()])?)?;
        }
        outcomes.push(StageOutcome {
            name: "sdc".into(),
            skipped,
            outputs: vec![quads_out.clone(), skipped_out.clone()],
        });
    }

    // train
    let checkpoint_out = out_dir.join("checkpoint.json");
    {
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let sig = stage_signature(
            &serde_json::to_string(&(&cfg.model, &train_cfg)).expect("serializes"),
            &[&quads_out],
        )?;
        let skipped = up_to_date(load_state(out_dir, "train").as_ref(), &sig);
        if !skipped {
            stage_train(&quads_out, &cfg.model, &train_cfg, out_dir)?;
            store_state(out_dir, "train", &StageState::capture(sig, std::slice::from_ref(&checkpoint_out))?)?;
        }
        outcomes.push(StageOutcome {
            name: "train".into(),
            skipped,
            outputs: vec![checkpoint_out.clone()],
        });
    }

    // summarize
    let summaries_out = out_dir.join("summaries.jsonl");
    {
        let sig = stage_signature(
            &serde_json::to_string(&cfg.generate).expect("serializes"),
            &[&checkpoint_out, &corpus_out],
        )?;
        let skipped = up_to_date(load_state(out_dir, "summarize").as_ref(), &sig);
        if !skipped {
            stage_summarize(&checkpoint_out, &corpus_out, cfg.split, &cfg.generate, &summaries_out)?;
            store_state(out_dir, "summarize", &StageState::capture(sig, std::slice::from_ref(&summaries_out))?)?;
        }
        outcomes.push(StageOutcome {
            name: "summarize".into(),
            skipped,
            outputs: vec![summaries_out.clone()],
        });
    }

    // eval
    let eval_out = out_dir.join("eval.json");
    {
        let sig = stage_signature(
            &serde_json::to_string(&cfg.eval).expect("serializes"),
            &[&summaries_out, &corpus_out],
        )?;
        let skipped = up_to_date(load_state(out_dir, "eval").as_ref(), &sig);
        if !skipped {
            stage_eval(&summaries_out, &corpus_out, cfg.split, &cfg.eval, &eval_out)?;
            store_state(out_dir, "eval", &StageState::capture(sig, std::slice::from_ref(&eval_out))?)?;
        }
        outcomes.push(StageOutcome {
            name: "eval".into(),
            skipped,
            outputs: vec![eval_out.clone()],
        });
    }

    Ok(outcomes)
}
