//! Reference-summary annotation: prompt rendering and a text-generation
//! client for extending test sets.
//!
//! Two prompt kinds exist: reviews-only, and reviews + description +
//! question-answers. The endpoint is abstracted to "prompt string in,
//! completion string out": the live transport pipes prompts through the
//! command named by `OPSUM_ANNOTATE_CMD`, and the stub transport replays
//! canned completions from a fixture directory
//! (`<dir>/<kind>/<product_id>.txt`). Tests always use the stub; no test
//! touches the network.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_whitespace, Corpus, Product};

/// Environment variable naming the live bridge command. The prompt is
/// written to its stdin; the completion is read from its stdout.
pub const ANNOTATE_CMD_ENV: &str = "OPSUM_ANNOTATE_CMD";

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("product {product_id} has neither description nor question-answers; the {kind} prompt needs at least one")]
    MissingAdditionalSources { product_id: String, kind: PromptKind },
    #[error("annotation store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation store {path} line {line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("stub transport requires a fixture directory")]
    StubWithoutFixtures,
    #[error("live transport requires {ANNOTATE_CMD_ENV} to name a bridge command")]
    LiveWithoutBridge,
}

/// Which sources the prompt presents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    /// Reviews only.
    GptR,
    /// Reviews, description, and question-answers.
    GptRdq,
}

impl PromptKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::GptR => "gpt-r",
            PromptKind::GptRdq => "gpt-rdq",
        }
    }
}

impl std::str::FromStr for PromptKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gpt-r" => Ok(PromptKind::GptR),
            "gpt-rdq" => Ok(PromptKind::GptRdq),
            other => Err(format!("unknown kind {other:?}, expected gpt-r|gpt-rdq")),
        }
    }
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Template text with the source slots unfilled, for fidelity checks.
pub fn prompt_template(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::GptR => {
            "Following are the reviews for a product. Generate a summary of the opinions as a review itself with a word limit of under 100 words. Use information from the given reviews only to generate the summary.\nreviews: {reviews}"
        }
        PromptKind::GptRdq => {
            "Following are the reviews, description, and question-answers for a product. Generate a summary of the opinions as a review itself with a word limit of under 100 words. Use information from the given reviews, description, and question-answers only to generate the summary.\nreviews: {reviews}\ndescription: {description}\nquestion-answers: {question_answers}"
        }
    }
}

fn json_list(items: &[String]) -> String {
    let quoted: Vec<String> = items
        .iter()
        .map(|t| serde_json::to_string(t).expect("string serializes"))
        .collect();
    format!("[{}]", quoted.join(", "))
}

/// Renders the prompt for one product. Every provided source appears
/// exactly once, in template order; an absent description or empty QA list
/// renders as an empty slot with its section header retained.
pub fn build_prompt(kind: PromptKind, p: &Product) -> Result<String, AnnotateError> {
    let reviews: Vec<String> = p.reviews.iter().map(|r| r.text.clone()).collect();
    match kind {
        PromptKind::GptR => Ok(prompt_template(kind).replace("{reviews}", &json_list(&reviews))),
        PromptKind::GptRdq => {
            let has_desc = p.description.as_deref().is_some_and(|d| !d.is_empty());
            if !has_desc && p.qa_pairs.is_empty() {
                return Err(AnnotateError::MissingAdditionalSources {
                    product_id: p.product_id.clone(),
                    kind,
                });
            }
            let description = serde_json::to_string(p.description.as_deref().unwrap_or(""))
                .expect("string serializes");
            let qa: Vec<String> = p.qa_pairs.iter().map(|q| q.concatenated.clone()).collect();
            Ok(prompt_template(kind)
                .replace("{reviews}", &json_list(&reviews))
                .replace("{description}", &description)
                .replace("{question_answers}", &json_list(&qa)))
        }
    }
}

/// Transport selection for the annotation client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Live,
    Stub,
}

impl std::str::FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(TransportKind::Live),
            "stub" => Ok(TransportKind::Stub),
            other => Err(format!("unknown transport {other:?}, expected live|stub")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationClientConfig {
    /// Free-form endpoint identifier recorded in provenance.
    pub endpoint: String,
    pub max_retries: usize,
    pub timeout_secs: u64,
    /// Requests per minute across all workers (0 disables pacing).
    pub rate_limit_per_minute: u32,
    /// Bounded concurrent in-flight requests.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub transport: TransportKind,
    /// Required for the stub transport.
    pub fixture_dir: Option<PathBuf>,
}

fn default_in_flight() -> usize {
    2
}

impl Default for AnnotationClientConfig {
    fn default() -> Self {
        AnnotationClientConfig {
            endpoint: "unconfigured".to_string(),
            max_retries: 2,
            timeout_secs: 60,
            rate_limit_per_minute: 30,
            max_in_flight: default_in_flight(),
            transport: TransportKind::Stub,
            fixture_dir: None,
        }
    }
}

/// Prompt in, completion out. `Send` so the client can keep a bounded
/// number of requests in flight from worker threads.
pub trait AnnotationTransport: Send {
    fn complete(&mut self, product_id: &str, kind: PromptKind, prompt: &str)
        -> Result<String, String>;
}

/// Replays completions from `<dir>/<kind>/<product_id>.txt`; a missing
/// file surfaces as a transport failure (useful for fault injection).
pub struct StubTransport {
    pub dir: PathBuf,
}

impl AnnotationTransport for StubTransport {
    fn complete(
        &mut self,
        product_id: &str,
        kind: PromptKind,
        _prompt: &str,
    ) -> Result<String, String> {
        let path = self.dir.join(kind.as_str()).join(format!("{product_id}.txt"));
        std::fs::read_to_string(&path).map_err(|e| format!("no fixture at {}: {e}", path.display()))
    }
}

/// Pipes the prompt through the bridge command; rate limiting and backoff
/// are enforced between calls by the client, not here.
pub struct CommandAnnotationTransport {
    pub command: String,
}

impl CommandAnnotationTransport {
    pub fn from_env() -> Option<Self> {
        std::env::var(ANNOTATE_CMD_ENV)
            .ok()
            .filter(|c| !c.is_empty())
            .map(|command| CommandAnnotationTransport { command })
    }
}

impl AnnotationTransport for CommandAnnotationTransport {
    fn complete(
        &mut self,
        _product_id: &str,
        _kind: PromptKind,
        prompt: &str,
    ) -> Result<String, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn failed: {e}"))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(prompt.as_bytes())
            .map_err(|e| format!("write failed: {e}"))?;
        let out = child
            .wait_with_output()
            .map_err(|e| format!("wait failed: {e}"))?;
        if !out.status.success() {
            return Err(format!("command exited with {}", out.status));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// One stored annotation attempt with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub product_id: String,
    pub kind: PromptKind,
    pub prompt: String,
    /// Raw completion, kept for re-normalization without re-querying.
    pub raw_response: Option<String>,
    /// Whitespace-normalized summary (present iff the request succeeded).
    pub summary: Option<String>,
    pub status: AnnotationStatus,
    pub retries_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum AnnotationStatus {
    Ok,
    Failed { error: String },
}

/// Outcome of one annotation run.
#[derive(Debug, Clone)]
pub struct AnnotationRun {
    /// Test corpus extended with one generated reference per annotated
    /// product; failed products are excluded.
    pub extended: Corpus,
    pub records: Vec<AnnotationRecord>,
    pub annotated: usize,
    pub skipped_existing: usize,
    pub failed: usize,
}

fn load_store(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let body = std::fs::read_to_string(path).map_err(|source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| AnnotateError::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(rec);
    }
    Ok(records)
}

fn append_record(path: &Path, rec: &AnnotationRecord) -> Result<(), AnnotateError> {
    let io_err = |source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let mut line = serde_json::to_string(rec).expect("record serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io_err)
}

/// Paces requests so that at most `rate_limit_per_minute` start per
/// minute across all workers, by handing out evenly spaced start slots.
struct RatePacer {
    next_slot: Mutex<Instant>,
    interval: Duration,
}

impl RatePacer {
    fn new(rate_per_minute: u32) -> Option<Self> {
        if rate_per_minute == 0 {
            return None;
        }
        Some(RatePacer {
            next_slot: Mutex::new(Instant::now()),
            interval: Duration::from_millis(60_000 / u64::from(rate_per_minute)),
        })
    }

    fn wait_for_slot(&self) {
        let my_slot = {
            let mut next = self.next_slot.lock().expect("pacer lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if my_slot > now {
            std::thread::sleep(my_slot - now);
        }
    }
}

fn run_request(
    transport: &mut dyn AnnotationTransport,
    cfg: &AnnotationClientConfig,
    pacer: Option<&RatePacer>,
    product_id: &str,
    kind: PromptKind,
    prompt: &str,
) -> (Result<String, String>, usize) {
    let mut attempt = 0usize;
    loop {
        if let Some(p) = pacer {
            p.wait_for_slot();
        }
        match transport.complete(product_id, kind, prompt) {
            Ok(raw) => return (Ok(raw), attempt),
            Err(_) if attempt < cfg.max_retries => {
                attempt += 1;
                if cfg.transport == TransportKind::Live {
                    // Exponential backoff against an overloaded service.
                    let wait = 100u64.saturating_mul(1 << attempt.min(6));
                    std::thread::sleep(Duration::from_millis(wait));
                }
            }
            Err(e) => return (Err(e), attempt),
        }
    }
}

/// Annotates every product of a test corpus with one generated reference
/// summary per (product, kind). Idempotent over the store at `store_path`:
/// products with a stored `Ok` record for this kind are skipped. Transport
/// failures after the retry budget mark the product failed and the run
/// continues. Up to `cfg.max_in_flight` requests run concurrently (each
/// worker gets its own transport from the factory); records land in the
/// store in corpus order regardless of completion order.
pub fn annotate_testset(
    corpus: &Corpus,
    cfg: &AnnotationClientConfig,
    kind: PromptKind,
    transport_factory: &(dyn Fn() -> Result<Box<dyn AnnotationTransport>, AnnotateError> + Sync),
    store_path: &Path,
) -> Result<AnnotationRun, AnnotateError> {
    let existing = load_store(store_path)?;
    let done: BTreeSet<&str> = existing
        .iter()
        .filter(|r| r.kind == kind && matches!(r.status, AnnotationStatus::Ok))
        .map(|r| r.product_id.as_str())
        .collect();

    // Sequential phase: resolve skips and prompt failures, queue requests.
    let n = corpus.products.len();
    let mut prepared: Vec<Option<AnnotationRecord>> = (0..n).map(|_| None).collect();
    let mut prompts: Vec<Option<String>> = (0..n).map(|_| None).collect();
    let mut request_indices: Vec<usize> = Vec::new();
    let mut skipped_existing = 0usize;
    for (i, p) in corpus.products.iter().enumerate() {
        if done.contains(p.product_id.as_str()) {
            skipped_existing += 1;
            continue;
        }
        match build_prompt(kind, p) {
            Ok(prompt) => {
                prompts[i] = Some(prompt);
                request_indices.push(i);
            }
            Err(AnnotateError::MissingAdditionalSources { product_id, kind }) => {
                prepared[i] = Some(AnnotationRecord {
                    product_id,
                    kind,
                    prompt: String::new(),
                    raw_response: None,
                    summary: None,
                    status: AnnotationStatus::Failed {
                        error: "neither description nor question-answers present".to_string(),
                    },
                    retries_used: 0,
                });
            }
            Err(other) => return Err(other),
        }
    }

    // Concurrent phase: bounded in-flight requests, one transport per
    // worker, results keyed by product index.
    let workers = cfg.max_in_flight.max(1).min(request_indices.len().max(1));
    let pacer = if cfg.transport == TransportKind::Live {
        RatePacer::new(cfg.rate_limit_per_minute)
    } else {
        None
    };
    let mut transports: Vec<Box<dyn AnnotationTransport>> = Vec::with_capacity(workers);
    for _ in 0..workers {
        transports.push(transport_factory()?);
    }
    let queue: Mutex<std::collections::VecDeque<usize>> =
        Mutex::new(request_indices.iter().copied().collect());
    type Completion = (usize, Result<String, String>, usize);
    let results: Mutex<Vec<Completion>> = Mutex::new(Vec::new());
    {
        let prompts = &prompts;
        let queue = &queue;
        let results = &results;
        let pacer = pacer.as_ref();
        let corpus_ref = &corpus.products;
        std::thread::scope(|scope| {
            for mut transport in transports.drain(..) {
                scope.spawn(move || loop {
                    let next = queue.lock().expect("queue lock").pop_front();
                    let Some(i) = next else { break };
                    let prompt = prompts[i].as_deref().expect("queued jobs have prompts");
                    let (outcome, retries) = run_request(
                        transport.as_mut(),
                        cfg,
                        pacer,
                        &corpus_ref[i].product_id,
                        kind,
                        prompt,
                    );
                    results.lock().expect("results lock").push((i, outcome, retries));
                });
            }
        });
    }
    let mut by_index: Vec<Option<(Result<String, String>, usize)>> = (0..n).map(|_| None).collect();
    for (i, outcome, retries) in results.into_inner().expect("results lock") {
        by_index[i] = Some((outcome, retries));
    }

    // Assembly phase: corpus order, single store writer.
    let mut records = Vec::new();
    let mut extended_products = Vec::new();
    let mut annotated = 0usize;
    let mut failed = 0usize;
    for (i, p) in corpus.products.iter().enumerate() {
        if done.contains(p.product_id.as_str()) {
            let stored = existing
                .iter()
                .find(|r| {
                    r.kind == kind
                        && r.product_id == p.product_id
                        && matches!(r.status, AnnotationStatus::Ok)
                })
                .expect("membership checked");
            let mut annotated_product = p.clone();
            annotated_product.gold_summaries =
                Some(vec![stored.summary.clone().expect("ok record has summary")]);
            extended_products.push(annotated_product);
            continue;
        }
        if let Some(rec) = prepared[i].take() {
            failed += 1;
            append_record(store_path, &rec)?;
            records.push(rec);
            continue;
        }
        let (outcome, retries_used) = by_index[i].take().expect("every queued job completed");
        let prompt = prompts[i].take().expect("queued jobs have prompts");
        let rec = match outcome {
            Ok(raw) => {
                annotated += 1;
                let summary = normalize_whitespace(&raw);
                let mut annotated_product = p.clone();
                annotated_product.gold_summaries = Some(vec![summary.clone()]);
                extended_products.push(annotated_product);
                AnnotationRecord {
                    product_id: p.product_id.clone(),
                    kind,
                    prompt,
                    raw_response: Some(raw),
                    summary: Some(summary),
                    status: AnnotationStatus::Ok,
                    retries_used,
                }
            }
            Err(error) => {
                failed += 1;
                AnnotationRecord {
                    product_id: p.product_id.clone(),
                    kind,
                    prompt,
                    raw_response: None,
                    summary: None,
                    status: AnnotationStatus::Failed { error },
                    retries_used,
                }
            }
        };
        append_record(store_path, &rec)?;
        records.push(rec);
    }

    let mut provenance = corpus.provenance.clone();
    provenance.insert("annotation_kind".to_string(), kind.to_string());
    provenance.insert("annotation_endpoint".to_string(), cfg.endpoint.clone());
    Ok(AnnotationRun {
        extended: Corpus {
            products: extended_products,
            split: corpus.split,
            provenance,
        },
        records,
        annotated,
        skipped_existing,
        failed,
    })
}

/// Factory handing each worker its own transport instance.
pub type TransportFactory =
    Box<dyn Fn() -> Result<Box<dyn AnnotationTransport>, AnnotateError> + Sync>;

/// Builds the factory for the configured transport kind.
pub fn make_transport_factory(
    cfg: &AnnotationClientConfig,
) -> Result<TransportFactory, AnnotateError> {
    match cfg.transport {
        TransportKind::Stub => {
            let dir = cfg.fixture_dir.clone().ok_or(AnnotateError::StubWithoutFixtures)?;
            Ok(Box::new(move || {
                Ok(Box::new(StubTransport { dir: dir.clone() }) as Box<dyn AnnotationTransport>)
            }))
        }
        TransportKind::Live => {
            let t = CommandAnnotationTransport::from_env().ok_or(AnnotateError::LiveWithoutBridge)?;
            let command = t.command;
            Ok(Box::new(move || {
                Ok(Box::new(CommandAnnotationTransport {
                    command: command.clone(),
                }) as Box<dyn AnnotationTransport>)
            }))
        }
    }
}
