//! Sentence embedding providers and cosine similarity.
//!
//! Three providers sit behind one config:
//!
//! * `hashed-ngram-fallback` — a deterministic character n-gram feature
//!   hasher. No weights, no network; the whole pipeline and its tests run on
//!   it. Rows are L2-normalized.
//! * `precomputed-file` — looks vectors up in a line-delimited file of
//!   `{"key": <text>, "vector": [...]}` records keyed by the exact text.
//! * `external-checkpoint` — bridges to an external sentence encoder through
//!   the command named by `OPSUM_EMBED_CMD` (texts as JSON lines on stdin,
//!   vectors as JSON lines on stdout), retrying transient failures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

/// Environment variable naming the bridge command for the
/// external-checkpoint provider.
pub const EMBED_CMD_ENV: &str = "OPSUM_EMBED_CMD";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    EmptyInput,
    #[error("precomputed embedding file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("precomputed embedding file {path} line {line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no stored vector for key {key:?}")]
    UnknownKey { key: String },
    #[error("stored vector for key {key:?} has dimension {got}, expected {want}")]
    DimensionMismatchStored { key: String, got: usize, want: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("row {key:?} has zero norm; cosine similarity is undefined")]
    ZeroNormRow { key: String },
    #[error(
        "external embedding provider {checkpoint:?} unavailable after {retries} retries: {message}"
    )]
    Transport {
        checkpoint: String,
        retries: usize,
        message: String,
    },
}

/// Which backend produces vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    ExternalCheckpoint,
    PrecomputedFile,
    HashedNgramFallback,
}

impl ProviderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::ExternalCheckpoint => "external-checkpoint",
            ProviderKind::PrecomputedFile => "precomputed-file",
            ProviderKind::HashedNgramFallback => "hashed-ngram-fallback",
        }
    }
}

/// Embedding backend selection. For `precomputed-file`, `checkpoint_name`
/// holds the path of the vectors file; for `external-checkpoint` it names
/// the remote model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub provider_kind: ProviderKind,
    pub checkpoint_name: String,
    pub dimension: usize,
    /// Transport retry budget for the external provider.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    2
}

impl EmbeddingProviderConfig {
    pub fn fallback(dimension: usize) -> Self {
        EmbeddingProviderConfig {
            provider_kind: ProviderKind::HashedNgramFallback,
            checkpoint_name: String::new(),
            dimension,
            max_retries: default_retries(),
        }
    }

    pub fn precomputed(path: &Path, dimension: usize) -> Self {
        EmbeddingProviderConfig {
            provider_kind: ProviderKind::PrecomputedFile,
            checkpoint_name: path.display().to_string(),
            dimension,
            max_retries: default_retries(),
        }
    }

    pub fn external(checkpoint_name: impl Into<String>, dimension: usize) -> Self {
        EmbeddingProviderConfig {
            provider_kind: ProviderKind::ExternalCheckpoint,
            checkpoint_name: checkpoint_name.into(),
            dimension,
            max_retries: default_retries(),
        }
    }
}

/// Dense row-per-text embeddings. `row_keys[i]` is the text that produced
/// row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dimension: usize,
    values: Vec<f64>,
    row_keys: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, row_keys: Vec<String>) -> Self {
        assert_eq!(rows.len(), row_keys.len(), "one key per row");
        let dimension = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dimension);
        for r in &rows {
            assert_eq!(r.len(), dimension, "ragged embedding rows");
            values.extend_from_slice(r);
        }
        EmbeddingMatrix {
            rows: rows.len(),
            dimension,
            values,
            row_keys,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn row_key(&self, i: usize) -> &str {
        &self.row_keys[i]
    }

    /// Single-row view as its own matrix (used for per-QA score vectors).
    pub fn single(&self, i: usize) -> EmbeddingMatrix {
        EmbeddingMatrix {
            rows: 1,
            dimension: self.dimension,
            values: self.row(i).to_vec(),
            row_keys: vec![self.row_keys[i].clone()],
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic hashed character n-gram embedding (n in {2, 3}) with signed
/// buckets, L2-normalized. Boundary sentinels make even one-character texts
/// produce a nonzero vector.
fn fallback_embedding(text: &str, dimension: usize) -> Vec<f64> {
    let mut v = vec![0.0f64; dimension];
    let chars: Vec<char> = std::iter::once('\u{2}')
        .chain(text.chars())
        .chain(std::iter::once('\u{3}'))
        .collect();
    let mut buf = String::new();
    for n in [2usize, 3] {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window.iter());
            let h = fnv1a(buf.as_bytes(), n as u64);
            let bucket = (h % dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

#[derive(Deserialize)]
struct StoredVector {
    key: String,
    vector: Vec<f64>,
}

/// One record of the precomputed-embedding file format.
#[derive(Serialize)]
pub struct VectorRecord<'a> {
    pub key: &'a str,
    pub vector: &'a [f64],
}

fn load_precomputed(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, EmbedError> {
    let body = std::fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map = BTreeMap::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoredVector =
            serde_json::from_str(line).map_err(|e| EmbedError::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        map.insert(rec.key, rec.vector);
    }
    Ok(map)
}

/// Transport used by the external-checkpoint provider. Split out so tests
/// can inject failures without a live service.
pub trait EmbedTransport {
    fn embed_batch(&mut self, texts: &[String], dimension: usize) -> Result<Vec<Vec<f64>>, String>;
}

/// Pipes texts through the command named by [`EMBED_CMD_ENV`]: one JSON
/// string per input line, one JSON array of numbers per output line.
pub struct CommandTransport {
    pub command: String,
}

impl CommandTransport {
    pub fn from_env() -> Option<Self> {
        std::env::var(EMBED_CMD_ENV)
            .ok()
            .filter(|c| !c.is_empty())
            .map(|command| CommandTransport { command })
    }
}

impl EmbedTransport for CommandTransport {
    fn embed_batch(&mut self, texts: &[String], dimension: usize) -> Result<Vec<Vec<f64>>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn failed: {e}"))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        for t in texts {
            let line = serde_json::to_string(t).expect("string serializes");
            writeln!(stdin, "{line}").map_err(|e| format!("write failed: {e}"))?;
        }
        drop(stdin);
        let out = child
            .wait_with_output()
            .map_err(|e| format!("wait failed: {e}"))?;
        if !out.status.success() {
            return Err(format!("command exited with {}", out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let mut rows = Vec::with_capacity(texts.len());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Vec<f64> =
                serde_json::from_str(line).map_err(|e| format!("bad vector line: {e}"))?;
            if v.len() != dimension {
                return Err(format!("vector has dimension {}, expected {dimension}", v.len()));
            }
            rows.push(v);
        }
        if rows.len() != texts.len() {
            return Err(format!("got {} vectors for {} texts", rows.len(), texts.len()));
        }
        Ok(rows)
    }
}

/// Embeds texts via a transport, retrying each batch up to
/// `cfg.max_retries` additional times.
pub fn embed_texts_with_transport(
    cfg: &EmbeddingProviderConfig,
    texts: &[String],
    transport: &mut dyn EmbedTransport,
) -> Result<EmbeddingMatrix, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let mut attempt = 0;
    loop {
        match transport.embed_batch(texts, cfg.dimension) {
            Ok(rows) => {
                return Ok(EmbeddingMatrix::from_rows(rows, texts.to_vec()));
            }
            Err(message) => {
                if attempt >= cfg.max_retries {
                    return Err(EmbedError::Transport {
                        checkpoint: cfg.checkpoint_name.clone(),
                        retries: attempt,
                        message,
                    });
                }
                attempt += 1;
            }
        }
    }
}

/// Produces one embedding row per input text, in input order.
/// Deterministic for a fixed config and inputs.
pub fn embed_texts(
    cfg: &EmbeddingProviderConfig,
    texts: &[String],
) -> Result<EmbeddingMatrix, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    match cfg.provider_kind {
        ProviderKind::HashedNgramFallback => {
            let rows = texts
                .iter()
                .map(|t| fallback_embedding(t, cfg.dimension))
                .collect();
            Ok(EmbeddingMatrix::from_rows(rows, texts.to_vec()))
        }
        ProviderKind::PrecomputedFile => {
            let stored = load_precomputed(Path::new(&cfg.checkpoint_name))?;
            let mut rows = Vec::with_capacity(texts.len());
            for t in texts {
                let v = stored.get(t).ok_or_else(|| EmbedError::UnknownKey {
                    key: t.clone(),
                })?;
                if v.len() != cfg.dimension {
                    return Err(EmbedError::DimensionMismatchStored {
                        key: t.clone(),
                        got: v.len(),
                        want: cfg.dimension,
                    });
                }
                rows.push(v.clone());
            }
            Ok(EmbeddingMatrix::from_rows(rows, texts.to_vec()))
        }
        ProviderKind::ExternalCheckpoint => {
            let mut transport =
                CommandTransport::from_env().ok_or_else(|| EmbedError::Transport {
                    checkpoint: cfg.checkpoint_name.clone(),
                    retries: 0,
                    message: format!("{EMBED_CMD_ENV} is not set; no bridge to the external encoder"),
                })?;
            embed_texts_with_transport(cfg, texts, &mut transport)
        }
    }
}

/// Cosine similarity of every row of `a` against every row of `b`;
/// entry `[i][j]` is `<a_i, b_j> / (|a_i| |b_j|)`.
pub fn cosine_sim(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let norm = |m: &EmbeddingMatrix, i: usize| -> Result<f64, EmbedError> {
        let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            Err(EmbedError::ZeroNormRow {
                key: m.row_key(i).to_string(),
            })
        } else {
            Ok(n)
        }
    };
    let norms_a: Vec<f64> = (0..a.rows()).map(|i| norm(a, i)).collect::<Result<_, _>>()?;
    let norms_b: Vec<f64> = (0..b.rows()).map(|j| norm(b, j)).collect::<Result<_, _>>()?;

    let mut out = vec![vec![0.0; b.rows()]; a.rows()];
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out[i][j] = dot / (norms_a[i] * norms_b[j]);
        }
    }
    Ok(out)
}

/// On-disk vector cache keyed by (provider kind, checkpoint, content hash).
/// One file per provider/checkpoint pair; rewrites are atomic
/// (write-temp-then-rename).
pub struct EmbeddingCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    hash: String,
    vector: Vec<f64>,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EmbeddingCache { dir: dir.into() }
    }

    fn file_for(&self, cfg: &EmbeddingProviderConfig) -> PathBuf {
        let safe: String = cfg
            .checkpoint_name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        self.dir
            .join(format!("{}-{}-d{}.jsonl", cfg.provider_kind.as_str(), safe, cfg.dimension))
    }

    pub fn content_hash(text: &str) -> String {
        format!("{:016x}", fnv1a(text.as_bytes(), 0))
    }

    fn load(&self, cfg: &EmbeddingProviderConfig) -> BTreeMap<String, Vec<f64>> {
        let path = self.file_for(cfg);
        let mut map = BTreeMap::new();
        if let Ok(body) = std::fs::read_to_string(&path) {
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(rec) = serde_json::from_str::<CacheRecord>(line) {
                    map.insert(rec.hash, rec.vector);
                }
            }
        }
        map
    }

    fn store(
        &self,
        cfg: &EmbeddingProviderConfig,
        map: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), EmbedError> {
        std::fs::create_dir_all(&self.dir).map_err(|source| EmbedError::Io {
            path: self.dir.clone(),
            source,
        })?;
        let path = self.file_for(cfg);
        let tmp = path.with_extension("jsonl.tmp");
        let mut body = String::new();
        for (hash, vector) in map {
            body.push_str(
                &serde_json::to_string(&CacheRecord {
                    hash: hash.clone(),
                    vector: vector.clone(),
                })
                .expect("cache record serializes"),
            );
            body.push('\n');
        }
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| EmbedError::Io { path: p.clone(), source }
        };
        std::fs::write(&tmp, body).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    /// Embeds texts, serving repeats from the cache and persisting new
    /// vectors. Row order always matches the input order.
    pub fn embed_cached(
        &self,
        cfg: &EmbeddingProviderConfig,
        texts: &[String],
    ) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut map = self.load(cfg);
        let missing: Vec<String> = {
            let mut seen = std::collections::BTreeSet::new();
            texts
                .iter()
                .filter(|t| !map.contains_key(&Self::content_hash(t)) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = embed_texts(cfg, &missing)?;
            for i in 0..fresh.rows() {
                map.insert(Self::content_hash(fresh.row_key(i)), fresh.row(i).to_vec());
            }
            self.store(cfg, &map)?;
        }
        let rows: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| map[&Self::content_hash(t)].clone())
            .collect();
        Ok(EmbeddingMatrix::from_rows(rows, texts.to_vec()))
    }
}
