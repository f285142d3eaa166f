//! Product data model and line-delimited corpus ingestion.
//!
//! A corpus file holds one product per line as a JSON record:
//!
//! ```json
//! {"product_id":"p1","domain":"electronics",
//!  "reviews":[{"review_id":"r1","text":"Great grip.","rating":5}],
//!  "description":"Aluminum hand grip.",
//!  "qa":[{"question":"Is it heavy?","answer":"A little."}],
//!  "summaries":["Solid grip, slightly heavy."]}
//! ```
//!
//! `description` and `summaries` may be `null` or omitted. All texts are
//! whitespace-normalized at load time (runs of whitespace collapse to one
//! space, ends stripped); no lowercasing or punctuation stripping happens
//! here — the tokenizer and metric normalization own those decisions.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sdc::SdcHyperparams;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus record is not valid JSON at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// One customer review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
}

/// One question with its answer. `concatenated` is always
/// `question ++ " " ++ answer`.
#[derive(Debug, Clone, PartialEq)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub concatenated: String,
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        let question = question.into();
        let answer = answer.into();
        let concatenated = format!("{question} {answer}");
        QAPair {
            question,
            answer,
            concatenated,
        }
    }
}

// On disk a QA pair is just {question, answer}; `concatenated` is derived.
#[derive(Serialize, Deserialize)]
struct QAPairRecord {
    question: String,
    answer: String,
}

impl Serialize for QAPair {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        QAPairRecord {
            question: self.question.clone(),
            answer: self.answer.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for QAPair {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = QAPairRecord::deserialize(deserializer)?;
        Ok(QAPair::new(rec.question, rec.answer))
    }
}

/// One product with its reviews and additional sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    #[serde(default)]
    pub domain: String,
    pub reviews: Vec<Review>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, rename = "qa")]
    pub qa_pairs: Vec<QAPair>,
    #[serde(
        default,
        rename = "summaries",
        skip_serializing_if = "Option::is_none"
    )]
    pub gold_summaries: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train|dev|test")),
        }
    }
}

/// An immutable set of products for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub products: Vec<Product>,
    pub split: Split,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Per-line problem encountered while loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Summary of one load, written beside the input as a JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub path: String,
    pub products_loaded: usize,
    pub line_errors: Vec<LineError>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn write_beside(&self, input: &Path) -> Result<PathBuf, CorpusError> {
        let mut name = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_string());
        name.push_str(".load_report.json");
        let path = input.with_file_name(name);
        self.write_to(&path)?;
        Ok(path)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CorpusError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Collapses runs of whitespace to a single space and strips the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_product(mut p: Product) -> Product {
    for r in &mut p.reviews {
        r.text = normalize_whitespace(&r.text);
    }
    p.description = p.description.map(|d| normalize_whitespace(&d));
    p.qa_pairs = p
        .qa_pairs
        .into_iter()
        .map(|qa| QAPair::new(normalize_whitespace(&qa.question), normalize_whitespace(&qa.answer)))
        .collect();
    p.gold_summaries = p
        .gold_summaries
        .map(|gs| gs.iter().map(|s| normalize_whitespace(s)).collect());
    p
}

/// Loads a line-delimited corpus. Malformed lines are collected in the
/// report rather than aborting the load; a missing file is fatal.
pub fn load_corpus(path: &Path, split: Split) -> Result<(Corpus, LoadReport), CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut products = Vec::new();
    let mut line_errors = Vec::new();
    let mut warnings = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Product>(&line) {
            Ok(p) => products.push(normalize_product(p)),
            Err(e) => line_errors.push(LineError {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }

    if products.is_empty() {
        warnings.push("corpus contains no products".to_string());
    }

    let report = LoadReport {
        path: path.display().to_string(),
        products_loaded: products.len(),
        line_errors,
        warnings,
    };
    let mut provenance = BTreeMap::new();
    provenance.insert("source".to_string(), path.display().to_string());
    Ok((
        Corpus {
            products,
            split,
            provenance,
        },
        report,
    ))
}

/// Writes one product per line. Inverse of [`load_corpus`] for corpora whose
/// texts are already whitespace-normalized.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    for p in &corpus.products {
        let line = serde_json::to_string(p).expect("product serializes");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// A broken invariant found by [`validate_product`]. Violations are data,
/// not failures; an empty list means the product is usable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyReviews,
    EmptyReviewText { review_id: String },
    DuplicateReviewId { review_id: String },
    EmptyDescription,
    EmptyQaField { index: usize },
    QaConcatenationMismatch { index: usize },
    QaOverCap { have: usize, cap: usize },
    InsufficientReviewsForSdc { have: usize, need: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyReviews => write!(f, "product has no reviews"),
            Violation::EmptyReviewText { review_id } => {
                write!(f, "review {review_id} has empty text")
            }
            Violation::DuplicateReviewId { review_id } => {
                write!(f, "review id {review_id} appears more than once")
            }
            Violation::EmptyDescription => {
                write!(f, "description is the empty string; use an absent value instead")
            }
            Violation::EmptyQaField { index } => {
                write!(f, "qa pair {index} has an empty question or answer")
            }
            Violation::QaConcatenationMismatch { index } => {
                write!(f, "qa pair {index} concatenation does not match question + space + answer")
            }
            Violation::QaOverCap { have, cap } => {
                write!(f, "{have} qa pairs exceed the cap of {cap}")
            }
            Violation::InsufficientReviewsForSdc { have, need } => {
                write!(f, "{have} reviews, but pseudo-summary selection needs at least {need}")
            }
        }
    }
}

/// Checks every type invariant plus SDC eligibility (`|reviews| >= k + 1`:
/// one pseudo-summary and k inputs). Pure: the same product and config
/// always yield the same list.
pub fn validate_product(p: &Product, cfg: &SdcHyperparams) -> Vec<Violation> {
    let mut out = Vec::new();

    if p.reviews.is_empty() {
        out.push(Violation::EmptyReviews);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &p.reviews {
        if normalize_whitespace(&r.text).is_empty() {
            out.push(Violation::EmptyReviewText {
                review_id: r.review_id.clone(),
            });
        }
        if !seen.insert(r.review_id.as_str()) {
            out.push(Violation::DuplicateReviewId {
                review_id: r.review_id.clone(),
            });
        }
    }
    if matches!(p.description.as_deref(), Some("")) {
        out.push(Violation::EmptyDescription);
    }
    for (index, qa) in p.qa_pairs.iter().enumerate() {
        if qa.question.is_empty() || qa.answer.is_empty() {
            out.push(Violation::EmptyQaField { index });
        }
        if qa.concatenated != format!("{} {}", qa.question, qa.answer) {
            out.push(Violation::QaConcatenationMismatch { index });
        }
    }
    if p.qa_pairs.len() > cfg.m_cap {
        out.push(Violation::QaOverCap {
            have: p.qa_pairs.len(),
            cap: cfg.m_cap,
        });
    }
    if !p.reviews.is_empty() && p.reviews.len() < cfg.k + 1 {
        out.push(Violation::InsufficientReviewsForSdc {
            have: p.reviews.len(),
            need: cfg.k + 1,
        });
    }
    out
}

/// Keeps the first `min(|qa_pairs|, m_cap)` pairs in original order.
/// Idempotent; every other field is unchanged.
pub fn truncate_qa(p: &Product, m_cap: usize) -> Product {
    assert!(m_cap >= 1, "m_cap must be at least 1");
    let mut out = p.clone();
    out.qa_pairs.truncate(m_cap);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn product(id: &str, review_texts: &[&str]) -> Product {
        Product {
            product_id: id.to_string(),
            domain: "test".to_string(),
            reviews: review_texts
                .iter()
                .enumerate()
                .map(|(i, t)| Review {
                    review_id: format!("{id}-r{i}"),
                    text: t.to_string(),
                    rating: None,
                })
                .collect(),
            description: None,
            qa_pairs: Vec::new(),
            gold_summaries: None,
        }
    }

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("corpus.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn load_preserves_order_of_wellformed_products() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = serde_json::to_string(&product("a", &["good"])).unwrap();
        let p2 = serde_json::to_string(&product("b", &["bad"])).unwrap();
        let path = write_lines(dir.path(), &[&p1, &p2]);
        let (corpus, report) = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(corpus.products.len(), 2);
        assert_eq!(corpus.products[0].product_id, "a");
        assert_eq!(corpus.products[1].product_id, "b");
        assert!(report.line_errors.is_empty());
    }

    #[test]
    fn empty_file_warns_and_yields_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(dir.path(), &[]);
        let (corpus, report) = load_corpus(&path, Split::Test).unwrap();
        assert!(corpus.products.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn malformed_line_is_recorded_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = serde_json::to_string(&product("a", &["x"])).unwrap();
        let p3 = serde_json::to_string(&product("c", &["y"])).unwrap();
        let path = write_lines(dir.path(), &[&p1, "{not json", &p3]);
        let (corpus, report) = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(corpus.products.len(), 2);
        assert_eq!(report.line_errors.len(), 1);
        assert_eq!(report.line_errors[0].line, 2);
    }

    #[test]
    fn missing_file_is_fatal() {
        let err = load_corpus(Path::new("/definitely/not/here.jsonl"), Split::Train);
        assert!(matches!(err, Err(CorpusError::Io { .. })));
    }

    #[test]
    fn whitespace_is_normalized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"product_id":"p","domain":"d","reviews":[{"review_id":"r","text":"  a   b\tc  "}],"qa":[{"question":" q ","answer":" a  b "}]}"#;
        let path = write_lines(dir.path(), &[line]);
        let (corpus, _) = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(corpus.products[0].reviews[0].text, "a b c");
        assert_eq!(corpus.products[0].qa_pairs[0].concatenated, "q a b");
    }

    #[test]
    fn validate_accepts_k_plus_one_reviews() {
        let cfg = SdcHyperparams {
            k: 8,
            ..SdcHyperparams::default()
        };
        let texts: Vec<String> = (0..9).map(|i| format!("review {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let p = product("p", &refs);
        assert!(validate_product(&p, &cfg).is_empty());
    }

    #[test]
    fn validate_flags_empty_reviews() {
        let p = product("p", &[]);
        let violations = validate_product(&p, &SdcHyperparams::default());
        assert_eq!(violations, vec![Violation::EmptyReviews]);
    }

    #[test]
    fn validate_flags_exactly_k_reviews() {
        let cfg = SdcHyperparams {
            k: 8,
            ..SdcHyperparams::default()
        };
        let texts: Vec<String> = (0..8).map(|i| format!("review {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let p = product("p", &refs);
        assert_eq!(
            validate_product(&p, &cfg),
            vec![Violation::InsufficientReviewsForSdc { have: 8, need: 9 }]
        );
    }

    #[test]
    fn truncate_keeps_first_pairs() {
        let mut p = product("p", &["a"]);
        p.qa_pairs = (0..15)
            .map(|i| QAPair::new(format!("q{i}"), format!("a{i}")))
            .collect();
        let t = truncate_qa(&p, 10);
        assert_eq!(t.qa_pairs.len(), 10);
        assert_eq!(t.qa_pairs[9].question, "q9");
        assert_eq!(t.reviews, p.reviews);

        let small = truncate_qa(&truncate_qa(&p, 3), 10);
        assert_eq!(small.qa_pairs.len(), 3);
    }

    #[test]
    fn truncate_empty_qa_is_noop() {
        let p = product("p", &["a"]);
        assert_eq!(truncate_qa(&p, 10).qa_pairs.len(), 0);
    }

    prop_compose! {
        fn arb_text()(words in proptest::collection::vec("[a-z]{1,8}", 1..6)) -> String {
            words.join(" ")
        }
    }

    prop_compose! {
        fn arb_product(id: usize)(
            texts in proptest::collection::vec(arb_text(), 1..6),
            desc in proptest::option::of(arb_text()),
            qa in proptest::collection::vec((arb_text(), arb_text()), 0..4),
            golds in proptest::option::of(proptest::collection::vec(arb_text(), 1..3)),
        ) -> Product {
            Product {
                product_id: format!("p{id}"),
                domain: "d".to_string(),
                reviews: texts.iter().enumerate().map(|(i, t)| Review {
                    review_id: format!("p{id}-r{i}"),
                    text: t.clone(),
                    rating: Some((i % 5 + 1) as u8),
                }).collect(),
                description: desc,
                qa_pairs: qa.into_iter().map(|(q, a)| QAPair::new(q, a)).collect(),
                gold_summaries: golds,
            }
        }
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(products in proptest::collection::vec(arb_product(0), 1..5)) {
            let mut products = products;
            for (i, p) in products.iter_mut().enumerate() {
                p.product_id = format!("p{i}");
            }
            let corpus = Corpus {
                products,
                split: Split::Train,
                provenance: BTreeMap::new(),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("round.jsonl");
            write_corpus(&corpus, &path).unwrap();
            let (loaded, report) = load_corpus(&path, Split::Train).unwrap();
            prop_assert!(report.line_errors.is_empty());
            prop_assert_eq!(loaded.products, corpus.products);
        }

        #[test]
        fn validate_is_pure(texts in proptest::collection::vec(arb_text(), 0..6)) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let p = product("p", &refs);
            let cfg = SdcHyperparams::default();
            prop_assert_eq!(validate_product(&p, &cfg), validate_product(&p, &cfg));
        }

        #[test]
        fn truncate_is_idempotent(n in 0usize..20, cap in 1usize..12) {
            let mut p = product("p", &["a"]);
            p.qa_pairs = (0..n).map(|i| QAPair::new(format!("q{i}"), format!("a{i}"))).collect();
            let once = truncate_qa(&p, cap);
            let twice = truncate_qa(&once, cap);
            prop_assert_eq!(once, twice);
        }
    }
}
