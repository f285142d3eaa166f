//! Quantitative evaluation: ROUGE metrics, significance and agreement
//! statistics, and the corpus-level harnesses (multi-reference scoring,
//! source ablation, information-capture quantification).

mod harness;
mod rouge;
mod stats;

pub use harness::{
    corpus_rouge, run_ablation, source_overlap, AblationRow, AblationTable, EvalReport, MultiRef,
    ProductScore, SourceConfig, SourceOverlapReport,
};
pub use rouge::{normalize_tokens, rouge, rouge_l, rouge_n, RougeScore, RougeVariant};
pub use stats::{
    best_worst_scores, fleiss_kappa, paired_t_test, BwsJudgment, BwsReport, KappaOutcome,
    RatingsMatrix, TTestOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("paired lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} paired scores, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("ratings matrix is empty")]
    EmptyRatings,
    #[error("item {item} has {got} ratings, expected {want} (one per rater)")]
    RaggedRatings { item: usize, got: usize, want: usize },
    #[error("need at least 2 raters, got {got}")]
    TooFewRaters { got: usize },
    #[error("judgment {index}: {message}")]
    BadJudgment { index: usize, message: String },
    #[error("no judgments")]
    NoJudgments,
    #[error(transparent)]
    Generation(#[from] crate::generate::GenError),
}
