//! Corpus-level evaluation: multi-reference ROUGE, the source-ablation
//! table, and information-capture quantification against each source.

use serde::{Deserialize, Serialize};

use super::rouge::{rouge, rouge_n, RougeScore, RougeVariant};
use super::EvalError;
use crate::corpus::Product;
use crate::generate::{summarize_product, GenerationConfig, SummaryOutput};
use crate::model::SummaryModel;
use crate::tokenizer::Tokenizer;

/// How per-product scores aggregate over multiple references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiRef {
    /// Best reference wins (default).
    Max,
    /// Mean over references.
    Mean,
}

impl std::str::FromStr for MultiRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(MultiRef::Max),
            "mean" => Ok(MultiRef::Mean),
            other => Err(format!("unknown multi-ref mode {other:?}, expected max|mean")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductScore {
    pub product_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub references: usize,
}

/// Corpus evaluation result for one metric variant. The corpus mean is the
/// arithmetic mean of per-product scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: RougeVariant,
    pub multi_ref: MultiRef,
    pub per_product: Vec<ProductScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    /// Products that had a prediction but no gold summary.
    pub skipped: Vec<String>,
}

fn combine_refs(cand: &str, refs: &[String], variant: RougeVariant, mode: MultiRef) -> RougeScore {
    let scores: Vec<RougeScore> = refs.iter().map(|r| rouge(cand, r, variant)).collect();
    match mode {
        MultiRef::Max => scores
            .iter()
            .cloned()
            .max_by(|a, b| a.f1.partial_cmp(&b.f1).expect("finite scores"))
            .expect("at least one reference"),
        MultiRef::Mean => {
            let n = scores.len() as f64;
            RougeScore {
                precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
                variant,
            }
        }
    }
}

/// Scores predictions against the gold summaries of their products.
/// Products without golds are skipped and listed.
pub fn corpus_rouge(
    predictions: &[SummaryOutput],
    products: &[Product],
    variant: RougeVariant,
    multi_ref: MultiRef,
) -> EvalReport {
    let mut per_product = Vec::new();
    let mut skipped = Vec::new();
    for pred in predictions {
        let product = products.iter().find(|p| p.product_id == pred.product_id);
        let refs = product.and_then(|p| p.gold_summaries.as_ref()).filter(|g| !g.is_empty());
        match refs {
            None => skipped.push(pred.product_id.clone()),
            Some(refs) => {
                let score = combine_refs(&pred.summary, refs, variant, multi_ref);
                per_product.push(ProductScore {
                    product_id: pred.product_id.clone(),
                    precision: score.precision,
                    recall: score.recall,
                    f1: score.f1,
                    references: refs.len(),
                });
            }
        }
    }
    let n = per_product.len().max(1) as f64;
    EvalReport {
        variant,
        multi_ref,
        mean_precision: per_product.iter().map(|s| s.precision).sum::<f64>() / n,
        mean_recall: per_product.iter().map(|s| s.recall).sum::<f64>() / n,
        mean_f1: per_product.iter().map(|s| s.f1).sum::<f64>() / n,
        per_product,
        skipped,
    }
}

/// The four source configurations of the ablation: which additional
/// sources stay visible to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceConfig {
    ReviewsDescriptionQa,
    ReviewsDescription,
    ReviewsQa,
    Reviews,
}

impl SourceConfig {
    pub const ALL: [SourceConfig; 4] = [
        SourceConfig::ReviewsDescriptionQa,
        SourceConfig::ReviewsDescription,
        SourceConfig::ReviewsQa,
        SourceConfig::Reviews,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SourceConfig::ReviewsDescriptionQa => "reviews+description+qa",
            SourceConfig::ReviewsDescription => "reviews+description",
            SourceConfig::ReviewsQa => "reviews+qa",
            SourceConfig::Reviews => "reviews",
        }
    }

    /// Masks the hidden sources with the absent-source convention.
    pub fn mask_product(&self, p: &Product) -> Product {
        let mut out = p.clone();
        match self {
            SourceConfig::ReviewsDescriptionQa => {}
            SourceConfig::ReviewsDescription => out.qa_pairs.clear(),
            SourceConfig::ReviewsQa => out.description = None,
            SourceConfig::Reviews => {
                out.description = None;
                out.qa_pairs.clear();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: SourceConfig,
    pub label: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub multi_ref: MultiRef,
}

/// Generates summaries under each of the four source configurations and
/// scores them. Mean F1 values are reported per metric, in [0, 1].
pub fn run_ablation(
    model: &SummaryModel,
    tok: &Tokenizer,
    products: &[Product],
    gen_cfg: &GenerationConfig,
    multi_ref: MultiRef,
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::with_capacity(SourceConfig::ALL.len());
    for config in SourceConfig::ALL {
        let masked: Vec<Product> = products.iter().map(|p| config.mask_product(p)).collect();
        let mut predictions = Vec::with_capacity(masked.len());
        for p in &masked {
            predictions.push(summarize_product(model, tok, p, gen_cfg)?);
        }
        let r1 = corpus_rouge(&predictions, products, RougeVariant::R1, multi_ref);
        let r2 = corpus_rouge(&predictions, products, RougeVariant::R2, multi_ref);
        let rl = corpus_rouge(&predictions, products, RougeVariant::RL, multi_ref);
        rows.push(AblationRow {
            config,
            label: config.label().to_string(),
            r1: r1.mean_f1,
            r2: r2.mean_f1,
            rl: rl.mean_f1,
        });
    }
    Ok(AblationTable { rows, multi_ref })
}

/// Mean ROUGE-1 of summaries against each source, over the products where
/// that source is present. Absent sources are excluded from their mean and
/// counted, never scored as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceOverlapReport {
    pub reviews_r1: f64,
    pub reviews_count: usize,
    pub description_r1: Option<f64>,
    pub description_count: usize,
    pub qa_r1: Option<f64>,
    pub qa_count: usize,
}

pub fn source_overlap(predictions: &[SummaryOutput], products: &[Product]) -> SourceOverlapReport {
    let mut reviews = Vec::new();
    let mut descriptions = Vec::new();
    let mut qas = Vec::new();
    for pred in predictions {
        let Some(p) = products.iter().find(|p| p.product_id == pred.product_id) else {
            continue;
        };
        if !p.reviews.is_empty() {
            let joined = p
                .reviews
                .iter()
                .map(|r| r.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            reviews.push(rouge_n(&pred.summary, &joined, 1).f1);
        }
        if let Some(d) = p.description.as_deref().filter(|d| !d.is_empty()) {
            descriptions.push(rouge_n(&pred.summary, d, 1).f1);
        }
        if !p.qa_pairs.is_empty() {
            let joined = p
                .qa_pairs
                .iter()
                .map(|q| q.concatenated.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            qas.push(rouge_n(&pred.summary, &joined, 1).f1);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    SourceOverlapReport {
        reviews_r1: if reviews.is_empty() { 0.0 } else { mean(&reviews) },
        reviews_count: reviews.len(),
        description_r1: (!descriptions.is_empty()).then(|| mean(&descriptions)),
        description_count: descriptions.len(),
        qa_r1: (!qas.is_empty()).then(|| mean(&qas)),
        qa_count: qas.len(),
    }
}
