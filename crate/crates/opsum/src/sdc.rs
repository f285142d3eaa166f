//! Synthetic quadruplet construction.
//!
//! For each product, a pseudo-summary is chosen among the reviews by scoring
//! every review against the product description and question-answers
//! (`ss = lambda1 * ds + lambda2 * qs`), keeping the reviews at or above the
//! configured percentile of `ss`, and pairing each selected pseudo-summary
//! with its k most similar other reviews. The result is one training
//! quadruplet `{input reviews, description, question-answers, pseudo-summary}`
//! per selected review.
//!
//! Tie-breaking is always (score descending, review index ascending) so that
//! output is deterministic. A review's similarity to itself is never a
//! candidate: the similarity matrix carries a zero diagonal and the
//! pseudo-summary is excluded from its own input set by index.

use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_qa, validate_product, Product};
use crate::embed::{cosine_sim, embed_texts, EmbedError, EmbeddingMatrix, EmbeddingProviderConfig};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum SdcError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("need at least 2 reviews to form candidate pairs, got {got}")]
    TooFewReviews { got: usize },
    #[error("need at least k+1 = {need} reviews, got {got}")]
    NotEnoughForK { got: usize, need: usize },
    #[error("review index {index} out of range for {rows} reviews")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("score vectors have mismatched lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("product {product_id} failed validation: {reasons}")]
    InvalidProduct { product_id: String, reasons: String },
    #[error("product {product_id} has neither description nor question-answers; selection would be arbitrary")]
    NoAdditionalSources { product_id: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Knobs of the quadruplet construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdcHyperparams {
    /// Number of input reviews per quadruplet.
    pub k: usize,
    /// Keep reviews whose combined score is at or above this percentile
    /// (nearest-rank, per product), in (0, 100].
    pub percentile: f64,
    /// Weight of the description score.
    pub lambda1: f64,
    /// Weight of the question-answer score.
    pub lambda2: f64,
    /// Maximum question-answer pairs per product.
    pub m_cap: usize,
}

impl Default for SdcHyperparams {
    fn default() -> Self {
        SdcHyperparams {
            k: 8,
            percentile: 85.0,
            lambda1: 0.5,
            lambda2: 0.5,
            m_cap: 10,
        }
    }
}

impl SdcHyperparams {
    pub fn validate(&self) -> Result<(), SdcError> {
        if self.k == 0 {
            return Err(SdcError::InvalidHyperparams("k must be positive".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(SdcError::InvalidHyperparams(format!(
                "percentile must be in (0, 100], got {}",
                self.percentile
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(SdcError::InvalidHyperparams(
                "lambda weights must be non-negative".into(),
            ));
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return Err(SdcError::InvalidHyperparams(
                "lambda1 + lambda2 must be positive".into(),
            ));
        }
        if self.m_cap == 0 {
            return Err(SdcError::InvalidHyperparams("m_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise review cosine similarities with the diagonal forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub review_keys: Vec<String>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// What a score vector measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Review-to-description similarity.
    Ds,
    /// Description absent; all zeros by convention.
    DsAbsent,
    /// Mean review-to-QA similarity.
    Qs,
    /// No question-answers; all zeros by convention.
    QsAbsent,
    /// Combined `lambda1 * ds + lambda2 * qs`.
    Ss,
}

/// Per-review scores (one entry per review, in review order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub kind: ScoreKind,
}

/// One synthetic training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuadruplet {
    pub product_id: String,
    /// The k input review texts, most similar to the pseudo-summary first.
    pub input_reviews: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Concatenated question-answer texts, capped at `m_cap`.
    pub qa: Vec<String>,
    pub pseudo_summary: String,
    /// Combined selection score of the pseudo-summary.
    pub ss_score: f64,
    /// Similarity of each input review to the pseudo-summary, non-increasing.
    pub input_review_sims: Vec<f64>,
    // Provenance: review identities, so exclusion is checkable without
    // comparing texts.
    pub pseudo_summary_id: String,
    pub input_review_ids: Vec<String>,
}

/// Selection strategy. `Full` is the description+QA guided selection;
/// the other two exist for the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdcMode {
    /// Score reviews against description and question-answers.
    Full,
    /// Score each review by the row mean of the review similarity matrix.
    ReviewsOnly,
    /// Draw pseudo-summaries uniformly with a seeded generator.
    Random,
}

impl std::str::FromStr for SdcMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(SdcMode::Full),
            "reviews-only" => Ok(SdcMode::ReviewsOnly),
            "random" => Ok(SdcMode::Random),
            other => Err(format!(
                "unknown mode {other:?}, expected full|reviews-only|random"
            )),
        }
    }
}

impl std::fmt::Display for SdcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SdcMode::Full => write!(f, "full"),
            SdcMode::ReviewsOnly => write!(f, "reviews-only"),
            SdcMode::Random => write!(f, "random"),
        }
    }
}

/// Cosine similarities among reviews with self-comparisons removed
/// (diagonal overwritten to zero).
pub fn review_similarity_matrix(e_r: &EmbeddingMatrix) -> Result<SimilarityMatrix, SdcError> {
    if e_r.rows() < 2 {
        return Err(SdcError::TooFewReviews { got: e_r.rows() });
    }
    let mut values = cosine_sim(e_r, e_r)?;
    for (i, row) in values.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let review_keys = (0..e_r.rows()).map(|i| e_r.row_key(i).to_string()).collect();
    Ok(SimilarityMatrix { values, review_keys })
}

/// Per-review similarity to the description. An absent description yields
/// the all-zeros vector flagged `DsAbsent`.
pub fn description_scores(
    e_r: &EmbeddingMatrix,
    e_d: Option<&EmbeddingMatrix>,
) -> Result<ScoreVector, SdcError> {
    match e_d {
        None => Ok(ScoreVector {
            values: vec![0.0; e_r.rows()],
            kind: ScoreKind::DsAbsent,
        }),
        Some(d) => {
            debug_assert_eq!(d.rows(), 1, "description embeds to one row");
            let sim = cosine_sim(e_r, d)?;
            Ok(ScoreVector {
                values: sim.into_iter().map(|row| row[0]).collect(),
                kind: ScoreKind::Ds,
            })
        }
    }
}

/// Per-review mean similarity over all question-answer pairs. The sum over
/// pairs is divided by the number of pairs, keeping one score per review.
/// No pairs yields the all-zeros vector flagged `QsAbsent`.
pub fn qa_scores(
    e_r: &EmbeddingMatrix,
    e_q_list: &[EmbeddingMatrix],
) -> Result<ScoreVector, SdcError> {
    if e_q_list.is_empty() {
        return Ok(ScoreVector {
            values: vec![0.0; e_r.rows()],
            kind: ScoreKind::QsAbsent,
        });
    }
    let mut acc = vec![0.0f64; e_r.rows()];
    for e_q in e_q_list {
        debug_assert_eq!(e_q.rows(), 1, "each QA embeds to one row");
        let sim = cosine_sim(e_r, e_q)?;
        for (a, row) in acc.iter_mut().zip(sim) {
            *a += row[0];
        }
    }
    let m = e_q_list.len() as f64;
    for a in &mut acc {
        *a /= m;
    }
    Ok(ScoreVector {
        values: acc,
        kind: ScoreKind::Qs,
    })
}

/// `ss_i = lambda1 * ds_i + lambda2 * qs_i`.
pub fn combined_scores(
    ds: &ScoreVector,
    qs: &ScoreVector,
    lambda1: f64,
    lambda2: f64,
) -> Result<ScoreVector, SdcError> {
    if ds.values.len() != qs.values.len() {
        return Err(SdcError::LengthMismatch {
            left: ds.values.len(),
            right: qs.values.len(),
        });
    }
    Ok(ScoreVector {
        values: ds
            .values
            .iter()
            .zip(&qs.values)
            .map(|(d, q)| lambda1 * d + lambda2 * q)
            .collect(),
        kind: ScoreKind::Ss,
    })
}

/// Nearest-rank percentile cutoff: the value at ordinal rank
/// `ceil(p/100 * N)` of the ascending-sorted scores.
fn nearest_rank_cutoff(values: &[f64], percentile: f64) -> f64 {
    let n = values.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    let rank = rank.clamp(1, n);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted[rank - 1]
}

/// Indices of reviews whose combined score is at or above the nearest-rank
/// percentile cutoff, sorted by score descending then index ascending.
/// Never empty: the argmax always clears its own percentile.
pub fn select_pseudo_summaries(ss: &ScoreVector, percentile: f64) -> Vec<usize> {
    let cutoff = nearest_rank_cutoff(&ss.values, percentile);
    let mut picked: Vec<usize> = ss
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= cutoff)
        .map(|(i, _)| i)
        .collect();
    picked.sort_by(|&a, &b| {
        ss.values[b]
            .partial_cmp(&ss.values[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    picked
}

/// The k reviews most similar to review `r_index`, excluding `r_index`
/// itself, sorted by similarity descending then index ascending.
pub fn select_input_reviews(
    sim: &SimilarityMatrix,
    r_index: usize,
    k: usize,
) -> Result<Vec<usize>, SdcError> {
    let n = sim.len();
    if r_index >= n {
        return Err(SdcError::IndexOutOfRange { index: r_index, rows: n });
    }
    if n < k + 1 {
        return Err(SdcError::NotEnoughForK { got: n, need: k + 1 });
    }
    let mut others: Vec<usize> = (0..n).filter(|&j| j != r_index).collect();
    others.sort_by(|&a, &b| {
        sim.values[r_index][b]
            .partial_cmp(&sim.values[r_index][a])
            .expect("finite similarities")
            .then(a.cmp(&b))
    });
    others.truncate(k);
    Ok(others)
}

/// Embeddings of one product's texts: one row per review, one optional row
/// for the description, one single-row matrix per question-answer pair.
#[derive(Debug, Clone)]
pub struct ProductEmbeddings {
    pub reviews: EmbeddingMatrix,
    pub description: Option<EmbeddingMatrix>,
    pub qa: Vec<EmbeddingMatrix>,
}

/// Embeds the product's review texts, description, and concatenated QA
/// texts with the given provider. QA pairs beyond `m_cap` must already be
/// truncated by the caller.
pub fn embed_product(
    cfg: &EmbeddingProviderConfig,
    p: &Product,
) -> Result<ProductEmbeddings, SdcError> {
    let review_texts: Vec<String> = p.reviews.iter().map(|r| r.text.clone()).collect();
    let reviews = embed_texts(cfg, &review_texts)?;
    let description = match &p.description {
        Some(d) if !d.is_empty() => Some(embed_texts(cfg, std::slice::from_ref(d))?),
        _ => None,
    };
    let mut qa = Vec::with_capacity(p.qa_pairs.len());
    for pair in &p.qa_pairs {
        qa.push(embed_texts(cfg, std::slice::from_ref(&pair.concatenated))?);
    }
    Ok(ProductEmbeddings {
        reviews,
        description,
        qa,
    })
}

fn make_quadruplet(
    p: &Product,
    sim: &SimilarityMatrix,
    r_index: usize,
    ss_score: f64,
    hp: &SdcHyperparams,
) -> Result<SyntheticQuadruplet, SdcError> {
    let input_idx = select_input_reviews(sim, r_index, hp.k)?;
    Ok(SyntheticQuadruplet {
        product_id: p.product_id.clone(),
        input_reviews: input_idx.iter().map(|&j| p.reviews[j].text.clone()).collect(),
        description: p.description.clone(),
        qa: p.qa_pairs.iter().map(|q| q.concatenated.clone()).collect(),
        pseudo_summary: p.reviews[r_index].text.clone(),
        ss_score,
        input_review_sims: input_idx.iter().map(|&j| sim.values[r_index][j]).collect(),
        pseudo_summary_id: p.reviews[r_index].review_id.clone(),
        input_review_ids: input_idx
            .iter()
            .map(|&j| p.reviews[j].review_id.clone())
            .collect(),
    })
}

/// Builds the product's quadruplets with the description+QA guided
/// selection. The product must already satisfy [`validate_product`]; it is
/// re-checked here. Products with neither description nor question-answers
/// are reported as [`SdcError::NoAdditionalSources`] so the corpus driver
/// can skip them with a reason.
pub fn build_quadruplets(
    p: &Product,
    emb: &ProductEmbeddings,
    hp: &SdcHyperparams,
) -> Result<Vec<SyntheticQuadruplet>, SdcError> {
    build_quadruplets_mode(p, emb, hp, SdcMode::Full, None)
}

/// [`build_quadruplets`] with an explicit selection mode. `Random` requires
/// a seeded generator.
pub fn build_quadruplets_mode(
    p: &Product,
    emb: &ProductEmbeddings,
    hp: &SdcHyperparams,
    mode: SdcMode,
    rng: Option<&mut Rng>,
) -> Result<Vec<SyntheticQuadruplet>, SdcError> {
    hp.validate()?;
    let violations = validate_product(p, hp);
    if !violations.is_empty() {
        return Err(SdcError::InvalidProduct {
            product_id: p.product_id.clone(),
            reasons: violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    let sim = review_similarity_matrix(&emb.reviews)?;
    let n = sim.len();

    let selected: Vec<(usize, f64)> = match mode {
        SdcMode::Full => {
            if emb.description.is_none() && emb.qa.is_empty() {
                return Err(SdcError::NoAdditionalSources {
                    product_id: p.product_id.clone(),
                });
            }
            let ds = description_scores(&emb.reviews, emb.description.as_ref())?;
            let qs = qa_scores(&emb.reviews, &emb.qa)?;
            let ss = combined_scores(&ds, &qs, hp.lambda1, hp.lambda2)?;
            select_pseudo_summaries(&ss, hp.percentile)
                .into_iter()
                .map(|i| (i, ss.values[i]))
                .collect()
        }
        SdcMode::ReviewsOnly => {
            let ss = ScoreVector {
                values: sim
                    .values
                    .iter()
                    .map(|row| row.iter().sum::<f64>() / n as f64)
                    .collect(),
                kind: ScoreKind::Ss,
            };
            select_pseudo_summaries(&ss, hp.percentile)
                .into_iter()
                .map(|i| (i, ss.values[i]))
                .collect()
        }
        SdcMode::Random => {
            let rng = rng.expect("random mode requires a seeded generator");
            // Same count as the no-ties nearest-rank selection would keep.
            let rank = ((hp.percentile / 100.0) * n as f64).ceil() as usize;
            let count = n - rank.clamp(1, n) + 1;
            rng.sample_indices(n, count)
                .into_iter()
                .map(|i| (i, 0.0))
                .collect()
        }
    };

    selected
        .into_iter()
        .map(|(r_index, ss_score)| make_quadruplet(p, &sim, r_index, ss_score, hp))
        .collect()
}

/// A product the corpus driver could not build quadruplets for, with the
/// reason it was set aside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedProduct {
    pub product_id: String,
    pub reason: String,
}

/// Corpus-level result: quadruplets ordered by (product id, score
/// descending), plus skip records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdcRun {
    pub quadruplets: Vec<SyntheticQuadruplet>,
    pub skipped: Vec<SkippedProduct>,
}

/// Runs quadruplet construction over a whole corpus: truncates QA to
/// `m_cap`, validates, embeds, and builds per product. Products that fail
/// validation or (in full mode) lack both additional sources are skipped
/// with a reason; contract errors propagate.
pub fn run_sdc(
    products: &[Product],
    embed_cfg: &EmbeddingProviderConfig,
    hp: &SdcHyperparams,
    mode: SdcMode,
    seed: u64,
) -> Result<SdcRun, SdcError> {
    hp.validate()?;
    let mut quadruplets = Vec::new();
    let mut skipped = Vec::new();
    let mut rng = Rng::new(seed).fork("sdc-random-mode");
    for raw in products {
        let p = truncate_qa(raw, hp.m_cap);
        let violations = validate_product(&p, hp);
        if !violations.is_empty() {
            skipped.push(SkippedProduct {
                product_id: p.product_id.clone(),
                reason: violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            });
            continue;
        }
        let emb = embed_product(embed_cfg, &p)?;
        match build_quadruplets_mode(&p, &emb, hp, mode, Some(&mut rng)) {
            Ok(mut quads) => quadruplets.append(&mut quads),
            Err(SdcError::NoAdditionalSources { product_id }) => skipped.push(SkippedProduct {
                product_id,
                reason: "neither description nor question-answers present".to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    // Stable over per-product order: products are processed in corpus order
    // and per-product quadruplets are already score-descending.
    quadruplets.sort_by(|a, b| {
        a.product_id.cmp(&b.product_id).then(
            b.ss_score
                .partial_cmp(&a.ss_score)
                .expect("finite scores")
                .then(a.pseudo_summary_id.cmp(&b.pseudo_summary_id)),
        )
    });
    Ok(SdcRun {
        quadruplets,
        skipped,
    })
}
