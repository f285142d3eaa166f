//! Constrained beam-search decoding.
//!
//! Hypotheses grow token by token; candidates that would repeat an n-gram
//! of the configured size are banned, end-sentinel candidates move to the
//! completed pool (they never occupy a live slot), and the live beam keeps
//! the `beam_size` best running sums. The returned hypothesis maximizes the
//! length-penalized score `sum_logprob / len^length_penalty` over the
//! completed pool; if nothing completed within `max_length`, the best
//! unfinished hypothesis is returned with a truncation flag.
//!
//! All ordering is deterministic: candidates tie-break by token id
//! ascending, then by hypothesis index; final selection tie-breaks by
//! lexicographically smaller token sequence.

use serde::{Deserialize, Serialize};

use crate::corpus::Product;
use crate::model::{EncoderStates, ModelError, SummaryModel};
use crate::tokenizer::{Tokenizer, BOS};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("product {product_id} has no reviews to summarize")]
    NoReviews { product_id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beam_size: usize,
    /// N-gram size that may not repeat in the output; 0 disables.
    pub no_repeat_ngram: usize,
    /// Maximum generated tokens, end sentinel included.
    pub max_length: usize,
    /// Minimum generated tokens before the end sentinel is allowed.
    pub min_length: usize,
    /// Exponent of the length divisor in the final score.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_size: 5,
            no_repeat_ngram: 3,
            max_length: 100,
            min_length: 0,
            length_penalty: 1.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.beam_size == 0 {
            return Err(GenError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.max_length == 0 {
            return Err(GenError::InvalidConfig("max_length must be at least 1".into()));
        }
        if self.min_length >= self.max_length {
            return Err(GenError::InvalidConfig(format!(
                "min_length {} must be below max_length {}",
                self.min_length, self.max_length
            )));
        }
        Ok(())
    }
}

/// Anything that scores next tokens given a prefix that starts with the
/// start sentinel. Implemented by the model; tests plug in tiny scorers.
pub trait SequenceScorer {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;
}

/// Scorer backed by a model and precomputed source states.
pub struct ModelScorer<'a> {
    pub model: &'a SummaryModel,
    pub memory: EncoderStates,
}

impl SequenceScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let rows = self.model.decode_logprobs(&self.memory, prefix)?;
        Ok(rows.into_iter().next_back().expect("non-empty prefix"))
    }
}

/// A finished or truncated decode.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Generated tokens after the start sentinel, end sentinel included
    /// when the hypothesis finished.
    pub tokens: Vec<u32>,
    /// Raw sum of token log-probabilities.
    pub logprob: f64,
    /// `logprob / len^length_penalty`.
    pub score: f64,
    /// True when no hypothesis reached the end sentinel within
    /// `max_length`.
    pub truncated: bool,
}

fn penalized(sum_logprob: f64, gen_len: usize, length_penalty: f64) -> f64 {
    sum_logprob / (gen_len.max(1) as f64).powf(length_penalty)
}

/// Token ids that would complete an already-seen n-gram of size `n` if
/// appended to `seq`.
pub fn banned_next_tokens(seq: &[u32], n: usize) -> Vec<u32> {
    if n == 0 || seq.len() < n {
        return Vec::new();
    }
    let suffix = &seq[seq.len() - (n - 1)..];
    let mut banned = Vec::new();
    for window in seq.windows(n) {
        if &window[..n - 1] == suffix {
            banned.push(window[n - 1]);
        }
    }
    banned.sort_unstable();
    banned.dedup();
    banned
}

/// True if any n-gram of size `n` occurs more than once in `seq`.
pub fn has_repeated_ngram(seq: &[u32], n: usize) -> bool {
    if n == 0 || seq.len() < n {
        return false;
    }
    let windows: Vec<&[u32]> = seq.windows(n).collect();
    for (i, w) in windows.iter().enumerate() {
        for other in &windows[i + 1..] {
            if w == other {
                return true;
            }
        }
    }
    false
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>, // includes the leading start sentinel
    sum_logprob: f64,
}

impl Hypothesis {
    fn gen_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Runs beam search against a scorer. `eos` is the end-sentinel token id.
pub fn beam_search(
    scorer: &dyn SequenceScorer,
    cfg: &GenerationConfig,
    eos: u32,
) -> Result<BeamResult, GenError> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        sum_logprob: 0.0,
    }];
    // Completed pool entries: (tokens incl. sentinels, sum, penalized).
    let mut completed: Vec<(Vec<u32>, f64, f64)> = Vec::new();

    for _step in 0..cfg.max_length {
        if live.is_empty() {
            break;
        }
        // (new_sum, token, hyp index)
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let logprobs = scorer.next_logprobs(&hyp.tokens)?;
            debug_assert_eq!(logprobs.len(), vocab);
            let banned = banned_next_tokens(&hyp.tokens, cfg.no_repeat_ngram);
            let eos_allowed = hyp.gen_len() + 1 > cfg.min_length;
            for tok in 0..vocab as u32 {
                if banned.binary_search(&tok).is_ok() {
                    continue;
                }
                if tok == eos && !eos_allowed {
                    continue;
                }
                candidates.push((hyp.sum_logprob + logprobs[tok as usize], tok, hi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for (sum, tok, hi) in candidates {
            if tok == eos {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(eos);
                let gen_len = tokens.len() - 1;
                completed.push((tokens, sum, penalized(sum, gen_len, cfg.length_penalty)));
            } else if next_live.len() < cfg.beam_size {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next_live.push(Hypothesis {
                    tokens,
                    sum_logprob: sum,
                });
            }
        }
        live = next_live;
    }

    let pick = |pool: &[(Vec<u32>, f64, f64)]| -> (Vec<u32>, f64, f64) {
        pool.iter()
            .max_by(|a, b| {
                a.2.partial_cmp(&b.2)
                    .expect("finite scores")
                    .then_with(|| b.0.cmp(&a.0))
            })
            .expect("non-empty pool")
            .clone()
    };

    if !completed.is_empty() {
        let (tokens, sum, score) = pick(&completed);
        return Ok(BeamResult {
            tokens: tokens[1..].to_vec(),
            logprob: sum,
            score,
            truncated: false,
        });
    }
    // Nothing finished: fall back to the best unfinished hypothesis.
    let pool: Vec<(Vec<u32>, f64, f64)> = live
        .iter()
        .map(|h| {
            (
                h.tokens.clone(),
                h.sum_logprob,
                penalized(h.sum_logprob, h.gen_len(), cfg.length_penalty),
            )
        })
        .collect();
    if pool.is_empty() {
        // Every continuation was banned before anything completed.
        return Ok(BeamResult {
            tokens: Vec::new(),
            logprob: 0.0,
            score: 0.0,
            truncated: true,
        });
    }
    let (tokens, sum, score) = pick(&pool);
    Ok(BeamResult {
        tokens: tokens[1..].to_vec(),
        logprob: sum,
        score,
        truncated: true,
    })
}

/// Greedy decoding: at each step take the highest-probability unbanned
/// token (smallest id on ties). Equivalent to beam size 1.
pub fn greedy_decode(
    scorer: &dyn SequenceScorer,
    cfg: &GenerationConfig,
    eos: u32,
) -> Result<BeamResult, GenError> {
    beam_search(
        scorer,
        &GenerationConfig {
            beam_size: 1,
            ..cfg.clone()
        },
        eos,
    )
}

/// One generated summary with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryOutput {
    pub product_id: String,
    pub summary: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

/// Tokenizes the product's sources (absent ones become the pad sequence),
/// runs beam search, and detokenizes. A pure function of its arguments.
pub fn summarize_product(
    model: &SummaryModel,
    tok: &Tokenizer,
    product: &Product,
    cfg: &GenerationConfig,
) -> Result<SummaryOutput, GenError> {
    cfg.validate()?;
    if product.reviews.is_empty() {
        return Err(GenError::NoReviews {
            product_id: product.product_id.clone(),
        });
    }
    let reviews: Vec<String> = product.reviews.iter().map(|r| r.text.clone()).collect();
    let qa: Vec<String> = product.qa_pairs.iter().map(|q| q.concatenated.clone()).collect();
    let input = model.prepare_input(tok, &reviews, product.description.as_deref(), &qa, None);
    let memory = model.encode_for_decoding(&input)?;
    let scorer = ModelScorer { model, memory };
    // The decoder's position table bounds the prefix length.
    let capped = GenerationConfig {
        max_length: cfg.max_length.min(model.config().max_tgt_len - 1),
        min_length: cfg.min_length.min(model.config().max_tgt_len.saturating_sub(2)),
        ..cfg.clone()
    };
    let result = beam_search(&scorer, &capped, crate::tokenizer::EOS)?;
    Ok(SummaryOutput {
        product_id: product.product_id.clone(),
        summary: tok.decode(&result.tokens),
        logprob: result.logprob,
        truncated: result.truncated,
    })
}
