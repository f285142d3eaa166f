//! Shared fixtures and independent oracles for integration tests.
//!
//! The oracles here deliberately re-derive everything from scratch
//! (cosines, percentiles, selections, sequence scores) without calling the
//! library's selection or search code, so agreement is evidence rather
//! than tautology.

// Not every test binary uses every helper.
#![allow(dead_code)]

use opsum::corpus::{Product, QAPair, Review};
use opsum::embed::{embed_texts, EmbeddingProviderConfig};
use opsum::model::ModelError;
use opsum::rng::Rng;
use opsum::sdc::SdcHyperparams;

/// Pseudo-summary/input assignment as the brute-force oracle sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleQuad {
    pub pseudo_summary_id: String,
    pub input_review_ids: Vec<String>,
    pub ss: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}

/// Exhaustive re-implementation of the quadruplet construction for one
/// product: every cosine computed from scratch, every selection by
/// repeated scanning. Returns `None` when the product has neither
/// description nor question-answers (the skip case).
pub fn oracle_quadruplets(
    p: &Product,
    provider: &EmbeddingProviderConfig,
    hp: &SdcHyperparams,
) -> Option<Vec<OracleQuad>> {
    let mut qa = p.qa_pairs.clone();
    qa.truncate(hp.m_cap);
    let has_desc = p.description.as_deref().is_some_and(|d| !d.is_empty());
    if !has_desc && qa.is_empty() {
        return None;
    }
    let n = p.reviews.len();
    // One embed call per text: the fallback embedder is per-text pure.
    let embed_one = |text: &str| -> Vec<f64> {
        let m = embed_texts(provider, &[text.to_string()]).expect("embedding succeeds");
        m.row(0).to_vec()
    };
    let e_r: Vec<Vec<f64>> = p.reviews.iter().map(|r| embed_one(&r.text)).collect();
    let e_d = p
        .description
        .as_deref()
        .filter(|d| !d.is_empty())
        .map(embed_one);
    let e_q: Vec<Vec<f64>> = qa.iter().map(|q| embed_one(&q.concatenated)).collect();

    let mut ss = vec![0.0f64; n];
    for i in 0..n {
        let ds_i = e_d.as_ref().map_or(0.0, |d| cosine(&e_r[i], d));
        let qs_i = if e_q.is_empty() {
            0.0
        } else {
            e_q.iter().map(|q| cosine(&e_r[i], q)).sum::<f64>() / e_q.len() as f64
        };
        ss[i] = hp.lambda1 * ds_i + hp.lambda2 * qs_i;
    }

    // Nearest-rank percentile cutoff via insertion sort.
    let mut sorted = ss.clone();
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 && sorted[j - 1] > sorted[j] {
            sorted.swap(j - 1, j);
            j -= 1;
        }
    }
    let rank = ((hp.percentile / 100.0) * n as f64).ceil() as usize;
    let cutoff = sorted[rank.clamp(1, n) - 1];

    // Selected pseudo-summaries: repeatedly scan for the best remaining
    // index with ss >= cutoff (score descending, index ascending).
    let mut taken = vec![false; n];
    let mut selection = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] || ss[i] < cutoff {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if ss[i] > ss[b] => Some(i),
                Some(b) => Some(b),
            };
        }
        match best {
            Some(i) => {
                taken[i] = true;
                selection.push(i);
            }
            None => break,
        }
    }

    let mut out = Vec::with_capacity(selection.len());
    for r_idx in selection {
        // Top-k inputs by repeated scanning over pairwise cosines.
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..hp.k {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == r_idx || chosen.contains(&j) {
                    continue;
                }
                let sim = cosine(&e_r[r_idx], &e_r[j]);
                best = match best {
                    None => Some((j, sim)),
                    Some((_, bs)) if sim > bs => Some((j, sim)),
                    Some(b) => Some(b),
                };
            }
            chosen.push(best.expect("k < n guarantees a candidate").0);
        }
        out.push(OracleQuad {
            pseudo_summary_id: p.reviews[r_idx].review_id.clone(),
            input_review_ids: chosen.iter().map(|&j| p.reviews[j].review_id.clone()).collect(),
            ss: ss[r_idx],
        });
    }
    Some(out)
}

const WORDS: [&str; 24] = [
    "grip", "steady", "camera", "video", "heavy", "light", "solid", "cheap", "battery", "sound",
    "clear", "bass", "warm", "lamp", "kettle", "pour", "fast", "quiet", "soft", "bright", "small",
    "works", "great", "fine",
];

fn random_text(rng: &mut Rng, min_words: usize, max_words: usize) -> String {
    let len = min_words + rng.below(max_words - min_words + 1);
    (0..len)
        .map(|_| WORDS[rng.below(WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Randomized product with `n` reviews and optional description/QA.
pub fn random_product(rng: &mut Rng, id: usize, n: usize, with_desc: bool, qa: usize) -> Product {
    Product {
        product_id: format!("rp{id}"),
        domain: "test".to_string(),
        reviews: (0..n)
            .map(|i| Review {
                review_id: format!("rp{id}-r{i}"),
                text: random_text(rng, 3, 8),
                rating: Some(((i % 5) + 1) as u8),
            })
            .collect(),
        description: with_desc.then(|| random_text(rng, 4, 9)),
        qa_pairs: (0..qa)
            .map(|_| QAPair::new(random_text(rng, 2, 5), random_text(rng, 2, 5)))
            .collect(),
        gold_summaries: None,
    }
}

/// Ten memorizable products, one training quadruplet each: the product's
/// reviews are exactly the quadruplet's input reviews, so inference sees
/// the same sources as training.
pub fn overfit_fixture() -> (Vec<opsum::sdc::SyntheticQuadruplet>, Vec<Product>) {
    let specs: [(&str, &str, &str); 10] = [
        ("mug", "crimson", "the crimson mug pours hot coffee smoothly"),
        ("lamp", "amber", "this amber lamp glows warm and steady"),
        ("kettle", "steel", "the steel kettle boils water very fast"),
        ("grip", "black", "a black grip holds the camera firm"),
        ("earbuds", "white", "these white earbuds sound clear and bright"),
        ("scanner", "gray", "the gray scanner copies film without fuss"),
        ("blanket", "plaid", "a plaid blanket keeps the bed cozy"),
        ("router", "slim", "the slim router keeps the signal strong"),
        ("chair", "oak", "this oak chair supports the back well"),
        ("torch", "tiny", "a tiny torch lights the whole trail"),
    ];
    let mut quads = Vec::new();
    let mut products = Vec::new();
    for (i, (noun, adj, summary)) in specs.iter().enumerate() {
        let reviews = vec![
            format!("the {adj} {noun} arrived quickly and works"),
            format!("my {adj} {noun} is useful every day"),
        ];
        let description = Some(format!("a {adj} {noun} for daily use"));
        let qa = vec![format!("is the {noun} good yes the {adj} one is good")];
        quads.push(opsum::sdc::SyntheticQuadruplet {
            product_id: format!("ov{i}"),
            input_reviews: reviews.clone(),
            description: description.clone(),
            qa: qa.clone(),
            pseudo_summary: summary.to_string(),
            ss_score: 1.0,
            input_review_sims: vec![0.9, 0.8],
            pseudo_summary_id: format!("ov{i}-ps"),
            input_review_ids: vec![format!("ov{i}-r0"), format!("ov{i}-r1")],
        });
        products.push(Product {
            product_id: format!("ov{i}"),
            domain: "test".to_string(),
            reviews: reviews
                .iter()
                .enumerate()
                .map(|(ri, text)| Review {
                    review_id: format!("ov{i}-r{ri}"),
                    text: text.clone(),
                    rating: None,
                })
                .collect(),
            description,
            qa_pairs: vec![QAPair::new(
                format!("is the {noun} good"),
                format!("yes the {adj} one is good"),
            )],
            gold_summaries: Some(vec![summary.to_string()]),
        });
    }
    (quads, products)
}

/// Deterministic random next-token scorer over a tiny vocabulary, for beam
/// search tests. Token 0 is the end sentinel by convention of the tests.
pub struct RandomScorer {
    vocab: usize,
    seed: u64,
}

impl RandomScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        RandomScorer { vocab, seed }
    }
}

impl opsum::generate::SequenceScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut h = self.seed ^ 0xabcd_ef01_2345_6789;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(t) + 7);
        }
        let mut rng = Rng::new(h);
        let raw: Vec<f64> = (0..self.vocab).map(|_| rng.next_gaussian()).collect();
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = raw.iter().map(|x| (x - max).exp()).sum();
        Ok(raw.iter().map(|x| x - max - denom.ln()).collect())
    }
}

/// Exhaustive beam-search oracle: scores every constrained sequence of up
/// to `max_length` generated tokens and returns the penalized argmax, with
/// the same tie-break as the implementation (smaller token sequence wins).
pub fn exhaustive_best_sequence(
    scorer: &dyn opsum::generate::SequenceScorer,
    cfg: &opsum::generate::GenerationConfig,
    eos: u32,
) -> (Vec<u32>, f64) {
    let vocab = scorer.vocab_size() as u32;
    let bos = opsum::tokenizer::BOS;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![bos], 0.0)];
    while let Some((prefix, sum)) = stack.pop() {
        let gen_len = prefix.len() - 1;
        if gen_len >= cfg.max_length {
            continue;
        }
        let logprobs = scorer.next_logprobs(&prefix).unwrap();
        for tok in 0..vocab {
            let mut seq = prefix.clone();
            seq.push(tok);
            if cfg.no_repeat_ngram > 0
                && opsum::generate::has_repeated_ngram(&seq, cfg.no_repeat_ngram)
            {
                continue;
            }
            let new_sum = sum + logprobs[tok as usize];
            if tok == eos {
                if gen_len < cfg.min_length {
                    continue;
                }
                let score =
                    new_sum / ((gen_len + 1) as f64).powf(cfg.length_penalty);
                let cand = (seq[1..].to_vec(), score);
                best = Some(match best.take() {
                    None => cand,
                    Some(b) => {
                        if cand.1 > b.1 || (cand.1 == b.1 && cand.0 < b.0) {
                            cand
                        } else {
                            b
                        }
                    }
                });
            } else {
                stack.push((seq, new_sum));
            }
        }
    }
    best.expect("some sequence completes")
}
