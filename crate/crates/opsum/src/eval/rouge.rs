//! ROUGE-N and ROUGE-L F1 between a candidate and a reference text.
//!
//! Normalization is lowercasing plus splitting on non-alphanumeric
//! characters; no stemming, no stopword removal. ROUGE-N uses clipped
//! n-gram multiset overlap; ROUGE-L uses the longest common subsequence.
//! Scores are kept in [0, 1] and rendered x100 at the reporting layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

impl std::str::FromStr for RougeVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r1" | "rouge1" | "rouge-1" => Ok(RougeVariant::R1),
            "r2" | "rouge2" | "rouge-2" => Ok(RougeVariant::R2),
            "rl" | "rougel" | "rouge-l" => Ok(RougeVariant::RL),
            other => Err(format!("unknown metric {other:?}, expected r1|r2|rl")),
        }
    }
}

impl std::fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RougeVariant::R1 => write!(f, "r1"),
            RougeVariant::R2 => write!(f, "r2"),
            RougeVariant::RL => write!(f, "rl"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub variant: RougeVariant,
}

impl RougeScore {
    fn zero(variant: RougeVariant) -> Self {
        RougeScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            variant,
        }
    }

    fn from_pr(precision: f64, recall: f64, variant: RougeVariant) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
            variant,
        }
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).collect()
}

/// N-gram overlap score with clipped multiset intersection.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let variant = match n {
        1 => RougeVariant::R1,
        _ => RougeVariant::R2,
    };
    let cand_tokens = normalize_tokens(candidate);
    let ref_tokens = normalize_tokens(reference);
    let cand_grams = ngrams(&cand_tokens, n);
    let ref_grams = ngrams(&ref_tokens, n);
    if cand_grams.is_empty() || ref_grams.is_empty() {
        return RougeScore::zero(variant);
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    for g in &ref_grams {
        *ref_counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for g in &cand_grams {
        if let Some(c) = ref_counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    RougeScore::from_pr(
        overlap as f64 / cand_grams.len() as f64,
        overlap as f64 / ref_grams.len() as f64,
        variant,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Longest-common-subsequence score.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand_tokens = normalize_tokens(candidate);
    let ref_tokens = normalize_tokens(reference);
    if cand_tokens.is_empty() || ref_tokens.is_empty() {
        return RougeScore::zero(RougeVariant::RL);
    }
    let lcs = lcs_len(&cand_tokens, &ref_tokens) as f64;
    RougeScore::from_pr(
        lcs / cand_tokens.len() as f64,
        lcs / ref_tokens.len() as f64,
        RougeVariant::RL,
    )
}

/// Dispatches one variant.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    match variant {
        RougeVariant::R1 => rouge_n(candidate, reference, 1),
        RougeVariant::R2 => rouge_n(candidate, reference, 2),
        RougeVariant::RL => rouge_l(candidate, reference),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_prf(score: RougeScore, p: f64, r: f64, f1: f64) {
        assert!((score.precision - p).abs() < 1e-6, "precision {} vs {p}", score.precision);
        assert!((score.recall - r).abs() < 1e-6, "recall {} vs {r}", score.recall);
        assert!((score.f1 - f1).abs() < 1e-6, "f1 {} vs {f1}", score.f1);
    }

    /// Fixture suite; every expected value is hand-computed from the
    /// definitions.
    #[test]
    fn hand_computed_fixture_suite() {
        let two_thirds = 2.0 / 3.0;
        // (candidate, reference, variant, P, R, F1)
        let cases: Vec<(&str, &str, RougeVariant, f64, f64, f64)> = vec![
            ("the cat sat", "the cat ran", RougeVariant::R1, two_thirds, two_thirds, two_thirds),
            ("the cat sat", "the cat ran", RougeVariant::R2, 0.5, 0.5, 0.5),
            ("the cat sat", "the cat ran", RougeVariant::RL, two_thirds, two_thirds, two_thirds),
            ("a b c d", "a c d b", RougeVariant::RL, 0.75, 0.75, 0.75),
            ("x y z", "x y z", RougeVariant::R1, 1.0, 1.0, 1.0),
            ("x y z", "x y z", RougeVariant::R2, 1.0, 1.0, 1.0),
            ("x y z", "x y z", RougeVariant::RL, 1.0, 1.0, 1.0),
            ("a b", "c d", RougeVariant::R1, 0.0, 0.0, 0.0),
            ("", "a", RougeVariant::R1, 0.0, 0.0, 0.0),
            ("a a a", "a", RougeVariant::R1, 1.0 / 3.0, 1.0, 0.5),
            ("a", "a a a", RougeVariant::R1, 1.0, 1.0 / 3.0, 0.5),
            ("The CAT", "the cat", RougeVariant::R1, 1.0, 1.0, 1.0),
            ("cat, sat!", "cat sat", RougeVariant::R2, 1.0, 1.0, 1.0),
            ("rated 5 stars", "5 stars rated", RougeVariant::R1, 1.0, 1.0, 1.0),
            ("rated 5 stars", "5 stars rated", RougeVariant::R2, 0.5, 0.5, 0.5),
            ("rated 5 stars", "5 stars rated", RougeVariant::RL, two_thirds, two_thirds, two_thirds),
            ("a", "a", RougeVariant::R2, 0.0, 0.0, 0.0),
            (
                "good sound quality overall",
                "sound quality is good",
                RougeVariant::R1,
                0.75,
                0.75,
                0.75,
            ),
            ("a x b y c", "a b c", RougeVariant::RL, 0.6, 1.0, 0.75),
            ("a a b", "a b a", RougeVariant::RL, two_thirds, two_thirds, two_thirds),
            ("a b c d e f", "a b", RougeVariant::R1, 1.0 / 3.0, 1.0, 0.5),
        ];
        for (cand, reference, variant, p, r, f1) in cases {
            let got = rouge(cand, reference, variant);
            assert_eq!(got.variant, variant);
            assert_prf(got, p, r, f1);
        }
    }

    /// Exhaustive subsequence oracle: the longest common subsequence found
    /// by enumerating every subsequence of the candidate.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
            let mut it = hay.iter();
            needle.iter().all(|n| it.any(|h| h == *n))
        }
        let n = a.len();
        let mut best = 0;
        for mask in 0u32..(1 << n) {
            let picked: Vec<&String> =
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
            if picked.len() > best && is_subsequence(&picked, b) {
                best = picked.len();
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lcs_matches_exhaustive_oracle(
            a in proptest::collection::vec("[abc]", 0..10),
            b in proptest::collection::vec("[abc]", 0..10),
        ) {
            let a: Vec<String> = a;
            let b: Vec<String> = b;
            prop_assert_eq!(lcs_len(&a, &b), lcs_oracle(&a, &b));
        }

        #[test]
        fn identity_scores_one(words in proptest::collection::vec("[a-z]{1,6}", 1..8), n in 1usize..3) {
            let text = words.join(" ");
            prop_assume!(words.len() >= n);
            let got = rouge_n(&text, &text, n);
            prop_assert!((got.f1 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn f1_is_symmetric_under_swap(
            a in "[a-z ]{0,30}",
            b in "[a-z ]{0,30}",
        ) {
            for variant in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
                let fwd = rouge(&a, &b, variant);
                let rev = rouge(&b, &a, variant);
                prop_assert!((fwd.f1 - rev.f1).abs() < 1e-12);
                prop_assert!((fwd.precision - rev.recall).abs() < 1e-12);
                prop_assert!((fwd.recall - rev.precision).abs() < 1e-12);
            }
        }
    }
}
