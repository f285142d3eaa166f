//! Browser demo bindings: interactive pseudo-summary selection, ROUGE
//! scoring, and annotation-prompt rendering over the core crate.
//!
//! Every entry point takes and returns JSON strings so the page needs no
//! extra glue. Failures come back as `{"error": "..."}` rather than
//! thrown exceptions. The embedding backend is the deterministic hashed
//! n-gram fallback, so everything runs client-side with no weights.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use opsum::annotate::{build_prompt, PromptKind};
use opsum::corpus::{truncate_qa, validate_product, Product};
use opsum::embed::EmbeddingProviderConfig;
use opsum::eval::{rouge, RougeVariant};
use opsum::rng::Rng;
use opsum::sdc::{
    build_quadruplets_mode, combined_scores, description_scores, embed_product, qa_scores,
    select_pseudo_summaries, SdcHyperparams, SdcMode,
};

#[derive(Serialize)]
struct ErrorView {
    error: String,
}

fn error_json(message: impl std::fmt::Display) -> String {
    serde_json::to_string(&ErrorView {
        error: message.to_string(),
    })
    .expect("error view serializes")
}

#[derive(Serialize)]
struct ReviewScoreView {
    review_id: String,
    text: String,
    ds: f64,
    qs: f64,
    ss: f64,
    selected: bool,
}

#[derive(Serialize)]
struct QuadrupletView {
    pseudo_summary_id: String,
    pseudo_summary: String,
    ss_score: f64,
    input_review_ids: Vec<String>,
    input_review_sims: Vec<f64>,
}

#[derive(Serialize)]
struct SelectionView {
    mode: String,
    reviews: Vec<ReviewScoreView>,
    quadruplets: Vec<QuadrupletView>,
}

/// Scores every review of the product against its description and
/// question-answers and returns the resulting quadruplets for the chosen
/// selection mode (`full`, `reviews-only`, or `random`).
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn explore_selection(
    product_json: &str,
    k: usize,
    percentile: f64,
    lambda1: f64,
    lambda2: f64,
    mode: &str,
    seed: u32,
    dimension: usize,
) -> String {
    let product: Product = match serde_json::from_str(product_json) {
        Ok(p) => p,
        Err(e) => return error_json(format!("product JSON: {e}")),
    };
    let mode: SdcMode = match mode.parse() {
        Ok(m) => m,
        Err(e) => return error_json(e),
    };
    let hp = SdcHyperparams {
        k,
        percentile,
        lambda1,
        lambda2,
        m_cap: 10,
    };
    if let Err(e) = hp.validate() {
        return error_json(e);
    }
    let product = truncate_qa(&product, hp.m_cap);
    let violations = validate_product(&product, &hp);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return error_json(list.join("; "));
    }
    let provider = EmbeddingProviderConfig::fallback(dimension.clamp(8, 512));
    let emb = match embed_product(&provider, &product) {
        Ok(e) => e,
        Err(e) => return error_json(e),
    };
    let ds = match description_scores(&emb.reviews, emb.description.as_ref()) {
        Ok(v) => v,
        Err(e) => return error_json(e),
    };
    let qs = match qa_scores(&emb.reviews, &emb.qa) {
        Ok(v) => v,
        Err(e) => return error_json(e),
    };
    let ss = match combined_scores(&ds, &qs, hp.lambda1, hp.lambda2) {
        Ok(v) => v,
        Err(e) => return error_json(e),
    };
    let selected: std::collections::BTreeSet<usize> =
        select_pseudo_summaries(&ss, hp.percentile).into_iter().collect();

    let mut rng = Rng::new(u64::from(seed));
    let quadruplets = match build_quadruplets_mode(&product, &emb, &hp, mode, Some(&mut rng)) {
        Ok(quads) => quads,
        Err(e) => return error_json(e),
    };

    let view = SelectionView {
        mode: mode.to_string(),
        reviews: product
            .reviews
            .iter()
            .enumerate()
            .map(|(i, r)| ReviewScoreView {
                review_id: r.review_id.clone(),
                text: r.text.clone(),
                ds: ds.values[i],
                qs: qs.values[i],
                ss: ss.values[i],
                selected: selected.contains(&i),
            })
            .collect(),
        quadruplets: quadruplets
            .iter()
            .map(|q| QuadrupletView {
                pseudo_summary_id: q.pseudo_summary_id.clone(),
                pseudo_summary: q.pseudo_summary.clone(),
                ss_score: q.ss_score,
                input_review_ids: q.input_review_ids.clone(),
                input_review_sims: q.input_review_sims.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&view).expect("view serializes")
}

#[derive(Serialize)]
struct RougeView {
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct ScoresView {
    r1: RougeView,
    r2: RougeView,
    rl: RougeView,
}

/// ROUGE-1/2/L of a candidate summary against a reference.
#[wasm_bindgen]
pub fn score_summary(candidate: &str, reference: &str) -> String {
    let view = |v: RougeVariant| {
        let s = rouge(candidate, reference, v);
        RougeView {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    };
    serde_json::to_string(&ScoresView {
        r1: view(RougeVariant::R1),
        r2: view(RougeVariant::R2),
        rl: view(RougeVariant::RL),
    })
    .expect("scores serialize")
}

#[derive(Serialize)]
struct PromptView {
    prompt: String,
}

/// Renders the reviews-only or reviews+description+QA annotation prompt
/// for a product.
#[wasm_bindgen]
pub fn render_prompt(product_json: &str, kind: &str) -> String {
    let product: Product = match serde_json::from_str(product_json) {
        Ok(p) => p,
        Err(e) => return error_json(format!("product JSON: {e}")),
    };
    let kind: PromptKind = match kind.parse() {
        Ok(k) => k,
        Err(e) => return error_json(e),
    };
    match build_prompt(kind, &product) {
        Ok(prompt) => serde_json::to_string(&PromptView { prompt }).expect("prompt serializes"),
        Err(e) => error_json(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "product_id": "demo",
        "domain": "electronics",
        "reviews": [
            {"review_id": "r0", "text": "solid grip keeps the camera steady"},
            {"review_id": "r1", "text": "heavy but the weight helps stability"},
            {"review_id": "r2", "text": "fits any standard tripod thread"},
            {"review_id": "r3", "text": "cheap sturdy aluminum handle"}
        ],
        "description": "aluminum hand grip with quarter inch thread",
        "qa": [{"question": "does it fit a tripod", "answer": "yes any standard mount"}]
    }"#;

    #[test]
    fn selection_view_scores_every_review() {
        let out = explore_selection(SAMPLE, 2, 60.0, 0.5, 0.5, "full", 1, 24);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_none(), "unexpected error: {out}");
        assert_eq!(v["reviews"].as_array().unwrap().len(), 4);
        assert!(!v["quadruplets"].as_array().unwrap().is_empty());
        let any_selected = v["reviews"]
            .as_array()
            .unwrap()
            .iter()
            .any(|r| r["selected"].as_bool().unwrap());
        assert!(any_selected);
    }

    #[test]
    fn selection_reports_validation_problems() {
        let out = explore_selection(SAMPLE, 9, 60.0, 0.5, 0.5, "full", 1, 24);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].as_str().unwrap().contains("at least 10"));
    }

    #[test]
    fn random_mode_is_seed_stable() {
        let a = explore_selection(SAMPLE, 2, 60.0, 0.5, 0.5, "random", 9, 24);
        let b = explore_selection(SAMPLE, 2, 60.0, 0.5, 0.5, "random", 9, 24);
        assert_eq!(a, b);
    }

    #[test]
    fn rouge_view_matches_hand_value() {
        let out = score_summary("the cat sat", "the cat ran");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!((v["r1"]["f1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn prompt_renders_for_both_kinds() {
        for kind in ["gpt-r", "gpt-rdq"] {
            let out = render_prompt(SAMPLE, kind);
            let v: serde_json::Value = serde_json::from_str(&out).unwrap();
            assert!(v["prompt"].as_str().unwrap().contains("word limit of under 100 words"));
        }
    }
}
