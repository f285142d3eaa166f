//! End-to-end tests of the `opsum` binary: exit codes, artifacts,
//! manifests, the committed golden quadruplet file, and pipeline
//! re-run skipping.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::oracle_quadruplets;
use opsum::corpus::{load_corpus, Split};
use opsum::embed::EmbeddingProviderConfig;
use opsum::sdc::{SdcHyperparams, SyntheticQuadruplet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opsum"))
}

fn fixture_corpus() -> PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/corpus.jsonl")).to_path_buf()
}

fn fixture_golden() -> PathBuf {
    Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/golden_quadruplets.jsonl"
    ))
    .to_path_buf()
}

fn fixture_annotations() -> PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/annotations")).to_path_buf()
}

/// The pinned invocation that must reproduce the committed golden file.
fn run_golden_sdc(out_dir: &Path) -> PathBuf {
    let quads_out = out_dir.join("quadruplets.jsonl");
    let status = bin()
        .args([
            "sdc",
            "--input",
            fixture_corpus().to_str().unwrap(),
            "--embedder",
            "fallback",
            "--dimension",
            "24",
            "--k",
            "2",
            "--percentile",
            "60",
            "--lambda1",
            "0.5",
            "--lambda2",
            "0.5",
            "--m-cap",
            "10",
            "--mode",
            "full",
            "--out",
            quads_out.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .expect("binary runs");
    assert!(status.success());
    quads_out
}

#[test]
fn sdc_subcommand_writes_quadruplets_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let quads_out = run_golden_sdc(dir.path());
    assert!(quads_out.exists());
    let body = std::fs::read_to_string(&quads_out).unwrap();
    assert!(body.lines().count() > 0, "quadruplets were produced");
    // Manifest recorded the run.
    let manifests = std::fs::read_to_string(dir.path().join("manifests.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(manifests.lines().next().unwrap()).unwrap();
    assert_eq!(rec["subcommand"], "sdc");
    assert!(rec["artifact_hashes"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("quadruplets.jsonl")));
}

#[test]
fn sdc_with_full_scale_k_exits_zero_even_when_everything_is_skipped() {
    // The bundled products have at most 8 reviews, so k = 8 leaves nothing
    // eligible; the run still succeeds and reports the skips.
    let dir = tempfile::tempdir().unwrap();
    let quads_out = dir.path().join("q.jsonl");
    let output = bin()
        .args([
            "sdc",
            "--input",
            fixture_corpus().to_str().unwrap(),
            "--k",
            "8",
            "--percentile",
            "85",
            "--out",
            quads_out.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success());
    let skipped = std::fs::read_to_string(quads_out.with_extension("skipped.jsonl")).unwrap();
    assert!(skipped.lines().count() > 0);
}

#[test]
fn golden_quadruplets_match_the_committed_oracle_file() {
    let dir = tempfile::tempdir().unwrap();
    let quads_out = run_golden_sdc(dir.path());
    let produced = std::fs::read_to_string(&quads_out).unwrap();
    let golden = std::fs::read_to_string(fixture_golden()).unwrap();
    assert_eq!(
        produced, golden,
        "pipeline quadruplets diverge from the committed golden file"
    );

    // The golden file itself must agree with the independent oracle.
    let (corpus, _) = load_corpus(&fixture_corpus(), Split::Train).unwrap();
    let provider = EmbeddingProviderConfig::fallback(24);
    let hp = SdcHyperparams {
        k: 2,
        percentile: 60.0,
        lambda1: 0.5,
        lambda2: 0.5,
        m_cap: 10,
    };
    let parsed: Vec<SyntheticQuadruplet> = golden
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut expected = Vec::new();
    for p in &corpus.products {
        if !opsum::corpus::validate_product(&opsum::corpus::truncate_qa(p, hp.m_cap), &hp)
            .is_empty()
        {
            continue;
        }
        if let Some(mut quads) = oracle_quadruplets(p, &provider, &hp) {
            quads.sort_by(|a, b| {
                b.ss.partial_cmp(&a.ss)
                    .unwrap()
                    .then(a.pseudo_summary_id.cmp(&b.pseudo_summary_id))
            });
            for q in quads {
                expected.push((p.product_id.clone(), q.pseudo_summary_id, q.input_review_ids));
            }
        }
    }
    let got: Vec<(String, String, Vec<String>)> = parsed
        .iter()
        .map(|q| {
            (
                q.product_id.clone(),
                q.pseudo_summary_id.clone(),
                q.input_review_ids.clone(),
            )
        })
        .collect();
    assert_eq!(got, expected, "golden file disagrees with the brute-force oracle");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let output = bin()
        .args(["sdc", "--definitely-not-a-flag", "x"])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"), "stderr: {stderr}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = bin().args(["transmogrify"]).output().expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn eval_with_missing_gold_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&pred, "{\"product_id\":\"p\",\"summary\":\"s\",\"logprob\":-1.0}\n").unwrap();
    let missing = dir.path().join("not-there.jsonl");
    let output = bin()
        .args([
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--gold",
            missing.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("not-there.jsonl"),
        "error must name the missing path, got: {stderr}"
    );
    // Machine-readable error record.
    let rec: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(rec["subcommand"], "eval");
}

#[test]
fn ingest_writes_report_and_normalized_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "ingest",
            "--input",
            fixture_corpus().to_str().unwrap(),
            "--split",
            "train",
            "--report",
            dir.path().join("report.json").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success());
    assert!(dir.path().join("corpus.jsonl").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["products_loaded"], 6);
    assert_eq!(report["line_errors"].as_array().unwrap().len(), 0);
}

fn write_pipeline_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "corpus": fixture_corpus(),
        "split": "train",
        "embedder": {"kind": "fallback", "checkpoint": "", "dimension": 24},
        "sdc": {"k": 2, "percentile": 60.0, "lambda1": 0.5, "lambda2": 0.5, "m_cap": 10, "mode": "full"},
        "model": {
            "arch": "medos", "hidden_dim": 16, "num_layers": 1, "num_heads": 2,
            "max_review_len": 72, "max_desc_len": 24, "max_qa_len": 32, "max_tgt_len": 16,
            "dropout": 0.0, "tie_embeddings": true
        },
        "train": {
            "learning_rate": 0.01, "batch_size": 4, "epochs": 10, "max_steps": 30,
            "adam_eps": 1e-4, "weight_decay_schedule": "linear", "seed": 7,
            "eval_every": 0, "dev_fraction": 0.0
        },
        "generate": {"beam_size": 2, "no_repeat_ngram": 3, "max_length": 12, "min_length": 0, "length_penalty": 1.0},
        "eval": {"metrics": ["r1", "r2", "rl"], "multi_ref": "max"}
    });
    let path = dir.join("pipeline.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_runs_once_then_skips_unchanged_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pipeline_config(dir.path());
    let out_dir = dir.path().join("out");

    let first = bin()
        .args([
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "7",
        ])
        .output()
        .expect("binary runs");
    assert!(first.status.success(), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert_eq!(stdout.matches(" ran").count(), 6, "six stages ran: {stdout}");
    for artifact in [
        "corpus.jsonl",
        "embeddings.jsonl",
        "quadruplets.jsonl",
        "checkpoint.json",
        "summaries.jsonl",
        "eval.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let second = bin()
        .args([
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "7",
        ])
        .output()
        .expect("binary runs");
    assert!(second.status.success());
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert_eq!(
        stdout.matches("skipped (up to date)").count(),
        6,
        "all stages skip on rerun: {stdout}"
    );
}

#[test]
fn pipeline_incompatibility_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(write_pipeline_config(dir.path())).unwrap())
            .unwrap();
    cfg["eval"]["metrics"] = serde_json::json!(["r9"]);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let output = bin()
        .args([
            "pipeline",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-dir",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn annotate_stub_extends_corpus_from_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    // The stub fixture set covers the first three products.
    let (corpus, _) = load_corpus(&fixture_corpus(), Split::Test).unwrap();
    let three = opsum::corpus::Corpus {
        products: corpus.products.into_iter().take(3).collect(),
        split: Split::Test,
        provenance: Default::default(),
    };
    let input = dir.path().join("test_corpus.jsonl");
    opsum::corpus::write_corpus(&three, &input).unwrap();

    let out = dir.path().join("extended.jsonl");
    let output = bin()
        .args([
            "annotate",
            "--input",
            input.to_str().unwrap(),
            "--kind",
            "gpt-r",
            "--transport",
            "stub",
            "--fixtures",
            fixture_annotations().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let (extended, _) = load_corpus(&out, Split::Test).unwrap();
    assert_eq!(extended.products.len(), 3);
    for p in &extended.products {
        let golds = p.gold_summaries.as_ref().unwrap();
        assert_eq!(golds.len(), 1);
        let fixture_text = std::fs::read_to_string(
            fixture_annotations().join("gpt-r").join(format!("{}.txt", p.product_id)),
        )
        .unwrap();
        assert_eq!(golds[0], opsum::corpus::normalize_whitespace(&fixture_text));
    }
    assert!(dir.path().join("annotations.gpt-r.jsonl").exists());
}

#[test]
fn summarize_then_eval_flow_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // Train a tiny checkpoint via the pipeline (cheapest path to a model).
    let cfg = write_pipeline_config(dir.path());
    let status = bin()
        .args([
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .expect("binary runs");
    assert!(status.success());

    let summaries = dir.path().join("summaries.jsonl");
    let status = bin()
        .args([
            "summarize",
            "--checkpoint",
            out_dir.join("checkpoint.json").to_str().unwrap(),
            "--input",
            fixture_corpus().to_str().unwrap(),
            "--split",
            "test",
            "--beam-size",
            "2",
            "--max-length",
            "12",
            "--out",
            summaries.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .expect("binary runs");
    assert!(status.success());
    let lines = std::fs::read_to_string(&summaries).unwrap();
    assert_eq!(lines.lines().count(), 6, "one summary per product");

    let output = bin()
        .args([
            "eval",
            "--pred",
            summaries.to_str().unwrap(),
            "--gold",
            fixture_corpus().to_str().unwrap(),
            "--metrics",
            "r1,rl",
            "--multi-ref",
            "max",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("r1:"), "stdout: {stdout}");
    assert!(stdout.contains("rl:"), "stdout: {stdout}");
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_pipeline_config(dir.path());
    assert!(bin()
        .args(["pipeline", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()])
        .status()
        .unwrap()
        .success());

    let ablation = dir.path().join("ablation.json");
    let output = bin()
        .args([
            "ablate",
            "--checkpoint",
            out_dir.join("checkpoint.json").to_str().unwrap(),
            "--input",
            fixture_corpus().to_str().unwrap(),
            "--beam-size",
            "2",
            "--max-length",
            "10",
            "--out",
            ablation.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ablation).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
}

/// Regenerates the committed golden file from the brute-force oracle.
/// Run manually: `cargo test --test cli regen -- --ignored`.
#[test]
#[ignore]
fn regen_golden_quadruplets_from_oracle() {
    let (corpus, _) = load_corpus(&fixture_corpus(), Split::Train).unwrap();
    let provider = EmbeddingProviderConfig::fallback(24);
    let hp = SdcHyperparams {
        k: 2,
        percentile: 60.0,
        lambda1: 0.5,
        lambda2: 0.5,
        m_cap: 10,
    };
    let mut records: Vec<SyntheticQuadruplet> = Vec::new();
    for p in &corpus.products {
        let p = opsum::corpus::truncate_qa(p, hp.m_cap);
        if !opsum::corpus::validate_product(&p, &hp).is_empty() {
            continue;
        }
        let Some(mut quads) = oracle_quadruplets(&p, &provider, &hp) else {
            continue;
        };
        quads.sort_by(|a, b| {
            b.ss.partial_cmp(&a.ss)
                .unwrap()
                .then(a.pseudo_summary_id.cmp(&b.pseudo_summary_id))
        });
        for q in quads {
            // Assemble the full record from oracle decisions plus the
            // product's texts.
            let review_by_id = |id: &str| {
                p.reviews
                    .iter()
                    .find(|r| r.review_id == id)
                    .expect("oracle ids come from the product")
            };
            let pseudo = review_by_id(&q.pseudo_summary_id);
            let emb = |text: &str| {
                opsum::embed::embed_texts(&provider, &[text.to_string()])
                    .unwrap()
                    .row(0)
                    .to_vec()
            };
            let pe = emb(&pseudo.text);
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            records.push(SyntheticQuadruplet {
                product_id: p.product_id.clone(),
                input_reviews: q
                    .input_review_ids
                    .iter()
                    .map(|id| review_by_id(id).text.clone())
                    .collect(),
                description: p.description.clone(),
                qa: p.qa_pairs.iter().map(|x| x.concatenated.clone()).collect(),
                pseudo_summary: pseudo.text.clone(),
                ss_score: q.ss,
                input_review_sims: q
                    .input_review_ids
                    .iter()
                    .map(|id| cos(&pe, &emb(&review_by_id(id).text)))
                    .collect(),
                pseudo_summary_id: q.pseudo_summary_id.clone(),
                input_review_ids: q.input_review_ids.clone(),
            });
        }
    }
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).unwrap());
        body.push('\n');
    }
    std::fs::write(fixture_golden(), body).unwrap();
    println!("wrote {} golden records", records.len());
}
