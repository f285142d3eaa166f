//! Significance and agreement statistics: paired t-test, Fleiss' kappa,
//! and best-worst scaling aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Result of a paired t-test. A zero-variance difference vector has no
/// defined p-value and is reported as degenerate rather than as a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TTestOutcome {
    Result { t: f64, df: usize, p_two_sided: f64 },
    DegenerateZeroVariance,
}

/// Two-sided paired t-test over per-item score pairs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestOutcome, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewPairs {
            got: a.len(),
            need: 2,
        });
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(TTestOutcome::DegenerateZeroVariance);
    }
    let se = (var / n).sqrt();
    let t = mean / se;
    let df = a.len() - 1;
    let p = 2.0 * student_t_upper_tail(t.abs(), df as f64);
    Ok(TTestOutcome::Result {
        t,
        df,
        p_two_sided: p,
    })
}

/// Upper-tail probability P(T_df > t) for t >= 0, via the regularized
/// incomplete beta function: P = I_x(df/2, 1/2) / 2 with x = df/(df+t^2).
fn student_t_upper_tail(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    0.5 * incomplete_beta(0.5 * df, 0.5, x)
}

/// Lanczos approximation of ln Gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Regularized incomplete beta function I_x(a, b) by Lentz's continued
/// fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Items-by-raters categorical ratings. Categories are arbitrary labels;
/// only their identities matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    /// `ratings[item][rater]` is the category assigned by that rater.
    pub ratings: Vec<Vec<u32>>,
}

impl RatingsMatrix {
    pub fn new(ratings: Vec<Vec<u32>>) -> Self {
        RatingsMatrix { ratings }
    }
}

/// Fleiss' kappa outcome. When every rating lands in one category, chance
/// agreement is 1 and the statistic is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KappaOutcome {
    Kappa(f64),
    DegenerateNoVariance,
}

/// Chance-corrected agreement for a fixed number of raters per item:
/// `kappa = (Pbar - Pbar_e) / (1 - Pbar_e)`.
pub fn fleiss_kappa(m: &RatingsMatrix) -> Result<KappaOutcome, EvalError> {
    if m.ratings.is_empty() {
        return Err(EvalError::EmptyRatings);
    }
    let raters = m.ratings[0].len();
    if raters < 2 {
        return Err(EvalError::TooFewRaters { got: raters });
    }
    for (item, row) in m.ratings.iter().enumerate() {
        if row.len() != raters {
            return Err(EvalError::RaggedRatings {
                item,
                got: row.len(),
                want: raters,
            });
        }
    }
    let items = m.ratings.len() as f64;
    let n = raters as f64;

    let mut category_totals: BTreeMap<u32, f64> = BTreeMap::new();
    let mut p_sum = 0.0;
    for row in &m.ratings {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for &c in row {
            *counts.entry(c).or_default() += 1.0;
            *category_totals.entry(c).or_default() += 1.0;
        }
        let sum_sq: f64 = counts.values().map(|c| c * c).sum();
        p_sum += (sum_sq - n) / (n * (n - 1.0));
    }
    let p_bar = p_sum / items;
    let total = items * n;
    let p_e: f64 = category_totals
        .values()
        .map(|c| {
            let p = c / total;
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(KappaOutcome::DegenerateNoVariance);
    }
    Ok(KappaOutcome::Kappa((p_bar - p_e) / (1.0 - p_e)))
}

/// One best-worst judgment over a set of models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BwsJudgment {
    /// Models shown to the judge for this item.
    pub models: Vec<String>,
    pub best: String,
    pub worst: String,
}

/// Aggregated best-worst scaling scores: per model,
/// `(#best - #worst) / #judgments covering the model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BwsReport {
    pub scores: BTreeMap<String, f64>,
    pub judgments_used: usize,
    pub rejected: Vec<(usize, String)>,
}

pub fn best_worst_scores(judgments: &[BwsJudgment]) -> Result<BwsReport, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::NoJudgments);
    }
    let mut best_counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst_counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut coverage: BTreeMap<String, f64> = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut used = 0usize;
    for (index, j) in judgments.iter().enumerate() {
        if j.models.len() < 2 {
            rejected.push((index, "fewer than 2 models".to_string()));
            continue;
        }
        if j.best == j.worst {
            rejected.push((index, "best equals worst".to_string()));
            continue;
        }
        if !j.models.contains(&j.best) || !j.models.contains(&j.worst) {
            rejected.push((index, "best/worst not among the models".to_string()));
            continue;
        }
        used += 1;
        for m in &j.models {
            *coverage.entry(m.clone()).or_default() += 1.0;
        }
        *best_counts.entry(j.best.clone()).or_default() += 1.0;
        *worst_counts.entry(j.worst.clone()).or_default() += 1.0;
    }
    if used == 0 {
        return Err(EvalError::NoJudgments);
    }
    let scores = coverage
        .iter()
        .map(|(m, cov)| {
            let b = best_counts.get(m).copied().unwrap_or(0.0);
            let w = worst_counts.get(m).copied().unwrap_or(0.0);
            (m.clone(), (b - w) / cov)
        })
        .collect();
    Ok(BwsReport {
        scores,
        judgments_used: used,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_are_degenerate() {
        let a = vec![0.4, 0.6, 0.7];
        let got = paired_t_test(&a, &a).unwrap();
        assert_eq!(got, TTestOutcome::DegenerateZeroVariance);
    }

    #[test]
    fn hand_computed_t_of_one_with_three_df() {
        // Differences (1, 1, 1, -1): mean 0.5, sd 1, se 0.5, t = 1, df = 3.
        let a = vec![2.0, 3.0, 4.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 2.0];
        match paired_t_test(&a, &b).unwrap() {
            TTestOutcome::Result { t, df, p_two_sided } => {
                assert!((t - 1.0).abs() < 1e-12);
                assert_eq!(df, 3);
                // Exact: 2 * (1/2 - (arctan(1/sqrt(3)) + sqrt(3)/4) / pi).
                assert!((p_two_sided - 0.39098).abs() < 1e-3, "p {p_two_sided}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hand_computed_t_of_two_with_nine_df() {
        // Differences with mean 2 and variance 10 over n = 10: t = 2, df = 9.
        let diffs = [6.0, -2.0, 6.0, -2.0, 5.0, -1.0, 2.0, 2.0, 4.0, 0.0];
        let a: Vec<f64> = diffs.to_vec();
        let b = vec![0.0; diffs.len()];
        match paired_t_test(&a, &b).unwrap() {
            TTestOutcome::Result { t, df, p_two_sided } => {
                assert!((t - 2.0).abs() < 1e-12, "t {t}");
                assert_eq!(df, 9);
                assert!((p_two_sided - 0.07658).abs() < 1e-3, "p {p_two_sided}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hand_computed_t_of_one_with_one_df() {
        // Differences (2, 0): t = 1, df = 1, p = 0.5 exactly
        // (Cauchy tail: 2 * (1/2 - arctan(1)/pi) = 1/2).
        let a = vec![3.0, 1.0];
        let b = vec![1.0, 1.0];
        match paired_t_test(&a, &b).unwrap() {
            TTestOutcome::Result { t, df, p_two_sided } => {
                assert!((t - 1.0).abs() < 1e-12);
                assert_eq!(df, 1);
                assert!((p_two_sided - 0.5).abs() < 1e-6, "p {p_two_sided}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn swapping_sides_negates_t_keeps_p() {
        let a = vec![2.0, 3.0, 4.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 2.0];
        let fwd = paired_t_test(&a, &b).unwrap();
        let rev = paired_t_test(&b, &a).unwrap();
        match (fwd, rev) {
            (
                TTestOutcome::Result { t: t1, p_two_sided: p1, .. },
                TTestOutcome::Result { t: t2, p_two_sided: p2, .. },
            ) => {
                assert!((t1 + t2).abs() < 1e-12);
                assert!((p1 - p2).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            paired_t_test(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    /// Ten items, five raters, three categories. By hand:
    /// per-item agreements (1.0, .6, .4, 1.0, .3, 1.0, .2, .6, .3, .4)
    /// give Pbar = 0.58; category shares (18, 18, 14)/50 give
    /// Pbar_e = 0.36^2 + 0.36^2 + 0.28^2 = 0.3376;
    /// kappa = (0.58 - 0.3376) / 0.6624 = 101/276.
    #[test]
    fn hand_computed_fleiss_kappa_fixture() {
        let m = RatingsMatrix::new(vec![
            vec![1, 1, 1, 1, 1],
            vec![1, 1, 1, 1, 2],
            vec![1, 1, 1, 2, 2],
            vec![2, 2, 2, 2, 2],
            vec![1, 2, 2, 2, 3],
            vec![3, 3, 3, 3, 3],
            vec![1, 1, 2, 2, 3],
            vec![2, 3, 3, 3, 3],
            vec![1, 2, 3, 3, 3],
            vec![1, 1, 2, 2, 2],
        ]);
        match fleiss_kappa(&m).unwrap() {
            KappaOutcome::Kappa(k) => {
                assert!((k - 101.0 / 276.0).abs() < 1e-6, "kappa {k}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn perfect_agreement_with_multiple_categories_is_one() {
        let m = RatingsMatrix::new(vec![
            vec![1, 1, 1],
            vec![2, 2, 2],
            vec![3, 3, 3],
            vec![1, 1, 1],
        ]);
        assert_eq!(fleiss_kappa(&m).unwrap(), KappaOutcome::Kappa(1.0));
    }

    #[test]
    fn single_category_everywhere_is_degenerate() {
        let m = RatingsMatrix::new(vec![vec![2, 2], vec![2, 2]]);
        assert_eq!(fleiss_kappa(&m).unwrap(), KappaOutcome::DegenerateNoVariance);
    }

    #[test]
    fn kappa_invariant_under_category_relabeling() {
        let original = RatingsMatrix::new(vec![
            vec![1, 1, 2, 3, 3],
            vec![2, 2, 2, 1, 1],
            vec![3, 3, 1, 1, 2],
            vec![1, 2, 3, 3, 3],
        ]);
        // Swap labels 1 <-> 3.
        let relabeled = RatingsMatrix::new(
            original
                .ratings
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&c| match c {
                            1 => 3,
                            3 => 1,
                            other => other,
                        })
                        .collect()
                })
                .collect(),
        );
        let a = fleiss_kappa(&original).unwrap();
        let b = fleiss_kappa(&relabeled).unwrap();
        match (a, b) {
            (KappaOutcome::Kappa(x), KappaOutcome::Kappa(y)) => {
                assert!((x - y).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn judgment(models: &[&str], best: &str, worst: &str) -> BwsJudgment {
        BwsJudgment {
            models: models.iter().map(|s| s.to_string()).collect(),
            best: best.to_string(),
            worst: worst.to_string(),
        }
    }

    #[test]
    fn always_best_scores_plus_one() {
        let js: Vec<BwsJudgment> =
            (0..10).map(|_| judgment(&["m1", "m2", "m3"], "m1", "m3")).collect();
        let report = best_worst_scores(&js).unwrap();
        assert_eq!(report.scores["m1"], 1.0);
        assert_eq!(report.scores["m2"], 0.0);
        assert_eq!(report.scores["m3"], -1.0);
        // Scores over a fixed model set sum to zero.
        let total: f64 = report.scores.values().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn balanced_best_and_worst_cancel() {
        let mut js = Vec::new();
        for i in 0..10 {
            if i < 5 {
                js.push(judgment(&["a", "b"], "a", "b"));
            } else {
                js.push(judgment(&["a", "b"], "b", "a"));
            }
        }
        let report = best_worst_scores(&js).unwrap();
        assert_eq!(report.scores["a"], 0.0);
        assert_eq!(report.scores["b"], 0.0);
    }

    #[test]
    fn best_equals_worst_is_rejected_with_record() {
        let js = vec![
            judgment(&["a", "b"], "a", "a"),
            judgment(&["a", "b"], "a", "b"),
        ];
        let report = best_worst_scores(&js).unwrap();
        assert_eq!(report.judgments_used, 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].0, 0);
    }
}
