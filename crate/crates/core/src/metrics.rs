//! Precision, recall and F1 under the two reporting conventions: plain macro
//! averaging, and the Mastodon convention (neutral sentiment left out of the
//! sentiment average, act scores weighted by gold prevalence).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// gold count
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    #[default]
    #[serde(rename = "macro")]
    Macro,
    #[serde(rename = "ignore-neutral-weighted", alias = "mastodon")]
    IgnoreNeutralWeighted,
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Convention::Macro),
            "ignore-neutral-weighted" | "mastodon" => Ok(Convention::IgnoreNeutralWeighted),
            other => Err(Error::Config(format!(
                "unknown metric convention {other:?} (expected macro or ignore-neutral-weighted)"
            ))),
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Macro => "macro",
            Convention::IgnoreNeutralWeighted => "ignore-neutral-weighted",
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class scores over every class, plus accuracy. Averages are left at 0.
pub fn per_class_scores(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<TaskMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![preds.len()],
            rhs: vec![golds.len()],
        });
    }
    if let Some(&c) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::OutOfRange {
            what: "class",
            index: c,
            size: n_classes,
        });
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut gold_count = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let per_class = (0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], pred_count[c]);
            let recall = ratio(tp[c], gold_count[c]);
            ClassScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: gold_count[c],
            }
        })
        .collect();
    Ok(TaskMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        accuracy: ratio(tp.iter().sum(), preds.len()),
        per_class,
    })
}

fn average(m: &mut TaskMetrics, weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    let avg = |f: fn(&ClassScores) -> f64| {
        if total == 0.0 {
            0.0
        } else {
            m.per_class
                .iter()
                .zip(weights)
                .map(|(c, w)| w * f(c))
                .sum::<f64>()
                / total
        }
    };
    m.precision = avg(|c| c.precision);
    m.recall = avg(|c| c.recall);
    m.f1 = avg(|c| c.f1);
}

/// Unweighted mean of per-class P/R/F1 over all `n_classes` classes, with
/// `0/0 = 0`.
pub fn macro_prf(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<TaskMetrics> {
    let mut m = per_class_scores(preds, golds, n_classes)?;
    average(&mut m, &vec![1.0; n_classes]);
    Ok(m)
}

/// Macro average over every class except `excluded`. Utterances of the
/// excluded class still count in the confusion matrix.
pub fn macro_prf_excluding(
    preds: &[usize],
    golds: &[usize],
    n_classes: usize,
    excluded: usize,
) -> Result<TaskMetrics> {
    let mut m = per_class_scores(preds, golds, n_classes)?;
    let w: Vec<f64> = (0..n_classes)
        .map(|c| if c == excluded { 0.0 } else { 1.0 })
        .collect();
    average(&mut m, &w);
    Ok(m)
}

/// Per-class P/R/F1 averaged with weights equal to each class's gold count.
pub fn weighted_prf(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<TaskMetrics> {
    let mut m = per_class_scores(preds, golds, n_classes)?;
    let w: Vec<f64> = m.per_class.iter().map(|c| c.support as f64).collect();
    average(&mut m, &w);
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sentiment: TaskMetrics,
    pub act: TaskMetrics,
}

impl Metrics {
    pub fn avg_f1(&self) -> f64 {
        (self.sentiment.f1 + self.act.f1) / 2.0
    }
}

/// Sentiment: macro over non-neutral classes (plain macro if there is no
/// neutral class). Acts: prevalence-weighted.
#[allow(clippy::too_many_arguments)]
pub fn mastodon_metrics(
    preds_s: &[usize],
    golds_s: &[usize],
    preds_a: &[usize],
    golds_a: &[usize],
    neutral: Option<usize>,
    n_sentiments: usize,
    n_acts: usize,
) -> Result<Metrics> {
    let sentiment = match neutral {
        Some(n) if n < n_sentiments => macro_prf_excluding(preds_s, golds_s, n_sentiments, n)?,
        Some(n) => {
            return Err(Error::OutOfRange {
                what: "neutral class",
                index: n,
                size: n_sentiments,
            })
        }
        None => macro_prf(preds_s, golds_s, n_sentiments)?,
    };
    Ok(Metrics {
        sentiment,
        act: weighted_prf(preds_a, golds_a, n_acts)?,
    })
}

/// Scores both tasks under `convention`.
#[allow(clippy::too_many_arguments)]
pub fn score(
    convention: Convention,
    preds_s: &[usize],
    golds_s: &[usize],
    preds_a: &[usize],
    golds_a: &[usize],
    neutral: Option<usize>,
    n_sentiments: usize,
    n_acts: usize,
) -> Result<Metrics> {
    match convention {
        Convention::Macro => Ok(Metrics {
            sentiment: macro_prf(preds_s, golds_s, n_sentiments)?,
            act: macro_prf(preds_a, golds_a, n_acts)?,
        }),
        Convention::IgnoreNeutralWeighted => mastodon_metrics(
            preds_s,
            golds_s,
            preds_a,
            golds_a,
            neutral,
            n_sentiments,
            n_acts,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g = [0, 1, 2, 1];
        let m = macro_prf(&g, &g, 3).unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        let mm = mastodon_metrics(&g, &g, &g, &g, Some(1), 3, 3).unwrap();
        assert_eq!((mm.sentiment.f1, mm.act.f1), (1.0, 1.0));
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let m = macro_prf(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn length_mismatch() {
        assert!(macro_prf(&[0], &[0, 1], 2).is_err());
        assert!(macro_prf(&[2], &[0], 2).is_err());
    }

    #[test]
    fn neutral_class_left_out_of_sentiment_average() {
        // the only mistake is a neutral utterance tagged neutral → negative
        let golds = [0, 1, 1, 2, 2];
        let preds = [0, 1, 0, 2, 2];
        let m = macro_prf_excluding(&preds, &golds, 3, 1).unwrap();
        assert!(m.per_class[1].f1 < 1.0);
        let expected = (m.per_class[0].f1 + m.per_class[2].f1) / 2.0;
        assert_eq!(m.f1, expected);
        assert_eq!(m.per_class[2].f1, 1.0);
    }

    #[test]
    fn prevalence_weighted_acts() {
        // class 0: P 3/4, R 1 -> F1 6/7; class 1 never predicted
        let m = weighted_prf(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
        assert!((m.per_class[0].f1 - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!((m.f1 - 0.75 * 6.0 / 7.0).abs() < 1e-12);
        assert!((m.f1 - 0.643).abs() < 5e-4);
    }

    #[test]
    fn convention_parsing() {
        assert_eq!("macro".parse::<Convention>().unwrap(), Convention::Macro);
        assert_eq!(
            "ignore-neutral-weighted".parse::<Convention>().unwrap(),
            Convention::IgnoreNeutralWeighted
        );
        assert!("micro".parse::<Convention>().is_err());
    }
}
