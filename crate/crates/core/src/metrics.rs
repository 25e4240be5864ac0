//! Answer normalization and QA scoring: exact match, token F1, ROUGE-L
//! and multiple-choice selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatch,
    TokenF1,
    RougeL,
    McAccuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ExactMatch => "exact_match",
            MetricKind::TokenF1 => "token_f1",
            MetricKind::RougeL => "rouge_l",
            MetricKind::McAccuracy => "mc_accuracy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            MetricKind::ExactMatch,
            MetricKind::TokenF1,
            MetricKind::RougeL,
            MetricKind::McAccuracy,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// Score of one generated slot value. A failed slot (missing from the
/// output) always scores 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub value: f64,
    pub failed: bool,
    pub metric: MetricKind,
}

impl SlotScore {
    pub fn failure(metric: MetricKind) -> Self {
        Self {
            value: 0.0,
            failed: true,
            metric,
        }
    }
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// ROUGE tokens: lowercase, no punctuation, articles kept.
fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f_measure(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

fn token_f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, pred.len(), gold.len())
}

fn max_over_golds<S: AsRef<str>>(golds: &[S], f: impl Fn(&str) -> f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::EmptyGolds);
    }
    Ok(golds
        .iter()
        .map(|g| f(g.as_ref()))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Bag-of-tokens F1, maximized over the gold answers.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    let pred = tokens(prediction);
    max_over_golds(golds, |g| token_f1_single(&pred, &tokens(g)))
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based balanced F-measure, maximized over the gold answers.
/// Unlike [`token_f1`], articles count as tokens.
pub fn rouge_l<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    let pred = rouge_tokens(prediction);
    max_over_golds(golds, |g| {
        let gold = rouge_tokens(g);
        f_measure(lcs_len(&pred, &gold), pred.len(), gold.len())
    })
}

pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    let pred = normalize_answer(prediction);
    max_over_golds(golds, |g| f64::from(u8::from(normalize_answer(g) == pred)))
}

/// Splits `(A) gravel (B) sand ...` into labelled options. Labels must run
/// consecutively from `A`.
pub fn parse_mc_options(mcoptions: &str) -> Result<Vec<(char, String)>> {
    let mut starts = Vec::new();
    let mut from = 0;
    for label in 'A'..='Z' {
        let tag = format!("({label}) ");
        match mcoptions[from..].find(&tag) {
            Some(off) => {
                starts.push((label, from + off, from + off + tag.len()));
                from += off + tag.len();
            }
            None => break,
        }
    }
    if starts.len() < 2 {
        return Err(Error::MalformedOptions(mcoptions.to_string()));
    }
    Ok(starts
        .iter()
        .enumerate()
        .map(|(i, &(label, _, body))| {
            let end = starts.get(i + 1).map_or(mcoptions.len(), |n| n.1);
            (label, mcoptions[body..end].trim().to_string())
        })
        .collect())
}

/// Renders options as `(A) t1 (B) t2 ...`.
pub fn render_mc_options<S: AsRef<str>>(texts: &[S]) -> String {
    texts
        .iter()
        .zip('A'..='Z')
        .map(|(t, l)| format!("({l}) {}", t.as_ref().trim()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Picks the option a free-text prediction refers to: an exact normalized
/// match if one exists, else the highest token F1 (earliest label on ties).
pub fn mc_select(prediction: &str, mcoptions: &str) -> Result<char> {
    let options = parse_mc_options(mcoptions)?;
    let norm = normalize_answer(prediction);
    if let Some((label, _)) = options.iter().find(|(_, t)| normalize_answer(t) == norm) {
        return Ok(*label);
    }
    let pred = tokens(prediction);
    let mut best = (options[0].0, f64::NEG_INFINITY);
    for (label, text) in &options {
        let score = token_f1_single(&pred, &tokens(text));
        if score > best.1 {
            best = (*label, score);
        }
    }
    Ok(best.0)
}

/// Scores one predicted slot value. `mcoptions` is required by
/// [`MetricKind::McAccuracy`] only.
pub fn score_slot<S: AsRef<str>>(
    metric: MetricKind,
    prediction: Option<&str>,
    golds: &[S],
    mcoptions: Option<&str>,
) -> Result<SlotScore> {
    let Some(prediction) = prediction else {
        return Ok(SlotScore::failure(metric));
    };
    let value = match metric {
        MetricKind::ExactMatch => exact_match(prediction, golds)?,
        MetricKind::TokenF1 => token_f1(prediction, golds)?,
        MetricKind::RougeL => rouge_l(prediction, golds)?,
        MetricKind::McAccuracy => {
            if golds.is_empty() {
                return Err(Error::EmptyGolds);
            }
            let options = mcoptions.ok_or_else(|| Error::MalformedOptions(String::new()))?;
            let picked = mc_select(prediction, options)?;
            let mut hit = false;
            for g in golds {
                hit |= mc_select(g.as_ref(), options)? == picked;
            }
            f64::from(u8::from(hit))
        }
    };
    Ok(SlotScore {
        value,
        failed: false,
        metric,
    })
}
