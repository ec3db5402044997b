//! Fooling verdicts: did a submission get past the target model?
//!
//! Classification examples fool an endpoint when its argmax label differs from
//! the annotator's claimed label. Span examples fool it when the word-overlap
//! F1 between the gold span and the predicted span falls below the task
//! threshold.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EnsemblePolicy;

/// Normalized answer tokens: lowercase, no punctuation, no articles.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizedAnswer(Vec<String>);

impl TokenizedAnswer {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps already-normalized tokens. Tokens that would not survive
    /// normalization are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TokenizedAnswer(
            tokens
                .into_iter()
                .flat_map(|t| normalize_answer(t.as_ref()).0)
                .collect(),
        )
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip ASCII punctuation, drop English articles, split on whitespace.
pub fn normalize_answer(text: &str) -> TokenizedAnswer {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    TokenizedAnswer(
        cleaned
            .split_whitespace()
            .filter(|t| !ARTICLES.contains(t))
            .map(str::to_owned)
            .collect(),
    )
}

/// Size of the multiset intersection of two token lists.
pub fn token_overlap(gold: &TokenizedAnswer, pred: &TokenizedAnswer) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold.tokens() {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred.tokens() {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

/// Word-overlap F1. Both empty scores 1; exactly one empty scores 0.
pub fn token_f1(gold: &TokenizedAnswer, pred: &TokenizedAnswer) -> f64 {
    match (gold.is_empty(), pred.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let overlap = token_overlap(gold, pred);
    if overlap == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = o/|pred|, R = o/|gold| reduces to 2o/(|pred|+|gold|);
    // one integer division keeps the result correctly rounded.
    (2 * overlap) as f64 / (gold.len() + pred.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanJudgement {
    pub fooled: bool,
    pub f1: f64,
}

/// Fooled when the F1 is strictly below `threshold`.
pub fn judge_span(gold_answer: &str, predicted_answer: &str, threshold: f64) -> SpanJudgement {
    let f1 = token_f1(&normalize_answer(gold_answer), &normalize_answer(predicted_answer));
    SpanJudgement {
        fooled: f1 < threshold,
        f1,
    }
}

/// Highest-probability label, ties going to the earlier label in `label_set`.
/// Labels absent from the distribution count as probability zero.
pub fn argmax_label<'a>(label_set: &'a [String], dist: &BTreeMap<String, f64>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for label in label_set {
        let p = dist.get(label).copied().unwrap_or(0.0);
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((label, p));
        }
    }
    best.map(|(l, _)| l)
}

/// Fooled when the model's argmax label differs from the claimed label.
pub fn judge_classification(
    label_set: &[String],
    claimed_label: &str,
    predicted: &BTreeMap<String, f64>,
) -> Result<bool> {
    if !label_set.iter().any(|l| l == claimed_label) {
        return Err(Error::UnknownLabel(claimed_label.to_owned()));
    }
    if let Some(stray) = predicted.keys().find(|k| !label_set.contains(k)) {
        return Err(Error::UnknownLabel(stray.clone()));
    }
    let top = argmax_label(label_set, predicted).ok_or(Error::EmptyList)?;
    Ok(top != claimed_label)
}

pub fn combine_ensemble(per_endpoint: &[bool], policy: EnsemblePolicy) -> Result<bool> {
    if per_endpoint.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(match policy {
        EnsemblePolicy::All => per_endpoint.iter().all(|&f| f),
        EnsemblePolicy::Any => per_endpoint.iter().any(|&f| f),
        EnsemblePolicy::Majority => {
            let fooled = per_endpoint.iter().filter(|&&f| f).count();
            2 * fooled > per_endpoint.len()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn toks(words: &[&str]) -> TokenizedAnswer {
        TokenizedAnswer::from_tokens(words)
    }

    #[test]
    fn classification_argmax_mismatch_fools() {
        let ls = labels(&["entailment", "contradiction", "neutral"]);
        let d = dist(&[("entailment", 0.7), ("contradiction", 0.2), ("neutral", 0.1)]);
        assert!(judge_classification(&ls, "neutral", &d).unwrap());
    }

    #[test]
    fn classification_argmax_match_does_not_fool() {
        let ls = labels(&["positive", "negative", "neutral"]);
        let d = dist(&[("positive", 0.5), ("negative", 0.3), ("neutral", 0.2)]);
        assert!(!judge_classification(&ls, "positive", &d).unwrap());
    }

    #[test]
    fn classification_tie_breaks_by_label_order() {
        let ls = labels(&["positive", "negative", "neutral"]);
        let d = dist(&[("positive", 0.5), ("negative", 0.5), ("neutral", 0.0)]);
        assert!(judge_classification(&ls, "negative", &d).unwrap());
        assert!(!judge_classification(&ls, "positive", &d).unwrap());

        // Exhaustive check of the tie rule: with every label tied, the winner
        // is always the first label in order, whichever order that is.
        let uniform = dist(&[("positive", 1.0 / 3.0), ("negative", 1.0 / 3.0), ("neutral", 1.0 / 3.0)]);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let order: Vec<String> = p.iter().map(|&i| ls[i].clone()).collect();
            for claimed in &order {
                let fooled = judge_classification(&order, claimed, &uniform).unwrap();
                assert_eq!(fooled, claimed != &order[0]);
            }
        }
    }

    #[test]
    fn classification_unknown_label() {
        let ls = labels(&["a", "b"]);
        let d = dist(&[("a", 1.0)]);
        assert!(matches!(judge_classification(&ls, "c", &d), Err(Error::UnknownLabel(_))));
        let stray = dist(&[("a", 0.5), ("z", 0.5)]);
        assert!(matches!(judge_classification(&ls, "a", &stray), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The red car.").tokens(), ["red", "car"]);
        assert_eq!(normalize_answer("An apple").tokens(), ["apple"]);
        assert!(normalize_answer("").is_empty());
        assert_eq!(normalize_answer("  A   THE an  ").len(), 0);
        assert_eq!(normalize_answer("Théâtre, (1912)!").tokens(), ["théâtre", "1912"]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1(&toks(&["red", "car"]), &toks(&["red", "car"])), 1.0);
        assert_eq!(token_f1(&toks(&["red", "car"]), &toks(&["blue", "keys"])), 0.0);
        // P = 2/3, R = 1 -> 2 * (2/3) / (5/3) = 4/5
        assert_eq!(token_f1(&toks(&["red", "car"]), &toks(&["red", "car", "keys"])), 0.8);
        assert_eq!(token_f1(&toks(&[]), &toks(&[])), 1.0);
        assert_eq!(token_f1(&toks(&["x"]), &toks(&[])), 0.0);
        assert_eq!(token_f1(&toks(&[]), &toks(&["x"])), 0.0);
    }

    #[test]
    fn f1_counts_repeated_tokens_once_per_occurrence() {
        // gold has one "red"; pred has two -> overlap 1, F1 = 2/(1+2)
        assert_eq!(token_f1(&toks(&["red"]), &toks(&["red", "red"])), 2.0 / 3.0);
    }

    #[test]
    fn span_examples() {
        assert_eq!(
            judge_span("the red car", "red car", 0.4),
            SpanJudgement { fooled: false, f1: 1.0 }
        );
        assert_eq!(
            judge_span("1912", "the harbor", 0.4),
            SpanJudgement { fooled: true, f1: 0.0 }
        );
        assert_eq!(
            judge_span("red car", "red car keys", 0.9),
            SpanJudgement { fooled: true, f1: 0.8 }
        );
        // strict inequality at the boundary
        assert!(!judge_span("red car", "red car keys", 0.8).fooled);
    }

    #[test]
    fn ensemble_examples() {
        assert!(combine_ensemble(&[true, true], EnsemblePolicy::All).unwrap());
        assert!(!combine_ensemble(&[true, false], EnsemblePolicy::All).unwrap());
        assert!(combine_ensemble(&[true, false], EnsemblePolicy::Any).unwrap());
        assert!(!combine_ensemble(&[true, false], EnsemblePolicy::Majority).unwrap());
        assert!(matches!(combine_ensemble(&[], EnsemblePolicy::Any), Err(Error::EmptyList)));
    }

    #[test]
    fn majority_over_every_three_member_vector() {
        for bits in 0u32..8 {
            let v: Vec<bool> = (0..3).map(|i| bits >> i & 1 == 1).collect();
            let expected = bits.count_ones() >= 2;
            assert_eq!(combine_ensemble(&v, EnsemblePolicy::Majority).unwrap(), expected, "{v:?}");
        }
        assert!(combine_ensemble(&[true, true, false], EnsemblePolicy::Majority).unwrap());
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_bounded(
            a in proptest::collection::vec("[a-e]{1,2}", 0..8),
            b in proptest::collection::vec("[a-e]{1,2}", 0..8),
        ) {
            let (a, b) = (TokenizedAnswer::from_tokens(&a), TokenizedAnswer::from_tokens(&b));
            let ab = token_f1(&a, &b);
            prop_assert_eq!(ab, token_f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn argmax_invariant_under_rescaling(
            ps in proptest::collection::vec(0.0f64..1.0, 3),
            scale in 0.01f64..100.0,
            claimed in 0usize..3,
        ) {
            let ls = labels(&["x", "y", "z"]);
            let sum: f64 = ps.iter().sum::<f64>().max(1e-9);
            let d: BTreeMap<String, f64> = ls.iter().cloned().zip(ps.iter().map(|p| p / sum)).collect();
            let scaled: Vec<f64> = ps.iter().map(|p| p * scale).collect();
            let ssum: f64 = scaled.iter().sum::<f64>().max(1e-9);
            let d2: BTreeMap<String, f64> =
                ls.iter().cloned().zip(scaled.iter().map(|p| p / ssum)).collect();
            // Rescaling can perturb the last bit, so only compare when the top
            // two are clearly apart.
            let mut sorted = ps.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(
                judge_classification(&ls, &ls[claimed], &d).unwrap(),
                judge_classification(&ls, &ls[claimed], &d2).unwrap()
            );
        }
    }
}
