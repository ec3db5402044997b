//! Dataset statistics and model scores.
//!
//! The validated model error rate (vMER) counts examples whose fooling
//! verdict was confirmed by validators (`verified_fooling`) over every example
//! collected for the task. Model scores are computed per round and folded
//! into one number with a recency discount, so older rounds keep counting.

use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::anonymize::Pseudonymizer;
use crate::error::{Error, Result};
use crate::fooling::{argmax_label, normalize_answer, token_f1};
use crate::model::{Example, LifecycleState, ModelPrediction, TaskId, TaskType};
use crate::storage::Store;

pub const BADGE_THRESHOLDS: [u64; 3] = [1, 10, 100];

/// An exact error ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vmer {
    pub errors: u64,
    pub total: u64,
}

impl Vmer {
    pub fn rate(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }

    /// Hundredths of a percent, rounded half up in integer arithmetic.
    pub fn basis_points(&self) -> u64 {
        (self.errors * 20_000 + self.total) / (2 * self.total)
    }

    /// Percentage with two decimals, e.g. `43.90%`.
    pub fn percent(&self) -> String {
        let bp = self.basis_points();
        format!("{}.{:02}%", bp / 100, bp % 100)
    }
}

impl fmt::Display for Vmer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.percent())
    }
}

pub fn vmer(n_verified_errors: u64, n_total_examples: u64) -> Result<Vmer> {
    if n_total_examples == 0 {
        return Err(Error::EmptyDataset);
    }
    if n_verified_errors > n_total_examples {
        return Err(Error::CountExceedsTotal {
            errors: n_verified_errors,
            total: n_total_examples,
        });
    }
    Ok(Vmer {
        errors: n_verified_errors,
        total: n_total_examples,
    })
}

pub fn is_model_error(example: &Example) -> bool {
    example.state == LifecycleState::VerifiedFooling
}

pub fn vmer_of<'a, I>(examples: I) -> Result<Vmer>
where
    I: IntoIterator<Item = &'a Example>,
{
    let (errors, total) = examples
        .into_iter()
        .fold((0u64, 0u64), |(e, t), ex| (e + is_model_error(ex) as u64, t + 1));
    vmer(errors, total)
}

/// One row of the per-task statistics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub task: String,
    pub rounds: usize,
    pub examples: u64,
    pub verified_errors: u64,
    /// Two-decimal percentage, or `n/a` for an empty dataset.
    pub vmer: String,
}

impl DatasetStats {
    pub fn header() -> String {
        format!("{:<16} {:>7} {:>10} {:>8}", "Task", "Rounds", "Examples", "vMER")
    }

    pub fn row(&self) -> String {
        format!(
            "{:<16} {:>7} {:>10} {:>8}",
            self.task,
            self.rounds,
            group_thousands(self.examples),
            self.vmer
        )
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn dataset_stats(store: &Store, task_id: TaskId) -> Result<DatasetStats> {
    let task = store.task(task_id)?;
    let rounds = store.rounds_for_task(task_id).len();
    let examples = store.list_by_task(task_id);
    let (verified_errors, vmer_text) = match vmer_of(&examples) {
        Ok(v) => (v.errors, v.percent()),
        Err(Error::EmptyDataset) => (0, "n/a".to_owned()),
        Err(e) => return Err(e),
    };
    Ok(DatasetStats {
        task: task.name,
        rounds,
        examples: examples.len() as u64,
        verified_errors,
        vmer: vmer_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundScore {
    pub round_index: u32,
    pub n_examples: usize,
    /// Accuracy for classification, mean token F1 for span tasks.
    pub metric_value: f64,
}

/// Gold answer for scoring a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Label(String),
    Span(String),
}

pub fn round_accuracy(
    round_index: u32,
    predictions: &[ModelPrediction],
    golds: &[Gold],
    task_type: TaskType,
    label_set: &[String],
) -> Result<RoundScore> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for (pred, gold) in predictions.iter().zip(golds) {
        total += match (task_type, gold, &pred.payload) {
            (TaskType::Classification, Gold::Label(label), _) => {
                let dist = pred.label_probs().ok_or_else(|| {
                    Error::InvalidInput("classification score needs label probabilities".into())
                })?;
                (argmax_label(label_set, dist) == Some(label.as_str())) as u8 as f64
            }
            (TaskType::SpanExtraction, Gold::Span(text), _) => {
                let answer = pred.answer().ok_or_else(|| {
                    Error::InvalidInput("span score needs an answer span".into())
                })?;
                token_f1(&normalize_answer(text), &normalize_answer(&answer.text))
            }
            _ => return Err(Error::InvalidInput("gold kind does not match task type".into())),
        };
    }
    Ok(RoundScore {
        round_index,
        n_examples: predictions.len(),
        metric_value: total / predictions.len() as f64,
    })
}

/// Recency-discounted mean: round `r` of `R` gets weight `gamma^(R - r)`.
pub fn aggregate_score(per_round: &[RoundScore], gamma: f64) -> Result<f64> {
    if per_round.is_empty() {
        return Err(Error::Empty);
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    if per_round.windows(2).any(|w| w[0].round_index >= w[1].round_index) {
        return Err(Error::InvalidInput("rounds must be sorted ascending by index".into()));
    }
    let n = per_round.len() as i32;
    let (mut num, mut den) = (0.0, 0.0);
    for (pos, score) in per_round.iter().enumerate() {
        let w = gamma.powi(n - 1 - pos as i32);
        num += w * score.metric_value;
        den += w;
    }
    let lo = per_round.iter().map(|s| s.metric_value).fold(f64::INFINITY, f64::min);
    let hi = per_round.iter().map(|s| s.metric_value).fold(f64::NEG_INFINITY, f64::max);
    // A convex combination stays within [lo, hi]; the clamp only absorbs rounding.
    Ok((num / den).clamp(lo, hi))
}

/// Affine rescaling sending `initial` to -1 and `human` to 0.
pub fn normalize_saturation(score: f64, initial: f64, human: f64) -> Result<f64> {
    if human == initial {
        return Err(Error::Degenerate);
    }
    Ok((score - human) / (human - initial))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub annotator: String,
    pub verified_fooling: u64,
    pub badges: Vec<u64>,
    /// When the current count was reached.
    pub achieved_at: DateTime<Utc>,
}

pub fn badges_for(count: u64) -> Vec<u64> {
    BADGE_THRESHOLDS.iter().copied().filter(|&t| count >= t).collect()
}

/// Annotators ranked by verified model-fooling examples. Ties go to whoever
/// reached the count first.
pub fn user_leaderboard<'a, I>(examples: I, pseudonyms: &Pseudonymizer) -> Vec<LeaderboardEntry>
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut per_user: HashMap<&str, (u64, DateTime<Utc>)> = HashMap::new();
    for ex in examples.into_iter().filter(|e| is_model_error(e)) {
        let at = ex.resolved_at.unwrap_or(ex.created_at);
        let entry = per_user.entry(&ex.annotator_id).or_insert((0, at));
        entry.0 += 1;
        entry.1 = entry.1.max(at);
    }
    let mut rows: Vec<(String, u64, DateTime<Utc>)> = per_user
        .into_iter()
        .map(|(id, (n, at))| (pseudonyms.pseudonym(id), n, at))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then_with(|| a.0.cmp(&b.0)));
    rows.into_iter()
        .enumerate()
        .map(|(i, (annotator, n, at))| LeaderboardEntry {
            rank: i + 1,
            annotator,
            verified_fooling: n,
            badges: badges_for(n),
            achieved_at: at,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap()
    }

    fn ex(id: u64, who: &str, state: LifecycleState, minutes: i64) -> Example {
        Example {
            example_id: ExampleId(id),
            round_id: RoundId(1),
            task_id: TaskId(1),
            annotator_id: who.into(),
            context_id: None,
            inputs: ExampleInputs::Hate {
                text: "t".into(),
                label: "hateful".into(),
                target_group: None,
                statement_type: None,
            },
            predictions: vec![],
            verdict: FoolingVerdict {
                per_endpoint: vec![true],
                combined: true,
                policy_used: EnsemblePolicy::All,
                f1: None,
            },
            state,
            explanations: Explanations::default(),
            parent_example_id: None,
            parent_edit_distance: None,
            provenance: Provenance::Native,
            created_at: t0(),
            resolved_at: Some(t0() + Duration::minutes(minutes)),
        }
    }

    fn probs(pairs: &[(&str, f64)]) -> ModelPrediction {
        ModelPrediction {
            endpoint_id: "m".into(),
            payload: PredictionPayload::LabelProbs(
                pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            ),
            attributions: None,
            latency_ms: 0,
        }
    }

    fn answer(text: &str) -> ModelPrediction {
        ModelPrediction {
            endpoint_id: "m".into(),
            payload: PredictionPayload::Answer(PredictedAnswer {
                text: text.into(),
                char_start: 0,
                char_end: text.chars().count(),
                confidence: 1.0,
            }),
            attributions: None,
            latency_ms: 0,
        }
    }

    fn rs(index: u32, v: f64) -> RoundScore {
        RoundScore {
            round_index: index,
            n_examples: 1,
            metric_value: v,
        }
    }

    #[test]
    fn vmer_examples() {
        assert_eq!(vmer(439, 1000).unwrap().percent(), "43.90%");
        assert_eq!(vmer(0, 500).unwrap().percent(), "0.00%");
        assert_eq!(vmer(67, 200).unwrap().percent(), "33.50%");
        assert_eq!(vmer(18, 41).unwrap().percent(), "43.90%");
        assert_eq!(vmer(7, 20).unwrap().percent(), "35.00%");
        assert_eq!(vmer(1, 1).unwrap().percent(), "100.00%");
        // 1/3 = 33.333.. -> 33.33, 2/3 = 66.666.. -> 66.67
        assert_eq!(vmer(1, 3).unwrap().percent(), "33.33%");
        assert_eq!(vmer(2, 3).unwrap().percent(), "66.67%");
        assert!(matches!(vmer(0, 0), Err(Error::EmptyDataset)));
        assert!(matches!(vmer(3, 2), Err(Error::CountExceedsTotal { .. })));
    }

    #[test]
    fn only_verified_fooling_counts() {
        let examples = vec![
            ex(1, "a", LifecycleState::VerifiedFooling, 0),
            ex(2, "a", LifecycleState::PendingValidation, 0),
            ex(3, "a", LifecycleState::Rejected, 0),
            ex(4, "a", LifecycleState::VerifiedNotFooling, 0),
        ];
        assert_eq!(vmer_of(&examples).unwrap(), Vmer { errors: 1, total: 4 });
    }

    #[test]
    fn stats_row_format() {
        let s = DatasetStats {
            task: "Hate speech".into(),
            rounds: 4,
            examples: 41_255,
            verified_errors: 18_111,
            vmer: "43.90%".into(),
        };
        assert!(s.row().contains("41,255"));
        assert!(s.row().ends_with("43.90%"));
        assert_eq!(group_thousands(170_294), "170,294");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
    }

    #[test]
    fn classification_accuracy() {
        let ls: Vec<String> = ["pos", "neg"].iter().map(|s| s.to_string()).collect();
        let preds: Vec<ModelPrediction> = (0..10).map(|_| probs(&[("pos", 0.8), ("neg", 0.2)])).collect();
        let golds: Vec<Gold> = (0..10)
            .map(|i| Gold::Label(if i < 5 { "pos" } else { "neg" }.into()))
            .collect();
        let score = round_accuracy(1, &preds, &golds, TaskType::Classification, &ls).unwrap();
        assert_eq!(score.metric_value, 0.5);
        assert_eq!(score.n_examples, 10);

        let all_right: Vec<Gold> = (0..10).map(|_| Gold::Label("pos".into())).collect();
        assert_eq!(
            round_accuracy(1, &preds, &all_right, TaskType::Classification, &ls)
                .unwrap()
                .metric_value,
            1.0
        );
    }

    #[test]
    fn span_accuracy_is_mean_f1() {
        // pairs from the fooling examples: 1.0, 0.0, 0.8 -> mean 0.6
        let preds = vec![answer("red car"), answer("the harbor"), answer("red car keys")];
        let golds = vec![
            Gold::Span("the red car".into()),
            Gold::Span("1912".into()),
            Gold::Span("red car".into()),
        ];
        let score = round_accuracy(2, &preds, &golds, TaskType::SpanExtraction, &[]).unwrap();
        assert!((score.metric_value - (1.0 + 0.0 + 0.8) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_errors() {
        assert!(matches!(
            round_accuracy(1, &[answer("x")], &[], TaskType::SpanExtraction, &[]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            round_accuracy(1, &[], &[], TaskType::SpanExtraction, &[]),
            Err(Error::Empty)
        ));
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_score(&[rs(1, 0.9), rs(2, 0.5)], 1.0).unwrap() - 0.7).abs() < 1e-15);
        let discounted = aggregate_score(&[rs(1, 0.9), rs(2, 0.5)], 0.5).unwrap();
        assert!((discounted - (0.5 * 0.9 + 0.5) / 1.5).abs() < 1e-15);
        assert_eq!(aggregate_score(&[rs(1, 0.42)], 0.3).unwrap(), 0.42);
        assert!(matches!(aggregate_score(&[], 1.0), Err(Error::Empty)));
        assert!(matches!(aggregate_score(&[rs(1, 0.1)], 0.0), Err(Error::GammaOutOfRange(_))));
        assert!(matches!(aggregate_score(&[rs(1, 0.1)], 1.5), Err(Error::GammaOutOfRange(_))));
        assert!(aggregate_score(&[rs(2, 0.1), rs(1, 0.2)], 1.0).is_err());
    }

    #[test]
    fn saturation_examples() {
        assert_eq!(normalize_saturation(0.5, 0.5, 0.9).unwrap(), -1.0);
        assert_eq!(normalize_saturation(0.9, 0.5, 0.9).unwrap(), 0.0);
        assert!((normalize_saturation(0.95, 0.5, 0.9).unwrap() - 0.125).abs() < 1e-12);
        assert!(matches!(normalize_saturation(0.1, 0.5, 0.5), Err(Error::Degenerate)));
    }

    #[test]
    fn leaderboard_ordering_and_badges() {
        let p = Pseudonymizer::new(b"s".to_vec());
        let mut examples = vec![
            ex(1, "ann", LifecycleState::VerifiedFooling, 1),
            ex(2, "ann", LifecycleState::VerifiedFooling, 2),
            ex(3, "ann", LifecycleState::VerifiedFooling, 3),
            ex(4, "bo", LifecycleState::VerifiedFooling, 1),
            ex(5, "bo", LifecycleState::PendingValidation, 1),
            ex(6, "cy", LifecycleState::PendingValidation, 1),
        ];
        let board = user_leaderboard(&examples, &p);
        assert_eq!(board.len(), 2);
        assert_eq!(board[0].annotator, p.pseudonym("ann"));
        assert_eq!(board[0].verified_fooling, 3);
        assert_eq!(board[1].verified_fooling, 1);
        assert_eq!(board[0].badges, vec![1]);

        examples.reverse();
        assert_eq!(user_leaderboard(&examples, &p), board);

        assert_eq!(badges_for(12), vec![1, 10]);
        assert_eq!(badges_for(0), Vec::<u64>::new());
        assert_eq!(badges_for(100), vec![1, 10, 100]);
    }

    #[test]
    fn leaderboard_ties_go_to_earliest() {
        let p = Pseudonymizer::new(b"s".to_vec());
        let examples = vec![
            ex(1, "late", LifecycleState::VerifiedFooling, 9),
            ex(2, "early", LifecycleState::VerifiedFooling, 4),
        ];
        let board = user_leaderboard(&examples, &p);
        assert_eq!(board[0].annotator, p.pseudonym("early"));
        assert_eq!(board[1].rank, 2);
    }

    proptest! {
        #[test]
        fn vmer_monotone_in_errors(total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            let (x, y) = (vmer(lo, total).unwrap(), vmer(hi, total).unwrap());
            prop_assert!(x.rate() <= y.rate());
            prop_assert!((0.0..=1.0).contains(&y.rate()));
        }

        #[test]
        fn aggregate_within_range(
            values in proptest::collection::vec(0.0f64..=1.0, 1..8),
            gamma in 0.001f64..=1.0,
        ) {
            let scores: Vec<RoundScore> =
                values.iter().enumerate().map(|(i, v)| rs(i as u32 + 1, *v)).collect();
            let agg = aggregate_score(&scores, gamma).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= agg && agg <= hi);
            // continuity: a tiny change in gamma moves the score a tiny amount
            let nudged = aggregate_score(&scores, (gamma * (1.0 - 1e-9)).max(1e-12)).unwrap();
            prop_assert!((agg - nudged).abs() < 1e-6);
        }

        #[test]
        fn saturation_is_affine(initial in -10.0f64..10.0, human in -10.0f64..10.0, t in -2.0f64..2.0) {
            prop_assume!((human - initial).abs() > 1e-6);
            prop_assert_eq!(normalize_saturation(initial, initial, human).unwrap(), -1.0);
            prop_assert_eq!(normalize_saturation(human, initial, human).unwrap(), 0.0);
            let score = initial + t * (human - initial);
            let got = normalize_saturation(score, initial, human).unwrap();
            prop_assert!((got - (t - 1.0)).abs() < 1e-9);
        }
    }
}
