use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, PredictionOutcome, PredictionRecord};
use crate::dataset::InstanceRobotKey;
use crate::parser::{ExtractionTier, FailureReason};
use crate::prompt::{PromptStrategy, QueryMode};
use crate::rating::TraversabilityRating;

/// Gold × predicted counts, plus failures per gold class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[gold][pred]`, both as class index 0..4.
    pub matrix: [[u64; 4]; 4],
    pub failures: [u64; 4],
}

impl Confusion {
    pub fn add(&mut self, gold: TraversabilityRating, outcome: &PredictionOutcome) {
        match outcome.rating() {
            Some(pred) => self.matrix[gold.index()][pred.index()] += 1,
            None => self.failures[gold.index()] += 1,
        }
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.matrix[class].iter().sum()
    }

    pub fn column_total(&self, class: usize) -> u64 {
        self.matrix.iter().map(|row| row[class]).sum()
    }

    /// Gold-class count, failures included.
    pub fn support(&self, class: usize) -> u64 {
        self.row_total(class) + self.failures[class]
    }

    pub fn parsed(&self) -> u64 {
        (0..4).map(|c| self.row_total(c)).sum()
    }

    pub fn failed(&self) -> u64 {
        self.failures.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.parsed() + self.failed()
    }

    pub fn correct(&self) -> u64 {
        (0..4).map(|c| self.matrix[c][c]).sum()
    }
}

/// Tally predictions against gold labels. Every missing gold label is listed
/// in the error.
pub fn confusion(
    preds: &[PredictionRecord],
    gold: &BTreeMap<InstanceRobotKey, TraversabilityRating>,
) -> Result<Confusion, EvalError> {
    let mut c = Confusion::default();
    let mut missing = BTreeSet::new();
    for p in preds {
        let key = p.key();
        match gold.get(&key) {
            Some(&g) => c.add(g, &p.outcome),
            None => {
                missing.insert(key);
            }
        }
    }
    if missing.is_empty() {
        Ok(c)
    } else {
        Err(EvalError::MissingGold(missing.into_iter().collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub rating: TraversabilityRating,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores in rating order and their unweighted mean F1.
pub fn per_class_f1(c: &Confusion) -> (Vec<ClassScores>, f64) {
    let scores: Vec<ClassScores> = TraversabilityRating::ALL
        .iter()
        .map(|&rating| {
            let k = rating.index();
            let tp = c.matrix[k][k];
            let precision = ratio(tp, c.column_total(k));
            let recall = ratio(tp, c.support(k));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                rating,
                precision,
                recall,
                f1,
                support: c.support(k),
            }
        })
        .collect();
    let macro_f1 = scores.iter().map(|s| s.f1).sum::<f64>() / 4.0;
    (scores, macro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    Model,
    Strategy,
    Temperature,
    Robot,
    QueryMode,
}

impl GroupAxis {
    pub const ALL: [GroupAxis; 5] = [
        GroupAxis::Model,
        GroupAxis::Strategy,
        GroupAxis::Temperature,
        GroupAxis::Robot,
        GroupAxis::QueryMode,
    ];

    /// Axes used when none are requested.
    pub const DEFAULT: [GroupAxis; 3] = [GroupAxis::Model, GroupAxis::Strategy, GroupAxis::Temperature];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupAxis::Model => "model",
            GroupAxis::Strategy => "strategy",
            GroupAxis::Temperature => "temperature",
            GroupAxis::Robot => "robot",
            GroupAxis::QueryMode => "query_mode",
        }
    }
}

impl FromStr for GroupAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown group axis `{s}`"))
    }
}

/// Values of the grouped axes; `None` for axes not grouped on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupKey {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<PromptStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robot: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_mode: Option<QueryMode>,
}

impl GroupKey {
    pub fn of(record: &PredictionRecord, axes: &[GroupAxis]) -> Self {
        let mut key = GroupKey::default();
        for axis in axes {
            match axis {
                GroupAxis::Model => key.model = Some(record.model_tag.clone()),
                GroupAxis::Strategy => key.strategy = Some(record.strategy),
                GroupAxis::Temperature => key.temperature = Some(record.temperature),
                GroupAxis::Robot => key.robot = Some(record.robot_id.clone()),
                GroupAxis::QueryMode => key.query_mode = Some(record.query_mode),
            }
        }
        key
    }
}

impl Eq for GroupKey {}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        let temp = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => a.total_cmp(&b),
            (a, b) => a.is_some().cmp(&b.is_some()),
        };
        self.model
            .cmp(&other.model)
            .then(self.strategy.cmp(&other.strategy))
            .then(temp(self.temperature, other.temperature))
            .then(self.robot.cmp(&other.robot))
            .then(self.query_mode.cmp(&other.query_mode))
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(m) = &self.model {
            parts.push(format!("model={m}"));
        }
        if let Some(s) = self.strategy {
            parts.push(format!("strategy={s}"));
        }
        if let Some(t) = self.temperature {
            parts.push(format!("temperature={t}"));
        }
        if let Some(r) = &self.robot {
            parts.push(format!("robot={r}"));
        }
        if let Some(q) = self.query_mode {
            parts.push(format!("query_mode={q}"));
        }
        if parts.is_empty() {
            f.write_str("all")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub group: GroupKey,
    pub n_predictions: u64,
    pub confusion: Confusion,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub failure_rate: f64,
    /// Correct / all predictions; failures count as wrong.
    pub accuracy: f64,
    /// Within one level of gold / all predictions.
    pub off_by_one_accuracy: f64,
    /// Mean absolute error on the 1..4 scale over parsed predictions only.
    pub mae: Option<f64>,
    pub tier_counts: BTreeMap<ExtractionTier, u64>,
    pub failure_counts: BTreeMap<FailureReason, u64>,
}

impl EvaluationReport {
    fn from_group(
        group: GroupKey,
        preds: &[&PredictionRecord],
        gold: &BTreeMap<InstanceRobotKey, TraversabilityRating>,
    ) -> Self {
        let mut c = Confusion::default();
        let mut tier_counts = BTreeMap::new();
        let mut failure_counts = BTreeMap::new();
        let mut abs_err = 0u64;
        let mut near = 0u64;
        for p in preds {
            let g = gold[&p.key()];
            c.add(g, &p.outcome);
            match &p.outcome {
                PredictionOutcome::Rating(r) => {
                    let d = (r.value() as i64 - g.value() as i64).unsigned_abs();
                    abs_err += d;
                    if d <= 1 {
                        near += 1;
                    }
                }
                PredictionOutcome::Failure { reason, .. } => {
                    *failure_counts.entry(*reason).or_insert(0) += 1;
                }
            }
            if let Some(t) = p.extraction_tier {
                *tier_counts.entry(t).or_insert(0) += 1;
            }
        }
        let (per_class, macro_f1) = per_class_f1(&c);
        let n = c.total();
        EvaluationReport {
            group,
            n_predictions: n,
            confusion: c,
            per_class,
            macro_f1,
            failure_rate: ratio(c.failed(), n),
            accuracy: ratio(c.correct(), n),
            off_by_one_accuracy: ratio(near, n),
            mae: (c.parsed() > 0).then(|| abs_err as f64 / c.parsed() as f64),
            tier_counts,
            failure_counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub group: String,
    pub macro_f1: f64,
    pub failure_rate: f64,
    pub n_predictions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedReports {
    pub group_by: Vec<GroupAxis>,
    /// Ordered by group key.
    pub reports: Vec<EvaluationReport>,
    /// Same groups, best macro F1 first; ties keep group order.
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// One report per distinct value of the requested axes.
pub fn group_report(
    preds: &[PredictionRecord],
    gold: &BTreeMap<InstanceRobotKey, TraversabilityRating>,
    group_by: &[GroupAxis],
) -> Result<GroupedReports, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::NoPredictions);
    }
    confusion(preds, gold)?;
    let mut axes: Vec<GroupAxis> = group_by.to_vec();
    axes.sort();
    axes.dedup();
    let mut groups: BTreeMap<GroupKey, Vec<&PredictionRecord>> = BTreeMap::new();
    for p in preds {
        groups.entry(GroupKey::of(p, &axes)).or_default().push(p);
    }
    let reports: Vec<EvaluationReport> = groups
        .into_iter()
        .map(|(k, members)| EvaluationReport::from_group(k, &members, gold))
        .collect();
    let mut leaderboard: Vec<LeaderboardEntry> = reports
        .iter()
        .map(|r| LeaderboardEntry {
            group: r.group.to_string(),
            macro_f1: r.macro_f1,
            failure_rate: r.failure_rate,
            n_predictions: r.n_predictions,
        })
        .collect();
    leaderboard.sort_by(|a, b| b.macro_f1.total_cmp(&a.macro_f1));
    Ok(GroupedReports {
        group_by: axes,
        reports,
        leaderboard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::TraversabilityRating::{self, *};
    use proptest::prelude::*;

    fn rec(i: usize, robot: &str, model: &str, strategy: PromptStrategy, outcome: Option<TraversabilityRating>) -> PredictionRecord {
        PredictionRecord {
            run_id: "r".into(),
            image_id: "img".into(),
            instance_id: format!("inst_{i:02}"),
            robot_id: robot.into(),
            model_tag: model.into(),
            strategy,
            temperature: 0.0,
            query_mode: QueryMode::PerInstanceCrop,
            outcome: match outcome {
                Some(r) => PredictionOutcome::Rating(r),
                None => PredictionOutcome::Failure {
                    reason: FailureReason::NoStructuredOutput,
                    excerpt: String::new(),
                },
            },
            extraction_tier: outcome.map(|_| ExtractionTier::Strict),
            latency_ms: 0,
            attempts: 1,
            parse_attempts: 1,
        }
    }

    fn setup(gold: &[TraversabilityRating], preds: &[Option<TraversabilityRating>]) -> (Vec<PredictionRecord>, BTreeMap<InstanceRobotKey, TraversabilityRating>) {
        let records = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| rec(i, "husky_a200", "m", PromptStrategy::Plain, p))
            .collect::<Vec<_>>();
        let g = records
            .iter()
            .zip(gold)
            .map(|(r, &g)| (r.key(), g))
            .collect();
        (records, g)
    }

    #[test]
    fn worked_example() {
        let (p, g) = setup(&[Smooth, Smooth, Rough, NonNavigable], &[Some(Smooth), Some(Rough), Some(Rough), Some(NonNavigable)]);
        let c = confusion(&p, &g).unwrap();
        assert_eq!(c.matrix[0], [1, 1, 0, 0]);
        assert_eq!(c.matrix[1], [0, 1, 0, 0]);
        assert_eq!(c.matrix[3], [0, 0, 0, 1]);
        let (scores, macro_f1) = per_class_f1(&c);
        // class 1: P = 1/1, R = 1/2; class 2: P = 1/2, R = 1/1; class 3 empty; class 4 perfect
        assert!((scores[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((scores[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(scores[2].f1, 0.0);
        assert_eq!(scores[3].f1, 1.0);
        assert!((macro_f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn all_failed() {
        let (p, g) = setup(&[Rough, Rough], &[None, None]);
        let r = group_report(&p, &g, &[]).unwrap();
        let report = &r.reports[0];
        assert_eq!(report.failure_rate, 1.0);
        assert_eq!(report.per_class[1].f1, 0.0);
        assert_eq!(report.confusion.failures, [0, 2, 0, 0]);
        assert_eq!(report.mae, None);
    }

    #[test]
    fn perfect_run() {
        let gold = [Smooth, Rough, Bumpy, NonNavigable];
        let (p, g) = setup(&gold, &gold.map(Some));
        let r = group_report(&p, &g, &GroupAxis::DEFAULT).unwrap();
        assert_eq!(r.reports[0].macro_f1, 1.0);
        assert_eq!(r.reports[0].mae, Some(0.0));
    }

    #[test]
    fn missing_gold_lists_keys() {
        let (p, mut g) = setup(&[Smooth, Rough], &[Some(Smooth), Some(Rough)]);
        g.remove(&p[1].key());
        match confusion(&p, &g) {
            Err(EvalError::MissingGold(keys)) => assert_eq!(keys, vec![p[1].key()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn product_of_groups() {
        let mut preds = Vec::new();
        let mut gold = BTreeMap::new();
        for (mi, model) in ["a", "b"].iter().enumerate() {
            for (si, strategy) in [PromptStrategy::Plain, PromptStrategy::Cot].into_iter().enumerate() {
                let p = rec(0, "husky_a200", model, strategy, Some(TraversabilityRating::ALL[mi + si]));
                gold.insert(p.key(), Smooth);
                preds.push(p);
            }
        }
        let r = group_report(&preds, &gold, &[GroupAxis::Strategy, GroupAxis::Model]).unwrap();
        assert_eq!(r.reports.len(), 4);
        assert_eq!(r.reports[0].group.to_string(), "model=a strategy=plain");
        assert_eq!(r.leaderboard[0].group, "model=a strategy=plain");
        assert!(r.leaderboard.windows(2).all(|w| w[0].macro_f1 >= w[1].macro_f1));
    }

    #[test]
    fn empty_predictions_rejected() {
        assert!(matches!(group_report(&[], &BTreeMap::new(), &[]), Err(EvalError::NoPredictions)));
    }

    /// Straight-line recomputation from the record list: counts by filtering
    /// for each class instead of going through a matrix.
    fn oracle(preds: &[(TraversabilityRating, Option<TraversabilityRating>)]) -> (Vec<f64>, f64, f64) {
        let mut f1s = Vec::new();
        for c in TraversabilityRating::ALL {
            let tp = preds.iter().filter(|(g, p)| *g == c && *p == Some(c)).count();
            let predicted = preds.iter().filter(|(_, p)| *p == Some(c)).count();
            let actual = preds.iter().filter(|(g, _)| *g == c).count();
            let prec = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let rec = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
            f1s.push(if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) });
        }
        let fails = preds.iter().filter(|(_, p)| p.is_none()).count();
        let macro_f1 = f1s.iter().sum::<f64>() / 4.0;
        (f1s, macro_f1, fails as f64 / preds.len() as f64)
    }

    fn rating() -> impl Strategy<Value = TraversabilityRating> {
        (0usize..4).prop_map(|i| TraversabilityRating::ALL[i])
    }

    proptest! {
        #[test]
        fn matches_oracle_per_group(
            items in prop::collection::vec((rating(), prop::option::weighted(0.8, rating()), 0usize..2, 0usize..2), 1..20)
        ) {
            let models = ["m1", "m2"];
            let strategies = [PromptStrategy::Plain, PromptStrategy::Role];
            let mut preds = Vec::new();
            let mut gold = BTreeMap::new();
            for (i, (g, p, m, s)) in items.iter().enumerate() {
                let r = rec(i, "husky_a200", models[*m], strategies[*s], *p);
                gold.insert(r.key(), *g);
                preds.push(r);
            }
            let out = group_report(&preds, &gold, &[GroupAxis::Model, GroupAxis::Strategy]).unwrap();
            let mut seen = 0;
            for report in &out.reports {
                let members: Vec<_> = items
                    .iter()
                    .filter(|(_, _, m, s)| Some(models[*m].to_string()) == report.group.model && Some(strategies[*s]) == report.group.strategy)
                    .map(|(g, p, _, _)| (*g, *p))
                    .collect();
                seen += members.len();
                let (f1s, macro_f1, fail_rate) = oracle(&members);
                for (s, f) in report.per_class.iter().zip(&f1s) {
                    prop_assert!((s.f1 - f).abs() < 1e-12);
                }
                prop_assert!((report.macro_f1 - macro_f1).abs() < 1e-12);
                prop_assert!((report.failure_rate - fail_rate).abs() < 1e-12);
                let c = &report.confusion;
                prop_assert_eq!(c.total(), members.len() as u64);
                // support-weighted recall recovers the number of correct predictions
                let weighted: f64 = report.per_class.iter().map(|s| s.recall * s.support as f64).sum();
                prop_assert!((weighted - c.correct() as f64).abs() < 1e-9);
                for s in &report.per_class {
                    prop_assert!((0.0..=1.0).contains(&s.precision) && (0.0..=1.0).contains(&s.recall) && (0.0..=1.0).contains(&s.f1));
                }
            }
            prop_assert_eq!(seen, items.len());
        }

        #[test]
        fn permutation_invariant(
            items in prop::collection::vec((rating(), prop::option::weighted(0.8, rating())), 1..30),
            seed in any::<u64>(),
        ) {
            let gold: Vec<_> = items.iter().map(|x| x.0).collect();
            let pred: Vec<_> = items.iter().map(|x| x.1).collect();
            let (p, g) = setup(&gold, &pred);
            let mut shuffled = p.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = group_report(&p, &g, &[]).unwrap();
            let b = group_report(&shuffled, &g, &[]).unwrap();
            prop_assert_eq!(a.reports[0].clone().per_class, b.reports[0].clone().per_class);
        }

        #[test]
        fn adding_failure_never_helps(
            items in prop::collection::vec((rating(), prop::option::weighted(0.8, rating())), 1..20),
            extra_gold in rating(),
        ) {
            let gold: Vec<_> = items.iter().map(|x| x.0).collect();
            let pred: Vec<_> = items.iter().map(|x| x.1).collect();
            let (p, g) = setup(&gold, &pred);
            let before = per_class_f1(&confusion(&p, &g).unwrap()).0;
            let mut gold2 = gold.clone();
            gold2.push(extra_gold);
            let mut pred2 = pred.clone();
            pred2.push(None);
            let (p2, g2) = setup(&gold2, &pred2);
            let after = per_class_f1(&confusion(&p2, &g2).unwrap()).0;
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a.f1 <= b.f1 + 1e-15);
                prop_assert_eq!(a.precision, b.precision);
            }
        }
    }
}
