//! Recovery of a rating dictionary from raw model text.
//!
//! Tiers are tried in a fixed order and the first one that yields a complete,
//! valid mapping wins:
//!
//! 1. `strict`: the whole trimmed text is one JSON object;
//! 2. `fenced`: a JSON object inside a triple-backtick block;
//! 3. `embedded`: the first balanced `{...}` substring that parses as an object;
//! 4. `regex`: single-key queries only, `rating` or the key followed by a
//!    separator and a number (the last such mention wins). Skipped when an
//!    earlier tier found a JSON object that failed validation.
//!
//! When no tier succeeds, the failure found by the earliest tier that located a
//! candidate is reported; `no_structured_output` means no tier found anything.
//! Values are never coerced: `2.5` is `non_integer`, `5` is `out_of_range`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rating::TraversabilityRating;

pub const EXCERPT_CHARS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionTier {
    Strict,
    Fenced,
    Embedded,
    Regex,
}

impl ExtractionTier {
    pub const ALL: [ExtractionTier; 4] = [
        ExtractionTier::Strict,
        ExtractionTier::Fenced,
        ExtractionTier::Embedded,
        ExtractionTier::Regex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionTier::Strict => "strict",
            ExtractionTier::Fenced => "fenced",
            ExtractionTier::Embedded => "embedded",
            ExtractionTier::Regex => "regex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoStructuredOutput,
    MissingKey,
    OutOfRange,
    NonInteger,
    ContradictoryDuplicates,
}

impl FailureReason {
    pub const ALL: [FailureReason; 5] = [
        FailureReason::NoStructuredOutput,
        FailureReason::MissingKey,
        FailureReason::OutOfRange,
        FailureReason::NonInteger,
        FailureReason::ContradictoryDuplicates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::NoStructuredOutput => "no_structured_output",
            FailureReason::MissingKey => "missing_key",
            FailureReason::OutOfRange => "out_of_range",
            FailureReason::NonInteger => "non_integer",
            FailureReason::ContradictoryDuplicates => "contradictory_duplicates",
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRating {
    pub ratings: BTreeMap<String, TraversabilityRating>,
    pub extraction_tier: ExtractionTier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: FailureReason,
    /// Tier whose candidate produced the failure, if any tier found one.
    pub tier: Option<ExtractionTier>,
    /// Offending key, when the failure is about one key.
    pub key: Option<String>,
    /// First 500 characters of the raw text.
    pub excerpt: String,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.reason)?;
        if let Some(k) = &self.key {
            write!(f, " (key {k})")?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseFailure {}

pub fn excerpt(text: &str) -> String {
    text.chars().take(EXCERPT_CHARS).collect()
}

/// Top-level JSON object keeping every member, duplicates included.
struct MemberList(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for MemberList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MembersVisitor;

        impl<'de> Visitor<'de> for MembersVisitor {
            type Value = MemberList;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<MemberList, A::Error> {
                let mut members = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    members.push((k, v));
                }
                Ok(MemberList(members))
            }
        }

        deserializer.deserialize_map(MembersVisitor)
    }
}

fn parse_object(text: &str) -> Option<Vec<(String, Value)>> {
    serde_json::from_str::<MemberList>(text).ok().map(|m| m.0)
}

enum ValueError {
    NonInteger,
    OutOfRange,
}

fn integer_of(value: &Value) -> Result<i64, ValueError> {
    match value {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(i)
            } else if let Some(u) = n.as_u64() {
                Ok(i64::try_from(u).unwrap_or(i64::MAX))
            } else {
                let f = n.as_f64().ok_or(ValueError::NonInteger)?;
                if f.fract() == 0.0 && f.abs() < 1e15 {
                    Ok(f as i64)
                } else {
                    Err(ValueError::NonInteger)
                }
            }
        }
        Value::String(s) => s.trim().parse::<i64>().map_err(|_| ValueError::NonInteger),
        _ => Err(ValueError::NonInteger),
    }
}

fn rating_of(value: &Value) -> Result<TraversabilityRating, ValueError> {
    let i = integer_of(value)?;
    TraversabilityRating::new(i).map_err(|_| ValueError::OutOfRange)
}

type Outcome = Result<ParsedRating, (FailureReason, Option<String>)>;

fn evaluate_members(members: &[(String, Value)], keys: &[String], tier: ExtractionTier) -> Outcome {
    let mut ratings = BTreeMap::new();
    for key in keys {
        let values: Vec<&Value> = members
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v)
            .collect();
        if values.is_empty() {
            return Err((FailureReason::MissingKey, Some(key.clone())));
        }
        // duplicates must agree: same integer, or identical raw value
        let normalized: Vec<Result<i64, &Value>> =
            values.iter().map(|v| integer_of(v).map_err(|_| *v)).collect();
        if normalized.windows(2).any(|w| w[0] != w[1]) {
            return Err((FailureReason::ContradictoryDuplicates, Some(key.clone())));
        }
        match rating_of(values[0]) {
            Ok(r) => {
                ratings.insert(key.clone(), r);
            }
            Err(ValueError::NonInteger) => {
                return Err((FailureReason::NonInteger, Some(key.clone())))
            }
            Err(ValueError::OutOfRange) => {
                return Err((FailureReason::OutOfRange, Some(key.clone())))
            }
        }
    }
    Ok(ParsedRating {
        ratings,
        extraction_tier: tier,
    })
}

/// Contents of every triple-backtick block, in order. An optional info string
/// (e.g. `json`) on the opening line is skipped.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = match after.find('\n') {
            Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => nl + 1,
            _ => 0,
        };
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    out
}

/// End index (exclusive) of the balanced object starting at `start`, which
/// must point at `{`. Braces inside string literals are ignored.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_embedded_object(text: &str) -> Option<Vec<(String, Value)>> {
    text.match_indices('{').find_map(|(start, _)| {
        let end = balanced_end(text, start)?;
        parse_object(&text[start..end])
    })
}

fn regex_candidate(text: &str, key: &str) -> Option<Value> {
    static RATING: OnceLock<Regex> = OnceLock::new();
    let generic = RATING.get_or_init(|| {
        Regex::new(
            r#"(?i)\brating\b["*_\s]*(?::|=|\bis\b|\bof\b|-|–)[\s"*_]*([+-]?[0-9]+(?:\.[0-9]+)?)\b"#,
        )
        .expect("valid regex")
    });
    let keyed = Regex::new(&format!(
        r#"(?i)(?:^|[^A-Za-z0-9_]){}["*_\s]*(?::|=|\bis\b|-|–)[\s"*_]*([+-]?[0-9]+(?:\.[0-9]+)?)\b"#,
        regex::escape(key)
    ))
    .expect("escaped key forms a valid regex");
    let last = |re: &Regex| {
        re.captures_iter(text)
            .last()
            .map(|c| (c.get(1).expect("group").start(), c[1].to_string()))
    };
    let best = match (last(generic), last(&keyed)) {
        (Some(a), Some(b)) => Some(if a.0 >= b.0 { a } else { b }),
        (a, b) => a.or(b),
    }?;
    let number = best.1;
    Some(match number.parse::<i64>() {
        Ok(i) => Value::from(i),
        Err(_) => Value::String(number),
    })
}

/// Recover ratings for exactly `expected_keys` from `raw`.
pub fn parse_rating(raw: &str, expected_keys: &[String]) -> Result<ParsedRating, ParseFailure> {
    assert!(!expected_keys.is_empty(), "expected_keys must not be empty");
    type FirstFailure = Option<(FailureReason, Option<String>, ExtractionTier)>;
    fn consider(first: &mut FirstFailure, outcome: Outcome, tier: ExtractionTier) -> Option<ParsedRating> {
        match outcome {
            Ok(p) => Some(p),
            Err((reason, key)) => {
                first.get_or_insert((reason, key, tier));
                None
            }
        }
    }
    let mut first_failure: FirstFailure = None;

    let trimmed = raw.trim();
    if let Some(members) = parse_object(trimmed) {
        if let Some(p) = consider(&mut first_failure, evaluate_members(&members, expected_keys, ExtractionTier::Strict), ExtractionTier::Strict) {
            return Ok(p);
        }
    }
    for block in fenced_blocks(raw) {
        if let Some(members) = parse_object(block.trim()) {
            if let Some(p) = consider(&mut first_failure, evaluate_members(&members, expected_keys, ExtractionTier::Fenced), ExtractionTier::Fenced) {
                return Ok(p);
            }
        }
    }
    if let Some(members) = first_embedded_object(raw) {
        if let Some(p) = consider(&mut first_failure, evaluate_members(&members, expected_keys, ExtractionTier::Embedded), ExtractionTier::Embedded) {
            return Ok(p);
        }
    }
    // The regex tier only reads prose: a JSON object that failed validation is
    // a model error, not something a looser pattern should gloss over.
    let saw_object = first_failure.is_some();
    if let ([key], false) = (expected_keys, saw_object) {
        if let Some(value) = regex_candidate(raw, key) {
            let members = vec![(key.clone(), value)];
            if let Some(p) = consider(&mut first_failure, evaluate_members(&members, expected_keys, ExtractionTier::Regex), ExtractionTier::Regex) {
                return Ok(p);
            }
        }
    }

    let (reason, key, tier) = match first_failure {
        Some((reason, key, tier)) => (reason, key, Some(tier)),
        None => (FailureReason::NoStructuredOutput, None, None),
    };
    Err(ParseFailure {
        reason,
        tier,
        key,
        excerpt: excerpt(raw),
    })
}

/// Canonical serialization of a rating mapping: a compact JSON object with
/// keys in sorted order.
pub fn to_canonical_json(ratings: &BTreeMap<String, TraversabilityRating>) -> String {
    serde_json::to_string(ratings).expect("rating map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys(k: &[&str]) -> Vec<String> {
        k.iter().map(|s| s.to_string()).collect()
    }

    fn ok(raw: &str, k: &[&str]) -> ParsedRating {
        parse_rating(raw, &keys(k)).unwrap_or_else(|e| panic!("{raw:?}: {e:?}"))
    }

    fn fail(raw: &str, k: &[&str]) -> FailureReason {
        parse_rating(raw, &keys(k)).unwrap_err().reason
    }

    #[test]
    fn strict_single_key() {
        let p = ok(r#"{"instance_0": 2}"#, &["instance_0"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Strict);
        assert_eq!(p.ratings["instance_0"], TraversabilityRating::Rough);
    }

    #[test]
    fn fenced_block() {
        let p = ok("Sure! Here is my answer:\n```json\n{\"instance_0\": 3}\n```", &["instance_0"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Fenced);
        assert_eq!(p.ratings["instance_0"], TraversabilityRating::Bumpy);
    }

    #[test]
    fn prose_only_is_no_structured_output() {
        let e = parse_rating("The puddle looks shallow and easy to cross.", &keys(&["instance_0"])).unwrap_err();
        assert_eq!(e.reason, FailureReason::NoStructuredOutput);
        assert_eq!(e.tier, None);
        assert_eq!(e.excerpt, "The puddle looks shallow and easy to cross.");
    }

    #[test]
    fn out_of_range_and_non_integer() {
        assert_eq!(fail(r#"{"instance_0": 5}"#, &["instance_0"]), FailureReason::OutOfRange);
        assert_eq!(fail(r#"{"instance_0": 2.5}"#, &["instance_0"]), FailureReason::NonInteger);
        assert_eq!(fail(r#"{"instance_0": "2.5"}"#, &["instance_0"]), FailureReason::NonInteger);
        assert_eq!(fail(r#"{"instance_0": "bumpy"}"#, &["instance_0"]), FailureReason::NonInteger);
        assert_eq!(fail(r#"{"instance_0": null}"#, &["instance_0"]), FailureReason::NonInteger);
    }

    #[test]
    fn integer_valued_strings_accepted() {
        let p = ok(r#"{"w": " 4 "}"#, &["w"]);
        assert_eq!(p.ratings["w"], TraversabilityRating::NonNavigable);
        assert_eq!(ok(r#"{"w": 3.0}"#, &["w"]).ratings["w"], TraversabilityRating::Bumpy);
    }

    #[test]
    fn two_keys_strict() {
        let p = ok(r#"{"instance_0": 2, "instance_1": 3}"#, &["instance_0", "instance_1"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Strict);
        assert_eq!(p.ratings.len(), 2);
    }

    #[test]
    fn missing_key_never_partial() {
        let e = parse_rating(r#"{"instance_0": 2}"#, &keys(&["instance_0", "instance_1"])).unwrap_err();
        assert_eq!(e.reason, FailureReason::MissingKey);
        assert_eq!(e.key.as_deref(), Some("instance_1"));
    }

    #[test]
    fn duplicates() {
        assert_eq!(
            fail(r#"{"w": 2, "w": 3}"#, &["w"]),
            FailureReason::ContradictoryDuplicates
        );
        assert_eq!(ok(r#"{"w": 2, "w": "2"}"#, &["w"]).ratings["w"], TraversabilityRating::Rough);
    }

    #[test]
    fn regex_tier_for_cot_text() {
        let p = ok("The water seems deep and the banks are soft...\ntherefore rating: 4", &["instance_0"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Regex);
        assert_eq!(p.ratings["instance_0"], TraversabilityRating::NonNavigable);
    }

    #[test]
    fn regex_tier_off_for_multi_key() {
        assert_eq!(
            fail("rating: 2 for both", &["a", "b"]),
            FailureReason::NoStructuredOutput
        );
    }

    #[test]
    fn regex_does_not_match_scheme_mentions() {
        assert_eq!(
            fail("Using the rating scheme 1 – smooth to 4 – forbidden, I cannot decide.", &["w"]),
            FailureReason::NoStructuredOutput
        );
    }

    #[test]
    fn earliest_failure_is_reported() {
        // strict finds the object with an out-of-range value; nothing later succeeds
        let e = parse_rating(r#"{"w": 9}"#, &keys(&["w"])).unwrap_err();
        assert_eq!(e.tier, Some(ExtractionTier::Strict));
        assert_eq!(e.reason, FailureReason::OutOfRange);
    }

    #[test]
    fn later_tier_can_rescue_earlier_failure() {
        let raw = "Draft: {\"w\": 7}\nFinal:\n```\n{\"w\": 1}\n```";
        let p = ok(raw, &["w"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Fenced);
    }

    #[test]
    fn braces_in_strings_do_not_break_balance() {
        let raw = r#"Result -> {"note": "a } brace", "w": 3} done"#;
        let p = ok(raw, &["w"]);
        assert_eq!(p.extraction_tier, ExtractionTier::Embedded);
    }

    #[test]
    fn excerpt_is_capped() {
        let raw = "x".repeat(2000);
        let e = parse_rating(&raw, &keys(&["w"])).unwrap_err();
        assert_eq!(e.excerpt.chars().count(), EXCERPT_CHARS);
    }

    fn key_strategy() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,12}"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn canonical_round_trip(map in prop::collection::btree_map(key_strategy(), 1i64..=4, 1..10)) {
            let ratings: BTreeMap<String, TraversabilityRating> = map
                .into_iter()
                .map(|(k, v)| (k, TraversabilityRating::new(v).unwrap()))
                .collect();
            let keys: Vec<String> = ratings.keys().cloned().collect();
            let parsed = parse_rating(&to_canonical_json(&ratings), &keys).unwrap();
            prop_assert_eq!(parsed.extraction_tier, ExtractionTier::Strict);
            prop_assert_eq!(parsed.ratings, ratings);
        }

        #[test]
        fn never_partial_never_out_of_range(raw in ".{0,200}", n in 1usize..4) {
            let keys: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            if let Ok(p) = parse_rating(&raw, &keys) {
                prop_assert_eq!(p.ratings.len(), n);
                for k in &keys {
                    prop_assert!(p.ratings.contains_key(k));
                }
            }
        }
    }
}
