//! Structured prompt rendering.
//!
//! Prompt wording lives in template files (`<strategy>/<mode>.txt`), so it can
//! be swapped and diffed without a rebuild. The defaults under `prompts/` in
//! this crate are compiled in. A template is a sequence of turns introduced by
//! `### system` or `### user` header lines; a file without headers is a single
//! user turn. Four placeholders are substituted in one pass:
//! `{robot_description}`, `{task}`, `{scheme}` and `{keys}`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::RobotProfile;
use crate::rating::SCHEME_LINE;

pub const TASK_STATEMENT: &str =
    "Estimate whether the robot could traverse this water body without getting stuck or damaged, \
     and rate it with the scheme below.";

/// Default output contract. `{structure}` becomes the key skeleton.
pub const DEFAULT_OUTPUT_INSTRUCTIONS: &str =
    "Answer with a JSON object of exactly this form, replacing each <rating> with a single \
     integer from 1 to 4, and nothing else:\n{structure}";

const PLACEHOLDERS: [&str; 4] = ["robot_description", "task", "scheme", "keys"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Plain,
    Role,
    RephraseRespond,
    Cot,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::Plain,
        PromptStrategy::Role,
        PromptStrategy::RephraseRespond,
        PromptStrategy::Cot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::Plain => "plain",
            PromptStrategy::Role => "role",
            PromptStrategy::RephraseRespond => "rephrase_respond",
            PromptStrategy::Cot => "cot",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown prompt strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// One request per instance, one crop attached.
    PerInstanceCrop,
    /// One request per image: the annotated scene plus one crop per instance.
    FullImageAllInstances,
}

impl QueryMode {
    pub const ALL: [QueryMode; 2] = [QueryMode::PerInstanceCrop, QueryMode::FullImageAllInstances];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::PerInstanceCrop => "per_instance_crop",
            QueryMode::FullImageAllInstances => "full_image_all_instances",
        }
    }

    /// Image slots for a request covering `n_keys` instances.
    pub fn image_slots(self, n_keys: usize) -> usize {
        match self {
            QueryMode::PerInstanceCrop => 1,
            QueryMode::FullImageAllInstances => 1 + n_keys,
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown query mode `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("expected_keys must not be empty")]
    NoKeys,
    #[error("per_instance_crop takes exactly one key, got {0}")]
    KeyCount(usize),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: {detail}")]
    Template { name: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub robot: RobotProfile,
    pub strategy: PromptStrategy,
    pub query_mode: QueryMode,
    pub expected_keys: Vec<String>,
    /// Output contract; `{structure}` is replaced by the key skeleton.
    pub output_instructions: String,
}

impl PromptSpec {
    pub fn new(
        robot: RobotProfile,
        strategy: PromptStrategy,
        query_mode: QueryMode,
        expected_keys: Vec<String>,
    ) -> Result<Self, PromptError> {
        if expected_keys.is_empty() {
            return Err(PromptError::NoKeys);
        }
        if query_mode == QueryMode::PerInstanceCrop && expected_keys.len() != 1 {
            return Err(PromptError::KeyCount(expected_keys.len()));
        }
        Ok(PromptSpec {
            robot,
            strategy,
            query_mode,
            expected_keys,
            output_instructions: DEFAULT_OUTPUT_INSTRUCTIONS.to_string(),
        })
    }

    /// `{"k1": <rating>, "k2": <rating>}` listing every expected key once.
    pub fn key_skeleton(&self) -> String {
        let entries: Vec<String> = self
            .expected_keys
            .iter()
            .map(|k| format!("{}: <rating>", serde_json::Value::String(k.clone())))
            .collect();
        format!("{{{}}}", entries.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub turns: Vec<Turn>,
    pub image_slots: usize,
}

impl RenderedPrompt {
    pub fn full_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TurnTemplate {
    role: TurnRole,
    segments: Vec<Segment>,
}

/// A parsed template: one or more turns with placeholder segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    turns: Vec<TurnTemplate>,
}

fn split_segments(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = PLACEHOLDERS.iter().find(|name| {
            after.starts_with(**name) && after[name.len()..].starts_with('}')
        });
        match hit {
            Some(name) => {
                if !literal.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                out.push(Segment::Placeholder(name));
                rest = &after[name.len() + 1..];
            }
            None => {
                literal.push('{');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        out.push(Segment::Literal(literal));
    }
    out
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let err = |detail: &str| PromptError::Template {
            name: name.to_string(),
            detail: detail.to_string(),
        };
        let mut raw_turns: Vec<(TurnRole, String)> = Vec::new();
        for line in text.lines() {
            let header = match line.trim_end() {
                "### system" => Some(TurnRole::System),
                "### user" => Some(TurnRole::User),
                _ => None,
            };
            match header {
                Some(role) => raw_turns.push((role, String::new())),
                None => {
                    if raw_turns.is_empty() {
                        raw_turns.push((TurnRole::User, String::new()));
                    }
                    let body = &mut raw_turns.last_mut().expect("pushed above").1;
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let turns: Vec<TurnTemplate> = raw_turns
            .into_iter()
            .map(|(role, body)| TurnTemplate {
                role,
                segments: split_segments(body.trim_matches('\n')),
            })
            .filter(|t| !t.segments.is_empty())
            .collect();
        if !turns.iter().any(|t| t.role == TurnRole::User) {
            return Err(err("needs at least one user turn"));
        }
        for required in ["scheme", "keys"] {
            let uses = turns
                .iter()
                .flat_map(|t| &t.segments)
                .filter(|s| **s == Segment::Placeholder(required))
                .count();
            if uses != 1 {
                return Err(err(&format!("placeholder {{{required}}} must appear exactly once")));
            }
        }
        Ok(PromptTemplate { turns })
    }

    fn render(&self, values: &BTreeMap<&'static str, String>) -> Vec<Turn> {
        self.turns
            .iter()
            .map(|t| Turn {
                role: t.role,
                text: t
                    .segments
                    .iter()
                    .map(|s| match s {
                        Segment::Literal(l) => l.as_str(),
                        Segment::Placeholder(p) => values[p].as_str(),
                    })
                    .collect(),
            })
            .collect()
    }
}

macro_rules! builtin {
    ($strategy:literal, $mode:literal) => {
        include_str!(concat!("../prompts/", $strategy, "/", $mode, ".txt"))
    };
}

fn builtin_text(strategy: PromptStrategy, mode: QueryMode) -> &'static str {
    use PromptStrategy::*;
    use QueryMode::*;
    match (strategy, mode) {
        (Plain, PerInstanceCrop) => builtin!("plain", "per_instance_crop"),
        (Plain, FullImageAllInstances) => builtin!("plain", "full_image_all_instances"),
        (Role, PerInstanceCrop) => builtin!("role", "per_instance_crop"),
        (Role, FullImageAllInstances) => builtin!("role", "full_image_all_instances"),
        (RephraseRespond, PerInstanceCrop) => builtin!("rephrase_respond", "per_instance_crop"),
        (RephraseRespond, FullImageAllInstances) => {
            builtin!("rephrase_respond", "full_image_all_instances")
        }
        (Cot, PerInstanceCrop) => builtin!("cot", "per_instance_crop"),
        (Cot, FullImageAllInstances) => builtin!("cot", "full_image_all_instances"),
    }
}

/// Templates for every (strategy, mode) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<(PromptStrategy, QueryMode), PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for s in PromptStrategy::ALL {
            for m in QueryMode::ALL {
                let name = format!("{s}/{m}.txt");
                let t = PromptTemplate::parse(&name, builtin_text(s, m))
                    .expect("built-in templates are valid");
                templates.insert((s, m), t);
            }
        }
        TemplateSet { templates }
    }

    /// Built-in templates overridden by any `<strategy>/<mode>.txt` under `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        for s in PromptStrategy::ALL {
            for m in QueryMode::ALL {
                let path = dir.join(s.as_str()).join(format!("{m}.txt"));
                if !path.is_file() {
                    continue;
                }
                let text = fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path: path.clone(), source })?;
                let t = PromptTemplate::parse(&path.display().to_string(), &text)?;
                set.templates.insert((s, m), t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, strategy: PromptStrategy, mode: QueryMode) -> &PromptTemplate {
        &self.templates[&(strategy, mode)]
    }

    /// Render `spec` deterministically: a pure function of the spec and templates.
    pub fn render(&self, spec: &PromptSpec) -> RenderedPrompt {
        let keys = spec
            .output_instructions
            .replace("{structure}", &spec.key_skeleton());
        let values = BTreeMap::from([
            ("robot_description", spec.robot.prompt_description.clone()),
            ("task", TASK_STATEMENT.to_string()),
            ("scheme", SCHEME_LINE.to_string()),
            ("keys", keys),
        ]);
        RenderedPrompt {
            turns: self.get(spec.strategy, spec.query_mode).render(&values),
            image_slots: spec.query_mode.image_slots(spec.expected_keys.len()),
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Render with the built-in templates.
pub fn render_prompt(spec: &PromptSpec) -> RenderedPrompt {
    TemplateSet::builtin().render(spec)
}

/// One point of the prompt sweep, not yet bound to instance keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVariant {
    pub robot: RobotProfile,
    pub strategy: PromptStrategy,
    pub query_mode: QueryMode,
}

impl PromptVariant {
    pub fn spec(&self, expected_keys: Vec<String>) -> Result<PromptSpec, PromptError> {
        PromptSpec::new(self.robot.clone(), self.strategy, self.query_mode, expected_keys)
    }
}

/// Cartesian product ordered robot-major, then strategy, then mode.
pub fn strategy_matrix(
    robots: &[RobotProfile],
    strategies: &[PromptStrategy],
    modes: &[QueryMode],
) -> Vec<PromptVariant> {
    robots
        .iter()
        .flat_map(|robot| {
            strategies.iter().flat_map(move |&strategy| {
                modes.iter().map(move |&query_mode| PromptVariant {
                    robot: robot.clone(),
                    strategy,
                    query_mode,
                })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(strategy: PromptStrategy, mode: QueryMode, keys: &[&str]) -> PromptSpec {
        PromptSpec::new(
            RobotProfile::husky_a200(),
            strategy,
            mode,
            keys.iter().map(|k| k.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn plain_single_user_turn() {
        let p = render_prompt(&spec(PromptStrategy::Plain, QueryMode::PerInstanceCrop, &["instance_7"]));
        assert_eq!(p.turns.len(), 1);
        assert_eq!(p.turns[0].role, TurnRole::User);
        let text = &p.turns[0].text;
        assert!(text.contains("1 – smooth, 2 – rough, 3 – bumpy, 4 – non-navigable/forbidden"));
        assert!(text.contains("\"instance_7\": <rating>"));
        assert!(text.contains("without getting stuck or damaged"));
        assert!(text.contains(&RobotProfile::husky_a200().prompt_description));
        assert_eq!(p.image_slots, 1);
    }

    #[test]
    fn role_adds_only_a_system_turn() {
        for mode in QueryMode::ALL {
            let keys: &[&str] = match mode {
                QueryMode::PerInstanceCrop => &["w0"],
                QueryMode::FullImageAllInstances => &["w0", "w1"],
            };
            let plain = render_prompt(&spec(PromptStrategy::Plain, mode, keys));
            let role = render_prompt(&spec(PromptStrategy::Role, mode, keys));
            assert_eq!(role.turns.len(), 2);
            assert_eq!(role.turns[0].role, TurnRole::System);
            assert!(role.turns[0].text.contains("off-road robot operator"));
            assert_eq!(role.turns[1..], plain.turns[..]);
        }
    }

    #[test]
    fn strategy_decorations() {
        let cot = render_prompt(&spec(PromptStrategy::Cot, QueryMode::PerInstanceCrop, &["w"]));
        assert!(cot.full_text().contains("Think step by step"));
        assert!(cot.full_text().contains("output only the final structure"));
        let rar = render_prompt(&spec(PromptStrategy::RephraseRespond, QueryMode::PerInstanceCrop, &["w"]));
        assert!(rar.full_text().contains("rephrase and expand"));
    }

    #[test]
    fn full_image_slots_and_keys() {
        let p = render_prompt(&spec(PromptStrategy::Plain, QueryMode::FullImageAllInstances, &["a", "b", "c"]));
        assert_eq!(p.image_slots, 4);
        assert!(p.full_text().contains("{\"a\": <rating>, \"b\": <rating>, \"c\": <rating>}"));
    }

    #[test]
    fn spec_validation() {
        let r = RobotProfile::husky_a200();
        assert!(matches!(
            PromptSpec::new(r.clone(), PromptStrategy::Plain, QueryMode::PerInstanceCrop, vec![]),
            Err(PromptError::NoKeys)
        ));
        assert!(matches!(
            PromptSpec::new(r, PromptStrategy::Plain, QueryMode::PerInstanceCrop, vec!["a".into(), "b".into()]),
            Err(PromptError::KeyCount(2))
        ));
    }

    #[test]
    fn placeholders_substituted_in_one_pass() {
        let mut robot = RobotProfile::husky_a200();
        robot.prompt_description = "sneaky {scheme} robot".into();
        let s = PromptSpec::new(robot, PromptStrategy::Plain, QueryMode::PerInstanceCrop, vec!["w".into()]).unwrap();
        let text = render_prompt(&s).full_text();
        assert!(text.contains("sneaky {scheme} robot"));
        assert_eq!(text.matches(SCHEME_LINE).count(), 1);
    }

    #[test]
    fn template_parsing_rules() {
        let t = PromptTemplate::parse("t", "no headers {scheme} {keys} {unknown}").unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.turns[0].role, TurnRole::User);
        assert!(PromptTemplate::parse("t", "### system\n{scheme} {keys}").is_err());
        assert!(PromptTemplate::parse("t", "{keys}").is_err());
        assert!(PromptTemplate::parse("t", "{scheme}{scheme}{keys}").is_err());
    }

    #[test]
    fn from_dir_overrides_one_template() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("plain")).unwrap();
        std::fs::write(
            dir.path().join("plain/per_instance_crop.txt"),
            "Custom {robot_description}. {task} {scheme} {keys}",
        )
        .unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        let s = spec(PromptStrategy::Plain, QueryMode::PerInstanceCrop, &["w"]);
        assert!(set.render(&s).full_text().starts_with("Custom Clearpath"));
        let cot = spec(PromptStrategy::Cot, QueryMode::PerInstanceCrop, &["w"]);
        assert_eq!(set.render(&cot), render_prompt(&cot));
    }

    #[test]
    fn matrix_cardinality_and_order() {
        let robots = [RobotProfile::husky_a200(), RobotProfile::unitree_b1()];
        assert_eq!(strategy_matrix(&robots, &PromptStrategy::ALL, &[QueryMode::PerInstanceCrop]).len(), 8);
        assert_eq!(
            strategy_matrix(&robots[..1], &[PromptStrategy::Cot], &[QueryMode::PerInstanceCrop]).len(),
            1
        );
        let m = strategy_matrix(&robots, &PromptStrategy::ALL, &QueryMode::ALL);
        assert_eq!(m.len(), 16);
        assert_eq!(m[0].robot.id, "husky_a200");
        assert_eq!(m[0].strategy, PromptStrategy::Plain);
        assert_eq!(m[0].query_mode, QueryMode::PerInstanceCrop);
        assert_eq!(m[1].query_mode, QueryMode::FullImageAllInstances);
        assert_eq!(m[2].strategy, PromptStrategy::Role);
        assert_eq!(m[8].robot.id, "unitree_b1");
    }

    proptest! {
        #[test]
        fn every_key_once_and_scheme_in_one_turn(
            n in 1usize..12,
            strategy in 0usize..4,
            full in any::<bool>(),
        ) {
            let keys: Vec<String> = (0..n).map(|i| format!("instance_{i}")).collect();
            let mode = if full { QueryMode::FullImageAllInstances } else { QueryMode::PerInstanceCrop };
            let keys = if full { keys } else { keys[..1].to_vec() };
            let s = PromptSpec::new(RobotProfile::unitree_b1(), PromptStrategy::ALL[strategy], mode, keys.clone()).unwrap();
            let a = render_prompt(&s);
            prop_assert_eq!(&a, &render_prompt(&s));
            let text = a.full_text();
            for k in &keys {
                prop_assert_eq!(text.matches(&format!("\"{k}\"")).count(), 1);
            }
            prop_assert_eq!(a.turns.iter().filter(|t| t.text.contains(SCHEME_LINE)).count(), 1);
            prop_assert_eq!(text.matches(SCHEME_LINE).count(), 1);
            prop_assert!(a.turns.iter().any(|t| t.role == TurnRole::User));
        }
    }
}
