//! Scoring of model predictions against consensus labels.
//!
//! Ratings are scored as a four-class classification. A prediction that failed
//! to parse has no predicted class: it lands in the failure column of its gold
//! class, lowering that class's recall and leaving every precision untouched.

mod metrics;
mod report;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::InstanceRobotKey;
use crate::parser::{ExtractionTier, FailureReason};
use crate::prompt::{PromptStrategy, QueryMode};
use crate::rating::TraversabilityRating;

pub use metrics::{
    confusion, group_report, per_class_f1, ClassScores, Confusion, EvaluationReport, GroupAxis,
    GroupKey, GroupedReports, LeaderboardEntry,
};
pub use report::{emit_report, ReportDocument, ReportFormat};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionOutcome {
    Rating(TraversabilityRating),
    Failure { reason: FailureReason, excerpt: String },
}

impl PredictionOutcome {
    pub fn rating(&self) -> Option<TraversabilityRating> {
        match self {
            PredictionOutcome::Rating(r) => Some(*r),
            PredictionOutcome::Failure { .. } => None,
        }
    }
}

/// One model outcome for one (instance, robot) under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub run_id: String,
    pub image_id: String,
    pub instance_id: String,
    pub robot_id: String,
    /// Backend label: the configured name, or the model tag when unnamed.
    pub model_tag: String,
    pub strategy: PromptStrategy,
    pub temperature: f64,
    pub query_mode: QueryMode,
    pub outcome: PredictionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_tier: Option<ExtractionTier>,
    pub latency_ms: u64,
    /// Gateway attempts spent on the answer that was kept.
    pub attempts: u32,
    /// Model queries made for this outcome (1 unless parse retries are on).
    pub parse_attempts: u32,
}

impl PredictionRecord {
    pub fn key(&self) -> InstanceRobotKey {
        InstanceRobotKey {
            instance_id: self.instance_id.clone(),
            robot_id: self.robot_id.clone(),
        }
    }

    /// Identity of the query configuration that produced this record; a run
    /// holds at most one record per value.
    pub fn config_key(&self) -> String {
        config_key(
            &self.model_tag,
            self.strategy,
            self.temperature,
            self.query_mode,
            &self.robot_id,
            &self.instance_id,
        )
    }
}

/// See [`PredictionRecord::config_key`].
pub fn config_key(
    model_tag: &str,
    strategy: PromptStrategy,
    temperature: f64,
    query_mode: QueryMode,
    robot_id: &str,
    instance_id: &str,
) -> String {
    format!("{model_tag}|{strategy}|{temperature}|{query_mode}|{robot_id}|{instance_id}")
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    NoPredictions,
    #[error("{} predicted keys have no gold label", .0.len())]
    MissingGold(Vec<InstanceRobotKey>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {detail}")]
    Malformed { path: PathBuf, line: usize, detail: String },
}

/// Read a predictions file. A missing file reads as empty.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(EvalError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
