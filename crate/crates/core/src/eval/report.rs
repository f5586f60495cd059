use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{EvaluationReport, GroupAxis, LeaderboardEntry};
use crate::dataset::AgreementStats;
use crate::rating::TraversabilityRating;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Everything one evaluation writes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_policy: Option<String>,
    pub group_by: Vec<GroupAxis>,
    pub reports: Vec<EvaluationReport>,
    pub leaderboard: Vec<LeaderboardEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementStats>,
}

pub fn emit_report(doc: &ReportDocument, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => markdown(doc),
    }
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn markdown(doc: &ReportDocument) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    if let Some(run) = &doc.run_id {
        let _ = writeln!(out, "- run: `{run}`");
    }
    if let Some(policy) = &doc.gold_policy {
        let _ = writeln!(out, "- gold labels: {policy} consensus");
    }
    let axes: Vec<&str> = doc.group_by.iter().map(|a| a.as_str()).collect();
    let _ = writeln!(
        out,
        "- grouped by: {}\n",
        if axes.is_empty() { "nothing".to_string() } else { axes.join(", ") }
    );

    if !doc.leaderboard.is_empty() {
        out.push_str("## Leaderboard\n\n| group | macro F1 | failure rate | predictions |\n|---|---|---|---|\n");
        for e in &doc.leaderboard {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                e.group,
                num(e.macro_f1),
                num(e.failure_rate),
                e.n_predictions
            );
        }
        out.push('\n');
    }

    for r in &doc.reports {
        group_section(&mut out, r);
    }

    if let Some(stats) = &doc.agreement {
        out.push_str("## Annotator agreement\n\n");
        let _ = writeln!(
            out,
            "Standard deviation of ratings per (instance, robot), {} keys.\n",
            stats.per_key.len()
        );
        out.push_str("| std dev | count |\n|---|---|\n");
        for b in &stats.histogram {
            let _ = writeln!(out, "| [{}, {}) | {} |", b.lo, b.hi, b.count);
        }
        out.push('\n');
    }
    out
}

fn group_section(out: &mut String, r: &EvaluationReport) {
    let _ = writeln!(out, "## {}\n", r.group);
    let _ = writeln!(out, "- predictions: {}", r.n_predictions);
    let _ = writeln!(out, "- macro F1: {}", num(r.macro_f1));
    let _ = writeln!(out, "- failure rate: {}", num(r.failure_rate));
    let _ = writeln!(out, "- accuracy: {}", num(r.accuracy));
    let _ = writeln!(out, "- off-by-one accuracy: {}", num(r.off_by_one_accuracy));
    let _ = writeln!(
        out,
        "- MAE (parsed only): {}",
        r.mae.map(num).unwrap_or_else(|| "n/a".into())
    );
    if !r.tier_counts.is_empty() {
        let tiers: Vec<String> = r.tier_counts.iter().map(|(t, n)| format!("{} {n}", t.as_str())).collect();
        let _ = writeln!(out, "- extraction tiers: {}", tiers.join(", "));
    }
    if !r.failure_counts.is_empty() {
        let reasons: Vec<String> = r.failure_counts.iter().map(|(f, n)| format!("{f} {n}")).collect();
        let _ = writeln!(out, "- failures: {}", reasons.join(", "));
    }

    out.push_str("\nConfusion (rows gold, columns predicted):\n\n");
    out.push_str("| gold \\ pred | 1 | 2 | 3 | 4 | failure |\n|---|---|---|---|---|---|\n");
    for rating in TraversabilityRating::ALL {
        let k = rating.index();
        let row = &r.confusion.matrix[k];
        let _ = writeln!(
            out,
            "| {} {} | {} | {} | {} | {} | {} |",
            rating.value(),
            rating.label(),
            row[0],
            row[1],
            row[2],
            row[3],
            r.confusion.failures[k]
        );
    }

    out.push_str("\n| class | precision | recall | F1 | support |\n|---|---|---|---|---|\n");
    for s in &r.per_class {
        let _ = writeln!(
            out,
            "| {} {} | {} | {} | {} | {} |",
            s.rating.value(),
            s.rating.label(),
            num(s.precision),
            num(s.recall),
            num(s.f1),
            s.support
        );
    }
    out.push('\n');
}
