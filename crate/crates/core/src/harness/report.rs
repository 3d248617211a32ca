//! Accuracy summaries and their rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::trace::TraceDocument;
use crate::chain::Answer;
use crate::controller::ControllerConfig;

pub const SUMMARY_SCHEMA: &str = "chemau-summary/1";
pub const REPORT_SCHEMA: &str = "chemau-report/1";

/// Counts for one slice of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub unparsed: usize,
}

impl Tally {
    /// Exact percentage; rounding happens only when rendered.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: &Tally) {
        self.total += other.total;
        self.correct += other.correct;
        self.incorrect += other.incorrect;
        self.unparsed += other.unparsed;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionRate {
    pub position: usize,
    pub scored: usize,
    pub flagged: usize,
}

impl PositionRate {
    pub fn rate(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.flagged as f64 / self.scored as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema: String,
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub unparsed: usize,
    /// `100 * correct / total`, unrounded.
    pub accuracy: f64,
    pub per_mode: BTreeMap<String, Tally>,
    pub per_estimator: BTreeMap<String, Tally>,
    pub total_iterations: u64,
    pub mean_iterations: f64,
    pub flag_rate_per_position: Vec<PositionRate>,
    pub failures: usize,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let s: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if s.schema != SUMMARY_SCHEMA {
            return Err(format!("unsupported summary schema {:?}", s.schema));
        }
        Ok(s)
    }

    pub fn tally(&self) -> Tally {
        Tally {
            total: self.total,
            correct: self.correct,
            incorrect: self.incorrect,
            unparsed: self.unparsed,
        }
    }

    /// Pools several runs (for example one per mode) into one summary.
    pub fn merge(parts: &[EvalSummary]) -> EvalSummary {
        let mut tally = Tally::default();
        let mut per_mode: BTreeMap<String, Tally> = BTreeMap::new();
        let mut per_estimator: BTreeMap<String, Tally> = BTreeMap::new();
        let mut positions: BTreeMap<usize, PositionRate> = BTreeMap::new();
        let mut total_iterations = 0;
        let mut failures = 0;
        for p in parts {
            tally.add(&p.tally());
            for (k, t) in &p.per_mode {
                per_mode.entry(k.clone()).or_default().add(t);
            }
            for (k, t) in &p.per_estimator {
                per_estimator.entry(k.clone()).or_default().add(t);
            }
            for r in &p.flag_rate_per_position {
                let e = positions.entry(r.position).or_insert(PositionRate {
                    position: r.position,
                    ..Default::default()
                });
                e.scored += r.scored;
                e.flagged += r.flagged;
            }
            total_iterations += p.total_iterations;
            failures += p.failures;
        }
        build(tally, per_mode, per_estimator, total_iterations, positions, failures)
    }
}

fn build(
    tally: Tally,
    per_mode: BTreeMap<String, Tally>,
    per_estimator: BTreeMap<String, Tally>,
    total_iterations: u64,
    positions: BTreeMap<usize, PositionRate>,
    failures: usize,
) -> EvalSummary {
    EvalSummary {
        schema: SUMMARY_SCHEMA.to_string(),
        total: tally.total,
        correct: tally.correct,
        incorrect: tally.incorrect,
        unparsed: tally.unparsed,
        accuracy: tally.accuracy(),
        per_mode,
        per_estimator,
        total_iterations,
        mean_iterations: if tally.total == 0 {
            0.0
        } else {
            total_iterations as f64 / tally.total as f64
        },
        flag_rate_per_position: positions.into_values().collect(),
        failures,
    }
}

pub fn summarize(config: &ControllerConfig, traces: &[TraceDocument]) -> EvalSummary {
    let mut tally = Tally::default();
    let mut positions: BTreeMap<usize, PositionRate> = BTreeMap::new();
    let mut total_iterations = 0u64;
    for t in traces {
        tally.total += 1;
        if t.correct {
            tally.correct += 1;
        } else if t.final_answer == Answer::Unparsed {
            tally.unparsed += 1;
        } else {
            tally.incorrect += 1;
        }
        total_iterations += u64::from(t.iterations_used);
        for step in t.iterations.iter().flat_map(|it| &it.steps) {
            if step.score.is_none() {
                continue;
            }
            let e = positions.entry(step.index).or_insert(PositionRate {
                position: step.index,
                ..Default::default()
            });
            e.scored += 1;
            e.flagged += usize::from(step.flagged);
        }
    }
    let failures = traces.iter().filter(|t| t.error.is_some()).count();
    let per_mode = BTreeMap::from([(config.mode.to_string(), tally)]);
    let per_estimator = BTreeMap::from([(config.estimator.kind.to_string(), tally)]);
    build(tally, per_mode, per_estimator, total_iterations, positions, failures)
}

/// `100 * correct / total` rounded half-up to two decimals, computed on
/// integers so the rendering never depends on float formatting.
pub fn format_percent(correct: usize, total: usize) -> String {
    if total == 0 {
        return "0.00".to_string();
    }
    let (c, t) = (correct as u128, total as u128);
    let hundredths = (20_000 * c + t) / (2 * t);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Fixed-point rendering with half-up rounding for non-negative values.
fn format_fixed(value: f64, places: usize) -> String {
    let scale = 10f64.powi(places as i32);
    let scaled = (value * scale + 0.5).floor() / scale;
    format!("{scaled:.places$}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Doc,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "doc" => Ok(Self::Doc),
            _ => Err(format!("unknown report format {s:?} (table|doc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub question_id: String,
    pub answer: Answer,
    pub gold: char,
    pub correct: bool,
    pub iterations_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&TraceDocument> for TraceLine {
    fn from(t: &TraceDocument) -> Self {
        Self {
            question_id: t.question_id.clone(),
            answer: t.final_answer,
            gold: t.gold,
            correct: t.correct,
            iterations_used: t.iterations_used,
            error: t.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    /// Accuracy as rendered, two decimals.
    pub accuracy: String,
    pub summary: EvalSummary,
    /// Absent when the report was built without traces.
    pub traces: Option<Vec<TraceLine>>,
}

impl ReportDocument {
    pub fn parse(text: &str) -> Result<Self, String> {
        let doc: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.schema != REPORT_SCHEMA {
            return Err(format!("unsupported report schema {:?}", doc.schema));
        }
        Ok(doc)
    }
}

fn tally_row(out: &mut String, label: &str, t: &Tally) {
    let _ = writeln!(
        out,
        "  {label} {}/{} {}% (unparsed {})",
        t.correct,
        t.total,
        format_percent(t.correct, t.total),
        t.unparsed
    );
}

pub fn emit_report(summary: &EvalSummary, traces: &[TraceDocument], format: ReportFormat) -> String {
    match format {
        ReportFormat::Doc => {
            let doc = ReportDocument {
                schema: REPORT_SCHEMA.to_string(),
                accuracy: format_percent(summary.correct, summary.total),
                summary: summary.clone(),
                traces: (!traces.is_empty()).then(|| traces.iter().map(TraceLine::from).collect()),
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let mut out = String::new();
            let _ = writeln!(out, "total {}", summary.total);
            let _ = writeln!(out, "correct {}", summary.correct);
            let _ = writeln!(out, "incorrect {}", summary.incorrect);
            let _ = writeln!(out, "unparsed {}", summary.unparsed);
            let _ = writeln!(
                out,
                "accuracy {}%",
                format_percent(summary.correct, summary.total)
            );
            let _ = writeln!(out, "mean iterations {}", format_fixed(summary.mean_iterations, 2));
            if summary.failures > 0 {
                let _ = writeln!(out, "failures {}", summary.failures);
            }
            let _ = writeln!(out, "per mode:");
            for (k, t) in &summary.per_mode {
                tally_row(&mut out, k, t);
            }
            let _ = writeln!(out, "per estimator:");
            for (k, t) in &summary.per_estimator {
                tally_row(&mut out, k, t);
            }
            let _ = writeln!(out, "flag rate per position:");
            for r in &summary.flag_rate_per_position {
                let _ = writeln!(
                    out,
                    "  step {} {}/{} {}",
                    r.position,
                    r.flagged,
                    r.scored,
                    format_fixed(r.rate(), 4)
                );
            }
            if traces.is_empty() {
                let _ = writeln!(out, "traces: absent");
            } else {
                let _ = writeln!(out, "traces: {}", traces.len());
                for t in traces {
                    let _ = write!(
                        out,
                        "  {} answer {} gold {} {} iterations {}",
                        t.question_id,
                        t.final_answer,
                        t.gold,
                        if t.correct { "correct" } else { "wrong" },
                        t.iterations_used
                    );
                    if let Some(e) = &t.error {
                        let _ = write!(out, " error {e}");
                    }
                    out.push('\n');
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(correct: usize, unparsed: usize, total: usize) -> EvalSummary {
        let t = Tally {
            total,
            correct,
            incorrect: total - correct - unparsed,
            unparsed,
        };
        build(
            t,
            BTreeMap::from([("full".into(), t)]),
            BTreeMap::from([("adaptive".into(), t)]),
            total as u64,
            BTreeMap::new(),
            0,
        )
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(3, 4), "75.00");
        assert_eq!(format_percent(0, 1), "0.00");
        assert_eq!(format_percent(1, 3), "33.33");
        assert_eq!(format_percent(2, 3), "66.67");
        assert_eq!(format_percent(1, 8), "12.50");
        // 1/1600 = 0.0625% -> 0.06; 1/800 = 0.125% -> 0.13 (half-up)
        assert_eq!(format_percent(1, 1600), "0.06");
        assert_eq!(format_percent(1, 800), "0.13");
        assert_eq!(format_percent(5, 5), "100.00");
    }

    #[test]
    fn table_rows() {
        let s = summary(3, 0, 4);
        assert_eq!(s.accuracy, 75.0);
        let table = emit_report(&s, &[], ReportFormat::Table);
        assert!(table.lines().any(|l| l == "accuracy 75.00%"));
        assert!(table.lines().any(|l| l == "traces: absent"));
        assert_eq!(table, emit_report(&s, &[], ReportFormat::Table));
    }

    #[test]
    fn unparsed_counts_against() {
        let s = summary(0, 1, 1);
        assert_eq!(s.accuracy, 0.0);
        assert_eq!(s.unparsed, 1);
        assert_eq!(s.correct + s.incorrect + s.unparsed, s.total);
    }

    #[test]
    fn doc_round_trip() {
        let s = summary(3, 1, 4);
        let text = emit_report(&s, &[], ReportFormat::Doc);
        let doc = ReportDocument::parse(&text).unwrap();
        assert_eq!(doc.summary, s);
        assert_eq!(doc.accuracy, "75.00");
        assert!(doc.traces.is_none());
    }

    #[test]
    fn merge_pools_counts() {
        let m = EvalSummary::merge(&[summary(3, 0, 4), summary(1, 1, 4)]);
        assert_eq!((m.total, m.correct, m.unparsed), (8, 4, 1));
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(m.per_mode["full"].total, 8);
    }
}
