//! End-to-end evaluation runs and their report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::judge::RelevanceJudge;
use super::metrics::{
    answer_relevancy, context_precision, context_recall, faithfulness, MetricValue,
    DEFAULT_REGENERATED_QUESTIONS,
};
use super::testgen::TestCase;
use super::Difficulty;
use crate::answer::{OutputMode, QueryRequest};
use crate::concurrency::{bounded_map, DEFAULT_MAX_IN_FLIGHT};
use crate::engine::Engine;
use crate::retrieval::RankedDoc;

pub const FIRST_ITERATION_ROW: &str = "First Iteration (average)";
pub const SECOND_ITERATION_ROW: &str = "Second Iteration (average)";
pub const HIGHEST_ROW: &str = "Highest Scores";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub regenerated_questions: usize,
    pub max_in_flight: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            regenerated_questions: DEFAULT_REGENERATED_QUESTIONS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScores {
    pub retrieved: usize,
    pub context_precision: MetricValue,
    pub context_recall: MetricValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub mode: OutputMode,
    pub difficulty: Difficulty,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration1: Option<ContextScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration2: Option<ContextScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_relevancy: Option<MetricValue>,
    #[serde(default)]
    pub supporting_ids: Vec<String>,
    #[serde(default)]
    pub insufficient_data: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub context_precision: Option<f64>,
    pub context_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTable {
    pub first_iteration: ContextRow,
    pub second_iteration: ContextRow,
    pub highest: ContextRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub mode: OutputMode,
    pub label: String,
    pub cases: usize,
    pub faithfulness: Option<f64>,
    pub answer_relevancy: Option<f64>,
}

/// Fraction of scored cases whose metric is exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeilingFractions {
    pub context_precision: Option<f64>,
    pub context_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DegenerateCounts {
    pub context_precision: usize,
    pub context_recall: usize,
    pub faithfulness: usize,
    pub answer_relevancy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_cases: usize,
    pub failed_cases: usize,
    pub counts_per_mode: BTreeMap<OutputMode, usize>,
    pub context_table: ContextTable,
    pub answer_table: Vec<AnswerRow>,
    pub ceiling_first_iteration: CeilingFractions,
    pub ceiling_second_iteration: CeilingFractions,
    pub degenerate: DegenerateCounts,
    pub cases: Vec<CaseResult>,
}

fn context_scores(docs: &[RankedDoc], ground_truth: &str, judge: &dyn RelevanceJudge) -> ContextScores {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    ContextScores {
        retrieved: docs.len(),
        context_precision: context_precision(&texts, ground_truth, judge),
        context_recall: context_recall(&texts, ground_truth, judge),
    }
}

fn evaluate_case(
    engine: &Engine,
    case: &TestCase,
    judge: &dyn RelevanceJudge,
    opts: &EvalOptions,
) -> CaseResult {
    let mut result = CaseResult {
        id: case.id.clone(),
        mode: case.mode,
        difficulty: case.difficulty,
        iteration1: None,
        iteration2: None,
        faithfulness: None,
        answer_relevancy: None,
        supporting_ids: Vec::new(),
        insufficient_data: false,
        error: None,
    };
    let outcome = match engine.query(&QueryRequest::new(case.question.clone(), case.mode)) {
        Ok(o) => o,
        Err(e) => {
            tracing::warn!(case = %case.id, error = %e, "evaluation case failed");
            result.error = Some(e.to_string());
            return result;
        }
    };
    let r = &outcome.retrieval;
    result.iteration1 = Some(context_scores(&r.iteration1, &case.ground_truth, judge));
    result.iteration2 = Some(context_scores(&r.iteration2, &case.ground_truth, judge));
    let answer = &outcome.answer;
    result.supporting_ids = answer.supporting_ids.clone();
    result.insufficient_data = answer.insufficient_data;
    if answer.insufficient_data {
        result.faithfulness = Some(MetricValue::degenerate("no context"));
        result.answer_relevancy = Some(MetricValue::degenerate("no context"));
    } else {
        let contexts: Vec<&str> = answer.context_used.iter().map(|d| d.text.as_str()).collect();
        result.faithfulness = Some(faithfulness(&answer.text, &contexts, judge));
        result.answer_relevancy = Some(answer_relevancy(
            &case.question,
            &answer.text,
            engine.providers.chat.as_ref(),
            engine.providers.embedder.as_ref(),
            opts.regenerated_questions,
        ));
    }
    result
}

/// Sum-then-divide in case order. Degenerate values count as their 0 score.
fn mean<'a>(values: impl Iterator<Item = Option<&'a MetricValue>>) -> Option<f64> {
    let scored: Vec<f64> = values.flatten().map(|m| m.score).collect();
    if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    }
}

fn max<'a>(values: impl Iterator<Item = Option<&'a MetricValue>>) -> Option<f64> {
    values
        .flatten()
        .map(|m| m.score)
        .reduce(f64::max)
}

fn ceiling<'a>(values: impl Iterator<Item = Option<&'a MetricValue>>) -> Option<f64> {
    let scored: Vec<f64> = values.flatten().map(|m| m.score).collect();
    if scored.is_empty() {
        None
    } else {
        Some(scored.iter().filter(|&&s| s == 1.0).count() as f64 / scored.len() as f64)
    }
}

fn it1(c: &CaseResult) -> Option<&ContextScores> {
    c.iteration1.as_ref()
}

fn it2(c: &CaseResult) -> Option<&ContextScores> {
    c.iteration2.as_ref()
}

fn precision(s: Option<&ContextScores>) -> Option<&MetricValue> {
    s.map(|s| &s.context_precision)
}

fn recall(s: Option<&ContextScores>) -> Option<&MetricValue> {
    s.map(|s| &s.context_recall)
}

fn degenerate<'a>(values: impl Iterator<Item = Option<&'a MetricValue>>) -> usize {
    values.flatten().filter(|m| m.degenerate).count()
}

impl EvalReport {
    /// Aggregates per-case results; cases are sorted by id first so the
    /// report does not depend on evaluation order.
    pub fn from_cases(mut cases: Vec<CaseResult>) -> Self {
        cases.sort_by(|a, b| a.id.cmp(&b.id));

        let row = |pick: &dyn Fn(&CaseResult) -> Option<&ContextScores>| ContextRow {
            context_precision: mean(cases.iter().map(|c| precision(pick(c)))),
            context_recall: mean(cases.iter().map(|c| recall(pick(c)))),
        };
        let both = || cases.iter().flat_map(|c| [it1(c), it2(c)]);
        let context_table = ContextTable {
            first_iteration: row(&it1),
            second_iteration: row(&it2),
            highest: ContextRow {
                context_precision: max(both().map(precision)),
                context_recall: max(both().map(recall)),
            },
        };

        let answer_table = OutputMode::ALL
            .into_iter()
            .map(|mode| {
                let mine = || cases.iter().filter(move |c| c.mode == mode);
                AnswerRow {
                    mode,
                    label: mode.label().to_string(),
                    cases: mine().count(),
                    faithfulness: mean(mine().map(|c| c.faithfulness.as_ref())),
                    answer_relevancy: mean(mine().map(|c| c.answer_relevancy.as_ref())),
                }
            })
            .collect();

        let ceil = |pick: &dyn Fn(&CaseResult) -> Option<&ContextScores>| CeilingFractions {
            context_precision: ceiling(cases.iter().map(|c| precision(pick(c)))),
            context_recall: ceiling(cases.iter().map(|c| recall(pick(c)))),
        };

        let mut counts_per_mode: BTreeMap<OutputMode, usize> =
            OutputMode::ALL.into_iter().map(|m| (m, 0)).collect();
        for c in &cases {
            *counts_per_mode.entry(c.mode).or_default() += 1;
        }

        Self {
            total_cases: cases.len(),
            failed_cases: cases.iter().filter(|c| c.error.is_some()).count(),
            counts_per_mode,
            context_table,
            answer_table,
            ceiling_first_iteration: ceil(&it1),
            ceiling_second_iteration: ceil(&it2),
            degenerate: DegenerateCounts {
                context_precision: degenerate(both().map(precision)),
                context_recall: degenerate(both().map(recall)),
                faithfulness: degenerate(cases.iter().map(|c| c.faithfulness.as_ref())),
                answer_relevancy: degenerate(cases.iter().map(|c| c.answer_relevancy.as_ref())),
            },
            cases,
        }
    }

    pub fn render_context_table(&self) -> String {
        let t = &self.context_table;
        let mut out = String::from("Iteration | Context Precision | Context Recall\n");
        for (label, row) in [
            (FIRST_ITERATION_ROW, &t.first_iteration),
            (SECOND_ITERATION_ROW, &t.second_iteration),
            (HIGHEST_ROW, &t.highest),
        ] {
            let _ = writeln!(
                out,
                "{label} | {} | {}",
                cell(row.context_precision),
                cell(row.context_recall)
            );
        }
        out
    }

    pub fn render_answer_table(&self) -> String {
        let mut out = String::from("Query Type | Faithfulness (Avg) | Answer Relevancy (Avg)\n");
        for row in &self.answer_table {
            let _ = writeln!(
                out,
                "{} | {} | {}",
                row.label,
                cell(row.faithfulness),
                cell(row.answer_relevancy)
            );
        }
        out
    }

    /// Both tables plus case counts and ceiling fractions.
    pub fn render_tables(&self) -> String {
        let mut out = String::from("Context extraction\n");
        out.push_str(&self.render_context_table());
        out.push_str("\nAnswer generation\n");
        out.push_str(&self.render_answer_table());
        let _ = writeln!(
            out,
            "\nCases: {} ({} failed)",
            self.total_cases, self.failed_cases
        );
        let _ = writeln!(
            out,
            "Scores of 1 (second iteration): context precision {}, context recall {}",
            percent(self.ceiling_second_iteration.context_precision),
            percent(self.ceiling_second_iteration.context_recall)
        );
        out
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.0}%", v * 100.0))
}

/// Minimum acceptable averages. A missing average counts as a violation when
/// a bound is configured for it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    pub min_context_precision: Option<f64>,
    pub min_context_recall: Option<f64>,
    pub min_faithfulness: Option<f64>,
    pub min_answer_relevancy: Option<f64>,
}

impl EvalThresholds {
    pub fn violations(&self, report: &EvalReport) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, bound: Option<f64>, actual: Option<f64>| {
            if let Some(b) = bound {
                match actual {
                    Some(a) if a >= b => {}
                    Some(a) => out.push(format!("{name}: {a:.4} < {b:.4}")),
                    None => out.push(format!("{name}: no scored cases (bound {b:.4})")),
                }
            }
        };
        let second = &report.context_table.second_iteration;
        check("context precision (second iteration)", self.min_context_precision, second.context_precision);
        check("context recall (second iteration)", self.min_context_recall, second.context_recall);
        for row in &report.answer_table {
            if row.cases == 0 {
                continue;
            }
            check(&format!("faithfulness ({})", row.label), self.min_faithfulness, row.faithfulness);
            check(
                &format!("answer relevancy ({})", row.label),
                self.min_answer_relevancy,
                row.answer_relevancy,
            );
        }
        out
    }
}

/// Runs every case end to end. A failing case is recorded and the run
/// continues.
pub fn run_eval(
    engine: &Engine,
    testcases: &[TestCase],
    judge: &dyn RelevanceJudge,
    opts: &EvalOptions,
) -> EvalReport {
    let cases = bounded_map(testcases, opts.max_in_flight, |c| evaluate_case(engine, c, judge, opts));
    EvalReport::from_cases(cases)
}
