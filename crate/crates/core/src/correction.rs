//! Execution-guided self-correction.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::db::{Database, FailureKind, ResultTable, Value};
use crate::generation::{clean_candidate, CandidateSql, GenerationError, PromptBundle, Provenance, H_FEEDBACK, H_PREVIOUS};
use crate::model::{ModelClient, Role};
use crate::retrieval::CanonicalQuery;

pub const PREVIEW_ROWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    SyntaxError,
    RuntimeError,
    AssessmentFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPreview {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub row_count: usize,
    pub null_counts: Vec<usize>,
}

impl ExecutionPreview {
    pub fn of(table: &ResultTable) -> Self {
        ExecutionPreview {
            columns: table.columns.clone(),
            rows: table.rows.iter().take(PREVIEW_ROWS).cloned().collect(),
            row_count: table.row_count(),
            null_counts: table.null_counts(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("columns: {}\n", self.columns.join(", "));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Value::render_literal).collect();
            out.push_str(&format!("({})\n", cells.join(", ")));
        }
        out.push_str(&format!("row_count: {}", self.row_count));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub kind: FeedbackKind,
    /// Engine or assessor message, verbatim.
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows_preview: Option<ExecutionPreview>,
}

impl ExecutionFeedback {
    fn error(kind: FeedbackKind, message: impl Into<String>) -> Self {
        ExecutionFeedback {
            kind,
            message: message.into(),
            criterion: None,
            rows_preview: None,
        }
    }

    pub fn render(&self) -> String {
        let kind = match self.kind {
            FeedbackKind::SyntaxError => "syntax_error",
            FeedbackKind::RuntimeError => "runtime_error",
            FeedbackKind::AssessmentFailure => "assessment_failure",
        };
        let mut out = match &self.criterion {
            Some(c) => format!("{kind} ({c}): {}", self.message),
            None => format!("{kind}: {}", self.message),
        };
        if let Some(p) = &self.rows_preview {
            out.push_str("\nResult preview:\n");
            out.push_str(&p.render());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub max_rounds: u32,
    pub timeout_secs: u64,
    pub empty_result: bool,
    pub all_null_column: bool,
    /// 0 disables the row-count check.
    pub max_rows: usize,
    pub semantic_fit: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            max_rounds: 2,
            timeout_secs: 15,
            empty_result: true,
            all_null_column: true,
            max_rows: 10_000,
            semantic_fit: true,
        }
    }
}

impl CorrectionConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Execute `sql`; any failure becomes feedback. Timeouts count as runtime errors.
pub fn execute(sql: &str, db: &Database, timeout: Duration) -> Result<ResultTable, ExecutionFeedback> {
    db.query(sql, Some(timeout)).map_err(|f| match f.kind {
        FailureKind::Syntax => ExecutionFeedback::error(FeedbackKind::SyntaxError, f.message),
        FailureKind::Runtime => ExecutionFeedback::error(FeedbackKind::RuntimeError, f.message),
        FailureKind::Timeout => ExecutionFeedback::error(
            FeedbackKind::RuntimeError,
            format!("{} (timeout after {} s)", f.message, timeout.as_secs()),
        ),
    })
}

fn assessment(criterion: &str, message: String, table: &ResultTable) -> ExecutionFeedback {
    ExecutionFeedback {
        kind: FeedbackKind::AssessmentFailure,
        message,
        criterion: Some(criterion.into()),
        rows_preview: Some(ExecutionPreview::of(table)),
    }
}

/// Deterministic checks only; one entry per failed criterion.
pub fn check_result(table: &ResultTable, config: &CorrectionConfig) -> Vec<ExecutionFeedback> {
    let mut out = Vec::new();
    if config.empty_result && table.rows.is_empty() {
        out.push(assessment("empty_result", "the query returned no rows".into(), table));
    }
    if config.all_null_column && !table.rows.is_empty() {
        let n = table.row_count();
        for (c, _) in table.null_counts().iter().enumerate().filter(|(_, &k)| k == n) {
            out.push(assessment(
                "all_null_column",
                format!("column {} is NULL in every row", table.columns[c]),
                table,
            ));
        }
    }
    if config.max_rows > 0 && table.row_count() > config.max_rows {
        out.push(assessment(
            "row_count",
            format!("{} rows exceed the limit of {}", table.row_count(), config.max_rows),
            table,
        ));
    }
    out
}

fn assess_prompt(cq: &CanonicalQuery, sql: &str, preview: &ExecutionPreview) -> String {
    format!(
        "### Task\nDecide whether the result answers the request. Reply `OK`, or `FAIL: <reason>`.\n\n\
         ### Input Query\n{}\n\n### SQL\n{sql}\n\n### Result Preview\n{}\n",
        cq.reformulated,
        preview.render()
    )
}

/// Deterministic checks, then one model judgement on the preview. The model
/// is not consulted when a deterministic check already failed, and a model
/// error leaves the deterministic verdict in place.
pub fn assess(
    cq: &CanonicalQuery,
    sql: &str,
    table: &ResultTable,
    model: &mut ModelClient,
    config: &CorrectionConfig,
) -> Vec<ExecutionFeedback> {
    let failed = check_result(table, config);
    if !failed.is_empty() || !config.semantic_fit {
        return failed;
    }
    let preview = ExecutionPreview::of(table);
    let reply = match model.complete(&assess_prompt(cq, sql, &preview), Role::Assess) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("assessment model call failed: {e}");
            return Vec::new();
        }
    };
    let reply = reply.trim();
    let upper = reply.to_ascii_uppercase();
    if reply.is_empty() || upper.starts_with("OK") || upper.starts_with("PASS") {
        return Vec::new();
    }
    let message = if upper.starts_with("FAIL") {
        reply[4..].trim_start_matches([':', ' ']).trim().to_string()
    } else {
        reply.to_string()
    };
    vec![assessment("semantic_fit", message, table)]
}

pub fn correction_prompt(bundle: &PromptBundle, previous: &str, feedback: &[ExecutionFeedback]) -> String {
    let messages: Vec<String> = feedback.iter().map(ExecutionFeedback::render).collect();
    format!(
        "{}{H_PREVIOUS}\n{previous}\n\n{H_FEEDBACK}\n{}\n\n### Output\nReturn exactly one corrected SQL SELECT statement and nothing else.\n",
        bundle.render(),
        messages.join("\n")
    )
}

/// One re-generation with the failed SQL and all feedback appended to the
/// original bundle. No re-ask: an unparsable reply is returned as an error.
pub fn correct(
    candidate: &CandidateSql,
    feedback: &[ExecutionFeedback],
    bundle: &PromptBundle,
    model: &mut ModelClient,
) -> Result<CandidateSql, GenerationError> {
    assert!(!feedback.is_empty(), "correct called without feedback");
    let reply = model.complete(&correction_prompt(bundle, &candidate.sql, feedback), Role::Correct)?;
    Ok(CandidateSql {
        sql: clean_candidate(&reply)?,
        plan: candidate.plan.clone(),
        provenance: Provenance {
            role: Role::Correct,
            attempt: candidate.provenance.attempt + 1,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStatus {
    /// The first candidate passed.
    Clean,
    /// A later candidate passed.
    Corrected,
    /// Rounds ran out, or the model failed, before a candidate passed.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub sql: String,
    pub attempt: u32,
    /// False for a correction that did not parse.
    pub executed: bool,
    pub feedback: Vec<ExecutionFeedback>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    /// Last candidate that parsed.
    pub final_candidate: CandidateSql,
    pub status: CorrectionStatus,
    pub rounds_used: u32,
    pub history: Vec<Attempt>,
    /// Preview of the final candidate when it executed.
    pub preview: Option<ExecutionPreview>,
    /// Wall time per history entry, excluded from serialization.
    #[serde(skip)]
    pub attempt_ms: Vec<u64>,
}

impl CorrectionOutcome {
    pub fn executions(&self) -> usize {
        self.history.iter().filter(|a| a.executed).count()
    }
}

fn elapsed_ms(since: &mut Instant) -> u64 {
    let ms = since.elapsed().as_millis() as u64;
    *since = Instant::now();
    ms
}

/// Execute, assess and correct up to `config.max_rounds` times.
pub fn run_correction_loop(
    candidate: CandidateSql,
    cq: &CanonicalQuery,
    bundle: &PromptBundle,
    db: &Database,
    model: &mut ModelClient,
    config: &CorrectionConfig,
) -> CorrectionOutcome {
    let mut current = candidate;
    let mut history = Vec::new();
    let mut rounds_used = 0u32;
    let mut attempt_ms = Vec::new();
    let mut started = Instant::now();
    loop {
        let (mut feedback, preview) = match execute(&current.sql, db, config.timeout()) {
            Err(f) => (vec![f], None),
            Ok(table) => (
                assess(cq, &current.sql, &table, model, config),
                Some(ExecutionPreview::of(&table)),
            ),
        };
        history.push(Attempt {
            sql: current.sql.clone(),
            attempt: current.provenance.attempt,
            executed: true,
            feedback: feedback.clone(),
        });
        attempt_ms.push(elapsed_ms(&mut started));
        if feedback.is_empty() {
            let status = if rounds_used == 0 {
                CorrectionStatus::Clean
            } else {
                CorrectionStatus::Corrected
            };
            return CorrectionOutcome { final_candidate: current, status, rounds_used, history, preview, attempt_ms };
        }
        // an unparsable correction consumes a round without execution
        let mut previous = current.clone();
        loop {
            if rounds_used >= config.max_rounds {
                return CorrectionOutcome {
                    final_candidate: current,
                    status: CorrectionStatus::Exhausted,
                    rounds_used,
                    history,
                    preview,
                    attempt_ms,
                };
            }
            rounds_used += 1;
            match correct(&previous, &feedback, bundle, model) {
                Ok(next) => {
                    current = next;
                    break;
                }
                Err(GenerationError::UnparsableGeneration { sql, message }) => {
                    feedback = vec![ExecutionFeedback::error(FeedbackKind::SyntaxError, message)];
                    previous.sql = sql.clone();
                    previous.provenance = Provenance {
                        role: Role::Correct,
                        attempt: previous.provenance.attempt + 1,
                    };
                    history.push(Attempt {
                        sql,
                        attempt: previous.provenance.attempt,
                        executed: false,
                        feedback: feedback.clone(),
                    });
                    attempt_ms.push(elapsed_ms(&mut started));
                }
                Err(GenerationError::Model(e)) => {
                    log::warn!("correction model call failed: {e}");
                    return CorrectionOutcome {
                        final_candidate: current,
                        status: CorrectionStatus::Exhausted,
                        rounds_used,
                        history,
                        preview,
                        attempt_ms,
                    };
                }
            }
        }
    }
}
