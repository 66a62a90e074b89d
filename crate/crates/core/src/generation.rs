//! Reasoning plan, pseudo-SQL augmentation, prompt assembly and SQL generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::example::DecomposedExample;
use crate::knowledge::{Instruction, KnowledgeSet};
use crate::model::{ModelClient, ModelError, Role};
use crate::retrieval::{similarity, CanonicalQuery, RetrievalResult};
use crate::schema::{render_schema, SchemaRepresentation};
use crate::sql::{parse_query, strip_model_artifacts};

pub const FALLBACK_STEP: &str = "answer the query directly";
/// Minimum similarity for attaching an example clause to a plan step.
pub const PSEUDO_SQL_THRESHOLD: f64 = 0.2;
pub const NONE_MARKER: &str = "(none)";

pub const H_INPUT: &str = "### Input Query";
pub const H_SCHEMA: &str = "### Schema Representation";
pub const H_INSTRUCTIONS: &str = "### Intent-specific Instructions:";
pub const H_EXAMPLES: &str = "### Example Decompositions";
pub const H_PLAN: &str = "### Reasoning Plan";
pub const H_PREVIOUS: &str = "### Previous Attempt";
pub const H_FEEDBACK: &str = "### Feedback";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerationError {
    #[error("model output is not a single SELECT query: {message}")]
    UnparsableGeneration { sql: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_sql: Option<String>,
    #[serde(default)]
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTPlan {
    pub steps: Vec<PlanStep>,
}

impl CoTPlan {
    pub fn fallback() -> Self {
        CoTPlan {
            steps: vec![PlanStep {
                description: FALLBACK_STEP.into(),
                pseudo_sql: None,
                refs: Vec::new(),
            }],
        }
    }

    pub fn render(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| match &s.pseudo_sql {
                Some(p) => format!("{}. {} [{p}]", i + 1, s.description),
                None => format!("{}. {}", i + 1, s.description),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn numbered(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .map(str::trim)
}

/// Split a trailing `[...]` off a step line.
fn split_pseudo(text: &str) -> (String, Option<String>) {
    let t = text.trim();
    if t.ends_with(']') {
        if let Some(open) = t.find('[') {
            let inner = t[open + 1..t.len() - 1].trim();
            if !inner.is_empty() {
                return (t[..open].trim().to_string(), Some(inner.to_string()));
            }
        }
    }
    (t.to_string(), None)
}

/// Tables and columns of `schema` named in `text`, as `TABLE` / `TABLE.COLUMN`.
fn schema_refs(text: &str, schema: &SchemaRepresentation) -> Vec<String> {
    let upper = text.to_ascii_uppercase();
    let words: Vec<&str> = upper
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .collect();
    let mut refs = Vec::new();
    for t in &schema.tables {
        let tn = t.name.to_ascii_uppercase();
        if words.contains(&tn.as_str()) {
            refs.push(t.name.clone());
        }
        for c in &t.columns {
            if words.contains(&c.name.to_ascii_uppercase().as_str()) {
                refs.push(format!("{}.{}", t.name, c.name));
            }
        }
    }
    refs
}

/// Parse a numbered plan. Returns None when nothing usable was found.
pub fn parse_plan(text: &str, schema: &SchemaRepresentation) -> Option<CoTPlan> {
    let mut steps: Vec<PlanStep> = Vec::new();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for line in &lines {
        if let Some(body) = numbered(line) {
            if body.is_empty() {
                continue;
            }
            let (description, pseudo_sql) = split_pseudo(body);
            steps.push(PlanStep {
                description,
                pseudo_sql,
                refs: Vec::new(),
            });
        } else if let Some(last) = steps.last_mut() {
            // wrapped continuation of the previous step
            let merged = format!(
                "{} {}{}",
                last.description,
                line.trim(),
                last.pseudo_sql.as_ref().map(|p| format!(" [{p}]")).unwrap_or_default()
            );
            let (description, pseudo_sql) = split_pseudo(&merged);
            last.description = description;
            last.pseudo_sql = pseudo_sql;
        }
    }
    if steps.is_empty() && lines.len() == 1 {
        let (description, pseudo_sql) = split_pseudo(lines[0]);
        steps.push(PlanStep {
            description,
            pseudo_sql,
            refs: Vec::new(),
        });
    }
    if steps.is_empty() {
        return None;
    }
    for s in &mut steps {
        let text = format!("{} {}", s.description, s.pseudo_sql.as_deref().unwrap_or(""));
        s.refs = schema_refs(&text, schema);
    }
    Some(CoTPlan { steps })
}

fn plan_prompt(cq: &CanonicalQuery, rr: &RetrievalResult, ks: &KnowledgeSet) -> String {
    let schema = render_schema(&rr.pruned_schema, None).unwrap_or_default();
    let instructions = retrieved_instructions(rr, ks);
    format!(
        "### Task\nWrite a numbered step-by-step plan for the SQL query that answers the request. \
         One step per line as `N. description`, optionally ending with pseudo-SQL in square \
         brackets.\n\n{H_INPUT}\n{}\n\n{H_SCHEMA}\n{}\n{H_INSTRUCTIONS}\n{}\n",
        cq.reformulated,
        or_none(schema.trim_end()),
        or_none(&render_instructions(&instructions)),
    )
}

/// Ask the model for a plan; malformed output or a model error yields the
/// single fallback step. The flag reports the fallback.
pub fn build_plan(
    cq: &CanonicalQuery,
    rr: &RetrievalResult,
    ks: &KnowledgeSet,
    model: &mut ModelClient,
) -> (CoTPlan, bool) {
    match model.complete(&plan_prompt(cq, rr, ks), Role::Plan) {
        Ok(text) => match parse_plan(&text, &rr.pruned_schema) {
            Some(plan) => (plan, false),
            None => (CoTPlan::fallback(), true),
        },
        Err(e) => {
            log::warn!("plan model call failed: {e}");
            (CoTPlan::fallback(), true)
        }
    }
}

/// Attach the most similar example clause to steps that have no pseudo-SQL.
/// Steps are never added, removed or reordered.
pub fn augment_with_pseudo_sql(plan: &CoTPlan, examples: &[&DecomposedExample]) -> CoTPlan {
    let clauses: Vec<&str> = examples
        .iter()
        .flat_map(|e| e.bundles())
        .flat_map(|b| b.clauses())
        .collect();
    let steps = plan
        .steps
        .iter()
        .map(|step| {
            if step.pseudo_sql.is_some() {
                return step.clone();
            }
            let mut best: Option<(&str, f64)> = None;
            for c in &clauses {
                let s = similarity(&step.description, c);
                if s >= PSEUDO_SQL_THRESHOLD && best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            PlanStep {
                pseudo_sql: best.map(|(c, _)| c.to_string()),
                ..step.clone()
            }
        })
        .collect();
    CoTPlan { steps }
}

/// Prompt sections in fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub sections: Vec<(String, String)>,
}

impl PromptBundle {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (heading, body) in &self.sections {
            out.push_str(heading);
            out.push('\n');
            out.push_str(body);
            out.push_str("\n\n");
        }
        out
    }
}

fn or_none(text: &str) -> String {
    if text.trim().is_empty() {
        NONE_MARKER.to_string()
    } else {
        text.to_string()
    }
}

fn retrieved_instructions<'a>(rr: &RetrievalResult, ks: &'a KnowledgeSet) -> Vec<&'a Instruction> {
    rr.instructions
        .iter()
        .filter_map(|s| ks.instruction(&s.id))
        .collect()
}

/// Numbered guideline list, snippets on an indented `e.g.` line.
pub fn render_instructions(instructions: &[&Instruction]) -> String {
    instructions
        .iter()
        .enumerate()
        .map(|(i, instr)| {
            let n = format!("{}. ", i + 1);
            match &instr.sql_snippet {
                Some(s) => format!("{n}{}\n{}e.g. {s}", instr.text, " ".repeat(n.len())),
                None => format!("{n}{}", instr.text),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble_prompt(cq: &CanonicalQuery, rr: &RetrievalResult, ks: &KnowledgeSet, plan: &CoTPlan) -> PromptBundle {
    let schema = render_schema(&rr.pruned_schema, None).unwrap_or_default();
    let instructions = render_instructions(&retrieved_instructions(rr, ks));
    let examples = rr
        .examples
        .iter()
        .filter_map(|s| ks.examples.get(&s.id))
        .map(|e| serde_json::to_string_pretty(e).expect("examples serialize"))
        .collect::<Vec<_>>()
        .join("\n\n");
    PromptBundle {
        sections: vec![
            (H_INPUT.into(), or_none(&cq.reformulated)),
            (H_SCHEMA.into(), or_none(schema.trim_end())),
            (H_INSTRUCTIONS.into(), or_none(&instructions)),
            (H_EXAMPLES.into(), or_none(&examples)),
            (H_PLAN.into(), or_none(&plan.render())),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub role: Role,
    /// 1 for the first generation; corrections count up from 2.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSql {
    pub sql: String,
    pub plan: CoTPlan,
    pub provenance: Provenance,
}

const OUTPUT_RULE: &str =
    "### Output\nReturn exactly one SQL SELECT statement (a WITH clause is allowed) and nothing else.\n";

/// Strip model artifacts and require one query statement.
pub fn clean_candidate(text: &str) -> Result<String, GenerationError> {
    let sql = strip_model_artifacts(text);
    match parse_query(&sql) {
        Ok(_) => Ok(sql),
        Err(e) => Err(GenerationError::UnparsableGeneration {
            sql,
            message: e.to_string(),
        }),
    }
}

/// Generate SQL. With `reask`, an unparsable reply gets one more attempt
/// carrying the parser's message.
pub fn generate_sql(
    bundle: &PromptBundle,
    plan: &CoTPlan,
    model: &mut ModelClient,
    reask: bool,
) -> Result<CandidateSql, GenerationError> {
    let prompt = format!("{}{OUTPUT_RULE}", bundle.render());
    let first = model.complete(&prompt, Role::Generate)?;
    let sql = match clean_candidate(&first) {
        Ok(sql) => sql,
        Err(GenerationError::UnparsableGeneration { sql, message }) if reask => {
            let retry = format!(
                "{prompt}\n{H_PREVIOUS}\n{sql}\n\n### Parse Error\n{message}\n\n{OUTPUT_RULE}"
            );
            clean_candidate(&model.complete(&retry, Role::Generate)?)?
        }
        Err(e) => return Err(e),
    };
    Ok(CandidateSql {
        sql,
        plan: plan.clone(),
        provenance: Provenance {
            role: Role::Generate,
            attempt: 1,
        },
    })
}
