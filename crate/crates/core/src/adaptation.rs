//! Folding user verdicts and execution errors back into the knowledge set.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sqlparser::dialect::GenericDialect;
use sqlparser::keywords::Keyword;
use sqlparser::tokenizer::{Token, Tokenizer};
use thiserror::Error;

use crate::correction::{CorrectionStatus, ExecutionFeedback, FeedbackKind};
use crate::decomposer::decompose;
use crate::example::annotate;
use crate::knowledge::{short_hash, write_atomic, Instruction, InstructionSource, KnowledgeError, KnowledgeSet};
use crate::model::{ModelClient, Role};
use crate::retrieval::CanonicalQuery;
use crate::sql::parse_query;

pub const REQUESTS_DIR: &str = "requests";
pub const REJECTIONS_FILE: &str = "rejections.ndjson";
pub const ERROR_JOURNAL_FILE: &str = "error_journal.ndjson";
/// Rejections that must share a correction pattern before a guideline is derived.
pub const DEFAULT_N_REJ: usize = 3;
/// Token-product cap for the diff table.
const MAX_DIFF_CELLS: usize = 4_000_000;

#[derive(Debug, Error)]
pub enum AdaptationError {
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("invalid correction: {0}")]
    InvalidCorrection(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("io error: {0}")]
    Io(String),
}

impl From<io::Error> for AdaptationError {
    fn from(e: io::Error) -> Self {
        AdaptationError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    #[default]
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub request_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub source: FeedbackSource,
}

impl Feedback {
    pub fn accept(request_id: impl Into<String>) -> Self {
        Feedback {
            request_id: request_id.into(),
            verdict: Verdict::Accept,
            corrected_sql: None,
            note: None,
            source: FeedbackSource::User,
        }
    }

    pub fn reject(request_id: impl Into<String>, corrected_sql: Option<String>) -> Self {
        Feedback {
            request_id: request_id.into(),
            verdict: Verdict::Reject,
            corrected_sql,
            note: None,
            source: FeedbackSource::User,
        }
    }
}

/// Feedback applied to a request, with the version it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub feedback: Feedback,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<String>,
    pub timestamp: String,
}

/// Context kept for every inference so later feedback can be resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: String,
    pub nl: String,
    pub canonical: CanonicalQuery,
    pub example_ids: Vec<String>,
    pub instruction_ids: Vec<String>,
    pub sql: String,
    pub status: CorrectionStatus,
    pub knowledge_version: u64,
    pub timestamp: String,
    #[serde(default)]
    pub feedback: Vec<FeedbackEvent>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Request records under `<knowledge_dir>/requests/<id>.json`.
#[derive(Debug, Clone)]
pub struct RequestStore {
    dir: PathBuf,
}

impl RequestStore {
    pub fn new(knowledge_dir: impl AsRef<Path>) -> Self {
        RequestStore {
            dir: knowledge_dir.as_ref().join(REQUESTS_DIR),
        }
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        // ids come from clients; keep them inside the store
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| self.dir.join(format!("{id}.json")))
    }

    pub fn save(&self, record: &RequestRecord) -> Result<(), AdaptationError> {
        let path = self
            .path(&record.request_id)
            .ok_or_else(|| AdaptationError::UnknownRequest(record.request_id.clone()))?;
        fs::create_dir_all(&self.dir)?;
        let body = serde_json::to_vec_pretty(record).expect("request records serialize");
        write_atomic(&path, &body)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<RequestRecord, AdaptationError> {
        let path = self
            .path(id)
            .ok_or_else(|| AdaptationError::UnknownRequest(id.to_string()))?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(AdaptationError::UnknownRequest(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| AdaptationError::Io(format!("{}: {e}", path.display())))
    }
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<(), AdaptationError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut line = serde_json::to_string(record).expect("journal records serialize");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    // one write per record keeps appends whole
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AdaptationError> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AdaptationError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub request_id: String,
    pub version: u64,
    pub source: FeedbackSource,
    pub original_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp: String,
}

pub fn log_rejection(knowledge_dir: &Path, entry: &RejectionEntry) -> Result<(), AdaptationError> {
    append_line(&knowledge_dir.join(REJECTIONS_FILE), entry)
}

pub fn read_rejections(knowledge_dir: &Path) -> Result<Vec<RejectionEntry>, AdaptationError> {
    read_lines(&knowledge_dir.join(REJECTIONS_FILE))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorJournalEntry {
    pub request_id: String,
    pub version: u64,
    pub kind: FeedbackKind,
    pub message: String,
    pub timestamp: String,
}

pub fn record_execution_error(
    knowledge_dir: &Path,
    request_id: &str,
    version: u64,
    feedback: &ExecutionFeedback,
) -> Result<(), AdaptationError> {
    let entry = ErrorJournalEntry {
        request_id: request_id.to_string(),
        version,
        kind: feedback.kind,
        message: feedback.message.clone(),
        timestamp: now(),
    };
    append_line(&knowledge_dir.join(ERROR_JOURNAL_FILE), &entry)
}

pub fn read_error_journal(knowledge_dir: &Path) -> Result<Vec<ErrorJournalEntry>, AdaptationError> {
    read_lines(&knowledge_dir.join(ERROR_JOURNAL_FILE))
}

fn diff_tokens(sql: &str) -> Option<Vec<String>> {
    let tokens = Tokenizer::new(&GenericDialect {}, sql).tokenize().ok()?;
    Some(
        tokens
            .into_iter()
            .filter_map(|t| match t {
                Token::Whitespace(_) | Token::LParen | Token::RParen | Token::SemiColon | Token::EOF => None,
                Token::Word(w) if w.quote_style.is_some() || w.keyword == Keyword::NoKeyword => {
                    Some("<ID>".to_string())
                }
                Token::Word(w) => Some(w.value.to_ascii_uppercase()),
                other => Some(other.to_string()),
            })
            .collect(),
    )
}

/// Normalized pattern of the edit from `original` to `corrected`: inserted
/// and deleted tokens, sorted, with identifiers folded to `<ID>`. None when
/// either side does not tokenize or nothing changed.
pub fn correction_signature(original: &str, corrected: &str) -> Option<String> {
    let a = diff_tokens(original)?;
    let b = diff_tokens(corrected)?;
    if a.len().saturating_mul(b.len()) > MAX_DIFF_CELLS {
        return None;
    }
    // lcs[i][j] = LCS length of a[i..], b[j..]
    let mut lcs = vec![vec![0u32; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let (mut inserted, mut deleted) = (Vec::new(), Vec::new());
    while i < a.len() && j < b.len() {
        if a[i] == b[j] {
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            deleted.push(a[i].clone());
            i += 1;
        } else {
            inserted.push(b[j].clone());
            j += 1;
        }
    }
    deleted.extend(a[i..].iter().cloned());
    inserted.extend(b[j..].iter().cloned());
    if inserted.is_empty() && deleted.is_empty() {
        return None;
    }
    inserted.sort();
    deleted.sort();
    Some(format!("+[{}] -[{}]", inserted.join(" "), deleted.join(" ")))
}

fn derive_prompt(pairs: &[&(String, String)]) -> String {
    let mut out = String::from(
        "### Task\nAnalysts made the same kind of correction to several generated queries. \
         State the rule they applied as one guideline for future queries. Reply with the \
         guideline on the first line, optionally followed by a line `e.g. <SQL fragment>`.\n\n\
         ### Corrections\n",
    );
    for (n, (before, after)) in pairs.iter().enumerate() {
        out.push_str(&format!("{}. Before:\n{before}\n   After:\n{after}\n", n + 1));
    }
    out
}

/// Derive a guideline once `n_rej` corrections share a pattern. Patterns
/// already turned into an instruction in `ks` are skipped, so the model is
/// asked at most once per pattern.
pub fn derive_instruction(
    rejections: &[(String, String)],
    model: &mut ModelClient,
    n_rej: usize,
    ks: &KnowledgeSet,
) -> Option<Instruction> {
    let mut groups: BTreeMap<String, Vec<&(String, String)>> = BTreeMap::new();
    for pair in rejections {
        if let Some(sig) = correction_signature(&pair.0, &pair.1) {
            groups.entry(sig).or_default().push(pair);
        }
    }
    let (signature, pairs) = groups
        .into_iter()
        .filter(|(sig, pairs)| pairs.len() >= n_rej.max(1) && ks.instruction(&adaptation_id(sig)).is_none())
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(&a.0)))?;
    let reply = match model.complete(&derive_prompt(&pairs), Role::Derive) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("instruction derivation failed: {e}");
            return None;
        }
    };
    let mut text = None;
    let mut snippet = None;
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(s) = line.strip_prefix("e.g.").or_else(|| line.strip_prefix("SQL:")) {
            snippet.get_or_insert_with(|| s.trim().to_string());
        } else if text.is_none() {
            text = Some(line.to_string());
        }
    }
    Some(Instruction {
        id: adaptation_id(&signature),
        text: text?,
        sql_snippet: snippet,
        intents: Vec::new(),
        source: InstructionSource::Adaptation,
    })
}

fn adaptation_id(signature: &str) -> String {
    format!("adapt-{}", short_hash(signature))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<String>,
}

fn promote(
    sql: &str,
    record: &RequestRecord,
    ks: &mut KnowledgeSet,
    model: &mut ModelClient,
) -> Result<Option<String>, AdaptationError> {
    let sketch = decompose(sql).map_err(|e| AdaptationError::InvalidCorrection(e.to_string()))?;
    let example = annotate(&sketch, Some(&record.nl), model)
        .map_err(|e| AdaptationError::InvalidCorrection(e.to_string()))?;
    match ks.add_example(example, &record.canonical.intent) {
        Ok(id) => Ok(Some(id)),
        // already promoted under this intent
        Err(KnowledgeError::DuplicateExample { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Apply one verdict. Only additive changes are made to `ks`; the request
/// record gains a feedback event and rejections are logged.
pub fn ingest_feedback(
    fb: &Feedback,
    knowledge_dir: &Path,
    ks: &mut KnowledgeSet,
    model: &mut ModelClient,
    n_rej: usize,
) -> Result<IngestOutcome, AdaptationError> {
    let store = RequestStore::new(knowledge_dir);
    let mut record = store.load(&fb.request_id)?;
    let corrected = match (&fb.verdict, &fb.corrected_sql) {
        (Verdict::Reject, Some(sql)) => {
            let cleaned = crate::sql::strip_model_artifacts(sql);
            parse_query(&cleaned).map_err(|e| AdaptationError::InvalidCorrection(e.to_string()))?;
            Some(cleaned)
        }
        _ => None,
    };
    let mut outcome = IngestOutcome {
        version: ks.version,
        promoted: None,
        derived: None,
    };
    match fb.verdict {
        Verdict::Accept => outcome.promoted = promote(&record.sql, &record, ks, model)?,
        Verdict::Reject => {
            if let Some(sql) = &corrected {
                outcome.promoted = promote(sql, &record, ks, model)?;
            }
            log_rejection(
                knowledge_dir,
                &RejectionEntry {
                    request_id: record.request_id.clone(),
                    version: ks.version,
                    source: fb.source,
                    original_sql: record.sql.clone(),
                    corrected_sql: corrected.clone(),
                    note: fb.note.clone(),
                    timestamp: now(),
                },
            )?;
            if corrected.is_some() {
                let pairs: Vec<(String, String)> = read_rejections(knowledge_dir)?
                    .into_iter()
                    .filter_map(|r| r.corrected_sql.map(|c| (r.original_sql, c)))
                    .collect();
                if let Some(instr) = derive_instruction(&pairs, model, n_rej, ks) {
                    outcome.derived = Some(instr.id.clone());
                    ks.add_instruction(instr)?;
                }
            }
        }
    }
    outcome.version = ks.version;
    record.feedback.push(FeedbackEvent {
        feedback: fb.clone(),
        version: ks.version,
        promoted: outcome.promoted.clone(),
        derived: outcome.derived.clone(),
        timestamp: now(),
    });
    store.save(&record)?;
    Ok(outcome)
}
