//! The external knowledge set: intent-partitioned examples, instructions and
//! schema, with versioned on-disk snapshots.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::db::Database;
use crate::decomposer::decompose;
use crate::example::{annotate, DecomposedExample, ExampleError};
use crate::model::ModelClient;
use crate::retrieval::{classify_intent, RetrievalConfig};
use crate::schema::{introspect, load_schema_file, SchemaRepresentation};
use crate::sql::normalize;

pub const EXAMPLES_FILE: &str = "examples.json";
pub const INSTRUCTIONS_FILE: &str = "instructions.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const PARTITIONS_FILE: &str = "partitions.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("example {id} already present under intent {intent}")]
    DuplicateExample { intent: String, id: String },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

impl From<io::Error> for KnowledgeError {
    fn from(e: io::Error) -> Self {
        KnowledgeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionSource {
    ExampleDerived,
    Document,
    Adaptation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql_snippet: Option<String>,
    /// Empty means the instruction applies to every intent.
    #[serde(default)]
    pub intents: Vec<String>,
    pub source: InstructionSource,
}

impl Instruction {
    /// Text used for similarity: guideline plus snippet.
    pub fn retrieval_text(&self) -> String {
        match &self.sql_snippet {
            Some(s) => format!("{} {s}", self.text),
            None => self.text.clone(),
        }
    }
}

pub fn short_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string()
}

/// Example ids depend on the query and its question only.
pub fn example_id(ex: &DecomposedExample) -> String {
    format!("ex-{}", short_hash(&format!("{}\n{}", ex.full_sql_query, ex.input_nl)))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeSet {
    pub examples: BTreeMap<String, DecomposedExample>,
    /// Insertion order is kept.
    pub instructions: Vec<Instruction>,
    pub schema: SchemaRepresentation,
    pub partitions: BTreeMap<String, Vec<String>>,
    pub version: u64,
}

impl KnowledgeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn instruction(&self, id: &str) -> Option<&Instruction> {
        self.instructions.iter().find(|i| i.id == id)
    }

    /// Intents whose partition contains `id`.
    pub fn intents_of(&self, id: &str) -> Vec<&str> {
        self.partitions
            .iter()
            .filter(|(_, ids)| ids.iter().any(|x| x == id))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Validate and append `ex` to `partitions[intent]`. Returns the id.
    /// The same example may sit in several partitions.
    pub fn add_example(&mut self, ex: DecomposedExample, intent: &str) -> Result<String, KnowledgeError> {
        let intent = intent.trim();
        if intent.is_empty() {
            return Err(KnowledgeError::InvalidExample("empty intent".into()));
        }
        ex.validate()
            .map_err(|e| KnowledgeError::InvalidExample(e.to_string()))?;
        let id = example_id(&ex);
        if let Some(members) = self.partitions.get(intent) {
            if let Some(dup) = members
                .iter()
                .find(|m| self.examples[*m].full_sql_query == ex.full_sql_query)
            {
                return Err(KnowledgeError::DuplicateExample {
                    intent: intent.to_string(),
                    id: dup.clone(),
                });
            }
        }
        self.examples.entry(id.clone()).or_insert(ex);
        self.partitions
            .entry(intent.to_string())
            .or_default()
            .push(id.clone());
        self.version += 1;
        Ok(id)
    }

    pub fn add_instruction(&mut self, instr: Instruction) -> Result<(), KnowledgeError> {
        if instr.text.trim().is_empty() {
            return Err(KnowledgeError::InvalidInstruction(format!("{}: empty text", instr.id)));
        }
        if instr.id.trim().is_empty() {
            return Err(KnowledgeError::InvalidInstruction("empty id".into()));
        }
        if self.instruction(&instr.id).is_some() {
            return Err(KnowledgeError::DuplicateId(instr.id));
        }
        self.instructions.push(instr);
        self.version += 1;
        Ok(())
    }

    /// Replace the schema. No-op (no version bump) when unchanged.
    pub fn set_schema(&mut self, schema: SchemaRepresentation) -> bool {
        if self.schema == schema {
            return false;
        }
        self.schema = schema;
        self.version += 1;
        true
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (intent, ids) in &self.partitions {
            for id in ids {
                if !self.examples.contains_key(id) {
                    return Err(format!("partition {intent} names missing example {id}"));
                }
            }
        }
        for id in self.examples.keys() {
            if self.intents_of(id).is_empty() {
                return Err(format!("example {id} belongs to no partition"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for i in &self.instructions {
            if !seen.insert(&i.id) {
                return Err(format!("duplicate instruction id {}", i.id));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> KnowledgeSummary {
        KnowledgeSummary {
            version: self.version,
            examples: self.examples.len(),
            instructions: self.instructions.len(),
            tables: self.schema.tables.iter().map(|t| t.name.clone()).collect(),
            partitions: self
                .partitions
                .iter()
                .map(|(k, v)| (k.clone(), v.len()))
                .collect(),
        }
    }

    /// Write every component, then the manifest. Output bytes depend only on
    /// the set's contents.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), KnowledgeError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let files = [
            (EXAMPLES_FILE, to_json(&self.examples)),
            (INSTRUCTIONS_FILE, to_json(&self.instructions)),
            (SCHEMA_FILE, to_json(&self.schema)),
            (PARTITIONS_FILE, to_json(&self.partitions)),
        ];
        let mut checksums = BTreeMap::new();
        for (name, body) in &files {
            write_atomic(&dir.join(name), body.as_bytes())?;
            checksums.insert(name.to_string(), hex::encode(Sha256::digest(body.as_bytes())));
        }
        let manifest = Manifest {
            version: self.version,
            checksums,
        };
        write_atomic(&dir.join(MANIFEST_FILE), to_json(&manifest).as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<KnowledgeSet, KnowledgeError> {
        let dir = dir.as_ref();
        let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)
            .map_err(|e| KnowledgeError::CorruptSnapshot(format!("{MANIFEST_FILE}: {e}")))?;
        let read = |name: &str| -> Result<String, KnowledgeError> {
            let body = fs::read_to_string(dir.join(name))
                .map_err(|e| KnowledgeError::CorruptSnapshot(format!("{name}: {e}")))?;
            let expected = manifest
                .checksums
                .get(name)
                .ok_or_else(|| KnowledgeError::CorruptSnapshot(format!("{name}: no checksum")))?;
            if hex::encode(Sha256::digest(body.as_bytes())) != *expected {
                return Err(KnowledgeError::CorruptSnapshot(format!("{name}: checksum mismatch")));
            }
            Ok(body)
        };
        fn parse<T: serde::de::DeserializeOwned>(name: &str, body: &str) -> Result<T, KnowledgeError> {
            serde_json::from_str(body).map_err(|e| KnowledgeError::CorruptSnapshot(format!("{name}: {e}")))
        }
        let ks = KnowledgeSet {
            examples: parse(EXAMPLES_FILE, &read(EXAMPLES_FILE)?)?,
            instructions: parse(INSTRUCTIONS_FILE, &read(INSTRUCTIONS_FILE)?)?,
            schema: parse(SCHEMA_FILE, &read(SCHEMA_FILE)?)?,
            partitions: parse(PARTITIONS_FILE, &read(PARTITIONS_FILE)?)?,
            version: manifest.version,
        };
        ks.check_invariants().map_err(KnowledgeError::CorruptSnapshot)?;
        Ok(ks)
    }

    /// Load if a snapshot exists, else an empty set.
    pub fn load_or_default(dir: impl AsRef<Path>) -> Result<KnowledgeSet, KnowledgeError> {
        if dir.as_ref().join(MANIFEST_FILE).exists() {
            Self::load(dir)
        } else {
            Ok(KnowledgeSet::default())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub version: u64,
    pub examples: usize,
    pub instructions: usize,
    pub tables: Vec<String>,
    pub partitions: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u64,
    checksums: BTreeMap<String, String>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("knowledge components serialize");
    s.push('\n');
    s
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// One query from a log file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    /// `file:statement-number` for reports.
    pub source: String,
    pub sql: String,
    pub nl_hint: Option<String>,
}

/// Split a `.sql` log into statements. A `-- nl: <question>` comment inside
/// a statement supplies its question.
pub fn split_sql_log(text: &str, source: &str) -> Vec<LogEntry> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    let flush = |stmt: &mut String, out: &mut Vec<LogEntry>| {
        let mut nl_hint = None;
        let mut has_code = false;
        for line in stmt.lines() {
            let t = line.trim();
            if let Some(c) = t.strip_prefix("--") {
                if let Some(h) = c.trim().strip_prefix("nl:") {
                    nl_hint = Some(h.trim().to_string());
                }
            } else if !t.is_empty() {
                has_code = true;
            }
        }
        if has_code {
            out.push(LogEntry {
                source: format!("{source}:{}", out.len() + 1),
                sql: stmt.trim().to_string(),
                nl_hint,
            });
        }
        stmt.clear();
    };
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' => {
                current.push(c);
                for q in chars.by_ref() {
                    current.push(q);
                    if q == c {
                        break;
                    }
                }
            }
            '-' if chars.peek() == Some(&'-') => {
                current.push(c);
                for q in chars.by_ref() {
                    current.push(q);
                    if q == '\n' {
                        break;
                    }
                }
            }
            ';' => flush(&mut current, &mut out),
            c => current.push(c),
        }
    }
    flush(&mut current, &mut out);
    out
}

#[derive(Debug, Deserialize)]
struct InstructionEntry {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    sql_snippet: Option<String>,
    #[serde(default)]
    intents: Vec<String>,
}

/// Parse an instruction document: a JSON array of `{text, sql_snippet?,
/// intents?, id?}`, or numbered text where continuation lines starting with
/// `e.g.` or `SQL:` carry the snippet and other continuation lines extend the
/// guideline.
pub fn parse_instruction_doc(text: &str, stem: &str) -> Result<Vec<Instruction>, String> {
    if text.trim_start().starts_with('[') {
        let entries: Vec<InstructionEntry> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        return Ok(entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| Instruction {
                id: e.id.unwrap_or_else(|| format!("{stem}-{}", i + 1)),
                text: e.text.trim().to_string(),
                sql_snippet: e.sql_snippet.filter(|s| !s.trim().is_empty()),
                intents: e.intents,
                source: InstructionSource::Document,
            })
            .collect());
    }
    let mut out: Vec<Instruction> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t == "..." {
            continue;
        }
        let numbered = t
            .split_once(". ")
            .filter(|(n, _)| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()));
        if let Some((n, body)) = numbered {
            out.push(Instruction {
                id: format!("{stem}-{n}"),
                text: body.trim().to_string(),
                sql_snippet: None,
                intents: Vec::new(),
                source: InstructionSource::Document,
            });
            continue;
        }
        let Some(cur) = out.last_mut() else {
            return Err(format!("line {}: text before the first numbered entry", lineno + 1));
        };
        let snippet = t
            .strip_prefix("e.g.")
            .or_else(|| t.strip_prefix("SQL:"))
            .map(str::trim);
        match snippet {
            Some(s) => {
                cur.sql_snippet = Some(match cur.sql_snippet.take() {
                    Some(prev) => format!("{prev} {s}"),
                    None => s.to_string(),
                })
            }
            None => {
                cur.text.push(' ');
                cur.text.push_str(t);
            }
        }
    }
    Ok(out)
}

pub enum SchemaSource<'a> {
    Database(&'a Database),
    File(PathBuf),
    /// Keep whatever schema the set already has.
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub source: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub examples: usize,
    pub instructions: usize,
    pub tables: usize,
    pub skipped: Vec<Skipped>,
}

/// Turn logs, documents and a schema source into knowledge, on top of `base`.
/// Bad inputs are skipped and reported, never fatal. `tables` counts only
/// a schema that differs from the one already held.
pub fn bootstrap(
    base: KnowledgeSet,
    logs: &[LogEntry],
    docs: &[(String, String)],
    schema_src: SchemaSource<'_>,
    model: &mut ModelClient,
    config: &RetrievalConfig,
) -> (KnowledgeSet, BootstrapReport) {
    let mut ks = base;
    let mut report = BootstrapReport::default();
    let skip = |report: &mut BootstrapReport, source: &str, reason: String| {
        log::warn!("skipping {source}: {reason}");
        report.skipped.push(Skipped {
            source: source.to_string(),
            reason,
        });
    };

    match schema_src {
        SchemaSource::Database(db) => match introspect(db) {
            Ok(s) => {
                let n = s.tables.len();
                if ks.set_schema(s) {
                    report.tables = n;
                }
            }
            Err(e) => skip(&mut report, "schema", e.to_string()),
        },
        SchemaSource::File(path) => match load_schema_file(&path) {
            Ok(s) => {
                let n = s.tables.len();
                if ks.set_schema(s) {
                    report.tables = n;
                }
            }
            Err(e) => skip(&mut report, &path.display().to_string(), e.to_string()),
        },
        SchemaSource::Keep => {}
    }

    for (name, text) in docs {
        match parse_instruction_doc(text, name) {
            Ok(list) => {
                for instr in list {
                    let id = instr.id.clone();
                    match ks.add_instruction(instr) {
                        Ok(()) => report.instructions += 1,
                        Err(e) => skip(&mut report, &format!("{name}#{id}"), e.to_string()),
                    }
                }
            }
            Err(e) => skip(&mut report, name, e),
        }
    }

    for entry in logs {
        let example = decompose(&entry.sql)
            .map_err(ExampleError::from)
            .and_then(|sketch| annotate(&sketch, entry.nl_hint.as_deref(), model));
        let example = match example {
            Ok(ex) => ex,
            Err(e) => {
                skip(&mut report, &entry.source, e.to_string());
                continue;
            }
        };
        let intent = classify_intent(&example.input_nl, &ks, model, config);
        let terms = example.complex_terms.clone();
        match ks.add_example(example, &intent) {
            Ok(_) => report.examples += 1,
            Err(e) => {
                skip(&mut report, &entry.source, e.to_string());
                continue;
            }
        }
        for term in terms {
            let instr = term_instruction(&term, &intent);
            if ks.instruction(&instr.id).is_none() && ks.add_instruction(instr).is_ok() {
                report.instructions += 1;
            }
        }
    }
    (ks, report)
}

/// Instruction carried by an example's complex term (`NAME: definition; SQL: expr`).
fn term_instruction(term: &str, intent: &str) -> Instruction {
    let (text, sql_snippet) = match term.split_once("; SQL:") {
        Some((t, s)) => (t.trim().to_string(), normalize_snippet(s)),
        None => (term.trim().to_string(), None),
    };
    Instruction {
        id: format!("term-{}", short_hash(term)),
        text,
        sql_snippet,
        intents: vec![intent.to_string()],
        source: InstructionSource::ExampleDerived,
    }
}

fn normalize_snippet(s: &str) -> Option<String> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    // validate as an expression when possible, keep the text either way
    Some(
        normalize(&format!("SELECT {s}"))
            .ok()
            .and_then(|n| n.strip_prefix("SELECT ").map(str::to_string))
            .unwrap_or_else(|| s.to_string()),
    )
}
