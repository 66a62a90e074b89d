//! End-to-end orchestration: configuration, preprocessing, inference and
//! feedback over a shared, versioned knowledge set.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    ingest_feedback, log_rejection, record_execution_error, AdaptationError, Feedback, FeedbackSource, IngestOutcome,
    RejectionEntry, RequestRecord, RequestStore, DEFAULT_N_REJ,
};
use crate::correction::{run_correction_loop, Attempt, CorrectionConfig, CorrectionStatus, ExecutionPreview, FeedbackKind};
use crate::db::{Database, DbError};
use crate::generation::{assemble_prompt, augment_with_pseudo_sql, build_plan, generate_sql, CoTPlan, GenerationError};
use crate::knowledge::{
    bootstrap, split_sql_log, BootstrapReport, KnowledgeError, KnowledgeSet, KnowledgeSummary, SchemaSource,
};
use crate::model::{LanguageModel, ModelClient, ModelError, ModelSettings};
use crate::retrieval::{
    prune_schema, reformulate, retrieve_examples, retrieve_instructions, CanonicalQuery, LexicalScorer,
    RetrievalConfig, Scored,
};

/// Model calls one inference pass may make before any correction round.
pub const PASS_CALL_BUDGET: usize = 6;

/// Total model-call budget for one request.
pub fn call_budget(max_rounds: u32) -> usize {
    PASS_CALL_BUDGET + 2 * max_rounds as usize
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Database(#[from] DbError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(String),
    #[error("no usable inputs: {0}")]
    NoInputs(String),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub n_rej: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { n_rej: DEFAULT_N_REJ }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub request_timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { request_timeout_secs: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub knowledge_dir: PathBuf,
    /// SQLite database file queries run against.
    pub database: Option<PathBuf>,
    pub retrieval: RetrievalConfig,
    pub correction: CorrectionConfig,
    pub adaptation: AdaptationConfig,
    pub service: ServiceConfig,
    pub model: ModelSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            knowledge_dir: PathBuf::from("knowledge"),
            database: None,
            retrieval: RetrievalConfig::default(),
            correction: CorrectionConfig::default(),
            adaptation: AdaptationConfig::default(),
            service: ServiceConfig::default(),
            model: ModelSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse TOML. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut config: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.knowledge_dir);
        if let Some(db) = config.database.as_mut() {
            resolve(db);
        }
        if let Some(script) = config.model.script.as_mut() {
            resolve(script);
        }
        config.validate()?;
        Ok(config)
    }

    /// Read a config file, then overlay model settings from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::from_toml(&text, base)?;
        config.model = config.model.with_env()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.retrieval.validate().map_err(PipelineError::Config)?;
        if self.correction.max_rounds > 10 {
            return Err(PipelineError::Config(format!("max_rounds {} above 10", self.correction.max_rounds)));
        }
        if self.correction.timeout_secs == 0 || self.service.request_timeout_secs == 0 {
            return Err(PipelineError::Config("timeouts must be positive".into()));
        }
        if self.adaptation.n_rej == 0 {
            return Err(PipelineError::Config("n_rej must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Clean,
    Corrected,
    Exhausted,
    /// Generation never produced a parsable query.
    Unparsable,
    /// The model failed before any SQL existed.
    ModelError,
    /// The request budget ran out.
    Timeout,
}

impl From<CorrectionStatus> for QueryStatus {
    fn from(s: CorrectionStatus) -> Self {
        match s {
            CorrectionStatus::Clean => QueryStatus::Clean,
            CorrectionStatus::Corrected => QueryStatus::Corrected,
            CorrectionStatus::Exhausted => QueryStatus::Exhausted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub examples: Vec<Scored>,
    pub instructions: Vec<Scored>,
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub status: Option<CorrectionStatus>,
    pub rounds_used: u32,
    pub history: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fallbacks {
    pub reformulate: bool,
    pub prune: bool,
    pub plan: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    /// Stages in execution order.
    pub stages: Vec<StageTiming>,
    pub total_ms: u64,
    pub fallbacks: Fallbacks,
}

impl Timings {
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.stage.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub request_id: String,
    pub status: QueryStatus,
    pub nl: String,
    pub canonical: CanonicalQuery,
    pub sql: Option<String>,
    pub plan: CoTPlan,
    pub retrieval: RetrievalSummary,
    pub correction: CorrectionSummary,
    pub preview: Option<ExecutionPreview>,
    pub timings: Timings,
    pub model_calls: usize,
    pub knowledge_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryResponse {
    /// Response for a request abandoned by an outer deadline before the
    /// engine returned.
    pub fn timed_out(nl: &str, knowledge_version: u64, elapsed: Duration) -> Self {
        QueryResponse {
            request_id: format!("req-{}", uuid::Uuid::new_v4().simple()),
            status: QueryStatus::Timeout,
            nl: nl.to_string(),
            canonical: CanonicalQuery {
                original: nl.to_string(),
                reformulated: nl.to_string(),
                intent: String::new(),
                key_terms: Vec::new(),
            },
            sql: None,
            plan: CoTPlan::fallback(),
            retrieval: RetrievalSummary {
                examples: Vec::new(),
                instructions: Vec::new(),
                tables: Vec::new(),
            },
            correction: CorrectionSummary {
                status: None,
                rounds_used: 0,
                history: Vec::new(),
            },
            preview: None,
            timings: Timings {
                total_ms: elapsed.as_millis() as u64,
                ..Default::default()
            },
            model_calls: 0,
            knowledge_version,
            error: Some(format!("request exceeded {} ms", elapsed.as_millis())),
        }
    }

    /// JSON with the request id and wall-clock figures blanked, for
    /// comparing runs.
    pub fn comparable_json(&self) -> String {
        let mut copy = self.clone();
        copy.request_id.clear();
        copy.timings.total_ms = 0;
        for s in &mut copy.timings.stages {
            s.ms = 0;
        }
        serde_json::to_string(&copy).expect("responses serialize")
    }
}

struct Stopwatch {
    start: Instant,
    lap: Instant,
    deadline: Instant,
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn new(budget: Duration) -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            lap: now,
            deadline: now + budget,
            stages: Vec::new(),
        }
    }

    fn mark(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            ms: (now - self.lap).as_millis() as u64,
        });
        self.lap = now;
    }

    fn expired(&self) -> bool {
        Instant::now() >= self.deadline
    }
}

/// Shared engine state. Readers take an immutable snapshot of the knowledge
/// set; writers serialize on `writer` and publish a new snapshot.
pub struct Engine {
    config: PipelineConfig,
    knowledge: RwLock<Arc<KnowledgeSet>>,
    writer: Mutex<()>,
    db: Database,
    model: Arc<dyn LanguageModel>,
}

impl Engine {
    /// Open the database, load the knowledge set and build the model.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        let model = config.model.build()?;
        let path = config
            .database
            .clone()
            .ok_or_else(|| PipelineError::Config("`database` is required".into()))?;
        let db = Database::open_read_only(&path)?;
        Self::with_parts(config, model, db)
    }

    pub fn with_parts(
        config: PipelineConfig,
        model: Arc<dyn LanguageModel>,
        db: Database,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let ks = KnowledgeSet::load_or_default(&config.knowledge_dir)?;
        Ok(Engine {
            config,
            knowledge: RwLock::new(Arc::new(ks)),
            writer: Mutex::new(()),
            db,
            model,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn knowledge(&self) -> Arc<KnowledgeSet> {
        Arc::clone(&self.knowledge.read())
    }

    pub fn summary(&self) -> KnowledgeSummary {
        self.knowledge().summary()
    }

    pub fn request(&self, id: &str) -> Result<RequestRecord, PipelineError> {
        Ok(RequestStore::new(&self.config.knowledge_dir).load(id)?)
    }

    fn publish(&self, ks: KnowledgeSet) -> Result<(), PipelineError> {
        ks.persist(&self.config.knowledge_dir)?;
        *self.knowledge.write() = Arc::new(ks);
        Ok(())
    }

    /// Bootstrap from `.sql` logs and instruction documents. The schema is
    /// read from `schema_file` when given, else from the database.
    pub fn run_preprocess(
        &self,
        logs: Option<&Path>,
        docs: Option<&Path>,
        schema_file: Option<&Path>,
    ) -> Result<BootstrapReport, PipelineError> {
        let mut entries = Vec::new();
        for path in list_files(logs, &["sql"])? {
            let text = fs::read_to_string(&path)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            entries.extend(split_sql_log(&text, &name));
        }
        let mut documents = Vec::new();
        for path in list_files(docs, &["txt", "md", "json"])? {
            let stem = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            documents.push((stem, fs::read_to_string(&path)?));
        }

        let _guard = self.writer.lock();
        let base = (*self.knowledge()).clone();
        let schema_src = match schema_file {
            Some(p) => SchemaSource::File(p.to_path_buf()),
            None => SchemaSource::Database(&self.db),
        };
        let mut model = ModelClient::new(self.model.as_ref());
        let before = base.version;
        let empty_before = base.examples.is_empty() && base.instructions.is_empty();
        let (ks, report) = bootstrap(base, &entries, &documents, schema_src, &mut model, &self.config.retrieval);
        if report.examples == 0 && report.instructions == 0 && empty_before {
            return Err(PipelineError::NoInputs(format!(
                "{} log statements and {} documents yielded nothing",
                entries.len(),
                documents.len()
            )));
        }
        if ks.version != before {
            self.publish(ks)?;
        }
        Ok(report)
    }

    /// Reformulate, retrieve, plan, generate and self-correct, in that order.
    pub fn run_query(&self, nl: &str) -> QueryResponse {
        let ks = self.knowledge();
        let cfg = &self.config;
        let mut model = ModelClient::new(self.model.as_ref());
        let mut clock = Stopwatch::new(Duration::from_secs(cfg.service.request_timeout_secs));
        let request_id = format!("req-{}", uuid::Uuid::new_v4().simple());
        let mut fallbacks = Fallbacks::default();

        let (cq, fb) = reformulate(nl, &ks, &mut model, &cfg.retrieval);
        fallbacks.reformulate = fb;
        clock.mark("reformulate");

        let examples = retrieve_examples(&cq, &ks, cfg.retrieval.k_examples, &LexicalScorer);
        let chosen: Vec<_> = examples.iter().filter_map(|s| ks.examples.get(&s.id)).collect();
        clock.mark("retrieve_examples");
        let instructions = retrieve_instructions(
            &cq,
            &chosen,
            &ks,
            cfg.retrieval.k_instructions,
            cfg.retrieval.lambda,
            &LexicalScorer,
        );
        clock.mark("retrieve_instructions");
        let (pruned_schema, fb) = prune_schema(&cq, &chosen, &ks.schema, &mut model, &cfg.retrieval);
        fallbacks.prune = fb;
        clock.mark("prune_schema");
        let rr = crate::retrieval::RetrievalResult {
            examples,
            instructions,
            pruned_schema,
        };

        let mut response = QueryResponse {
            request_id,
            status: QueryStatus::Timeout,
            nl: nl.to_string(),
            canonical: cq.clone(),
            sql: None,
            plan: CoTPlan::fallback(),
            retrieval: RetrievalSummary {
                examples: rr.examples.clone(),
                instructions: rr.instructions.clone(),
                tables: rr.pruned_schema.tables.iter().map(|t| t.name.clone()).collect(),
            },
            correction: CorrectionSummary {
                status: None,
                rounds_used: 0,
                history: Vec::new(),
            },
            preview: None,
            timings: Timings::default(),
            model_calls: 0,
            knowledge_version: ks.version,
            error: None,
        };
        let finish = |mut response: QueryResponse, clock: Stopwatch, fallbacks, model: &ModelClient| {
            response.timings = Timings {
                total_ms: clock.start.elapsed().as_millis() as u64,
                stages: clock.stages,
                fallbacks,
            };
            response.model_calls = model.call_count();
            response
        };
        if clock.expired() {
            return self.finish_and_store(finish(response, clock, fallbacks, &model), &rr);
        }

        let (plan, fb) = build_plan(&cq, &rr, &ks, &mut model);
        fallbacks.plan = fb;
        let plan = augment_with_pseudo_sql(&plan, &chosen);
        response.plan = plan.clone();
        clock.mark("plan");
        if clock.expired() {
            return self.finish_and_store(finish(response, clock, fallbacks, &model), &rr);
        }

        let bundle = assemble_prompt(&cq, &rr, &ks, &plan);
        // a re-ask must leave room for the assessment call
        let reask = model.call_count() + 3 <= PASS_CALL_BUDGET;
        let candidate = match generate_sql(&bundle, &plan, &mut model, reask) {
            Ok(c) => c,
            Err(e) => {
                clock.mark("generate");
                response.status = match e {
                    GenerationError::UnparsableGeneration { .. } => QueryStatus::Unparsable,
                    GenerationError::Model(_) => QueryStatus::ModelError,
                };
                response.error = Some(e.to_string());
                return self.finish_and_store(finish(response, clock, fallbacks, &model), &rr);
            }
        };
        response.sql = Some(candidate.sql.clone());
        clock.mark("generate");
        if clock.expired() {
            return self.finish_and_store(finish(response, clock, fallbacks, &model), &rr);
        }

        let outcome = run_correction_loop(candidate, &cq, &bundle, &self.db, &mut model, &cfg.correction);
        for (i, ms) in outcome.attempt_ms.iter().enumerate() {
            clock.stages.push(StageTiming {
                stage: format!("attempt_{}", i + 1),
                ms: *ms,
            });
        }
        clock.lap = Instant::now();
        response.status = if clock.expired() && outcome.status != CorrectionStatus::Clean {
            QueryStatus::Timeout
        } else {
            outcome.status.into()
        };
        response.sql = Some(outcome.final_candidate.sql.clone());
        response.preview = outcome.preview.clone();
        response.correction = CorrectionSummary {
            status: Some(outcome.status),
            rounds_used: outcome.rounds_used,
            history: outcome.history.clone(),
        };
        self.finish_and_store(finish(response, clock, fallbacks, &model), &rr)
    }

    /// Persist the request context and journal execution errors. Storage
    /// failures are logged; the response is still returned.
    fn finish_and_store(&self, response: QueryResponse, rr: &crate::retrieval::RetrievalResult) -> QueryResponse {
        let dir = &self.config.knowledge_dir;
        let record = RequestRecord {
            request_id: response.request_id.clone(),
            nl: response.nl.clone(),
            canonical: response.canonical.clone(),
            example_ids: rr.examples.iter().map(|s| s.id.clone()).collect(),
            instruction_ids: rr.instructions.iter().map(|s| s.id.clone()).collect(),
            sql: response.sql.clone().unwrap_or_default(),
            status: response.correction.status.unwrap_or(CorrectionStatus::Exhausted),
            knowledge_version: response.knowledge_version,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            feedback: Vec::new(),
        };
        if let Err(e) = RequestStore::new(dir).save(&record) {
            log::error!("could not store request {}: {e}", record.request_id);
        }
        let history = &response.correction.history;
        for fb in history.iter().flat_map(|a| &a.feedback) {
            if matches!(fb.kind, FeedbackKind::SyntaxError | FeedbackKind::RuntimeError) {
                if let Err(e) = record_execution_error(dir, &record.request_id, record.knowledge_version, fb) {
                    log::error!("could not journal execution error: {e}");
                }
            }
        }
        // a self-corrected query is a system rejection with a correction,
        // available to guideline derivation
        if response.status == QueryStatus::Corrected {
            let entry = RejectionEntry {
                request_id: record.request_id.clone(),
                version: record.knowledge_version,
                source: FeedbackSource::System,
                original_sql: history[0].sql.clone(),
                corrected_sql: Some(record.sql.clone()),
                note: None,
                timestamp: record.timestamp.clone(),
            };
            if let Err(e) = log_rejection(dir, &entry) {
                log::error!("could not log correction: {e}");
            }
        }
        response
    }

    /// Apply a verdict and publish the resulting knowledge set.
    pub fn submit_feedback(&self, fb: &Feedback) -> Result<IngestOutcome, PipelineError> {
        let _guard = self.writer.lock();
        let mut ks = (*self.knowledge()).clone();
        let before = ks.version;
        let mut model = ModelClient::new(self.model.as_ref());
        let outcome = ingest_feedback(fb, &self.config.knowledge_dir, &mut ks, &mut model, self.config.adaptation.n_rej)?;
        if ks.version != before {
            self.publish(ks)?;
        }
        Ok(outcome)
    }
}

fn list_files(dir: Option<&Path>, extensions: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let Some(dir) = dir else {
        return Ok(Vec::new());
    };
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| extensions.contains(&x))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Role, ScriptedModel};
    use crate::sample_data::sports_database;

    const CONFIG: &str = r#"
knowledge_dir = "kb"
database = "sports.db"

[retrieval]
k_examples = 2
lambda = 0.7

[correction]
max_rounds = 1
semantic_fit = false

[service]
request_timeout_secs = 30

[model]
provider = "scripted"
script = "responses.json"
"#;

    #[test]
    fn config_parses_and_resolves_paths() {
        let c = PipelineConfig::from_toml(CONFIG, Path::new("/srv/app")).unwrap();
        assert_eq!(c.knowledge_dir, PathBuf::from("/srv/app/kb"));
        assert_eq!(c.database, Some(PathBuf::from("/srv/app/sports.db")));
        assert_eq!(c.model.script, Some(PathBuf::from("/srv/app/responses.json")));
        assert_eq!(c.retrieval.k_examples, 2);
        assert_eq!(c.retrieval.k_instructions, 10);
        assert_eq!(c.correction.max_rounds, 1);
        assert!(!c.correction.semantic_fit);
        assert_eq!(c.service.request_timeout_secs, 30);
        assert_eq!(c.adaptation.n_rej, 3);
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = Path::new("/");
        assert!(PipelineConfig::from_toml("[retrieval]\nlambda = 1.5", base).is_err());
        assert!(PipelineConfig::from_toml("[retrieval]\nk_examples = 0", base).is_err());
        assert!(PipelineConfig::from_toml("unknown_key = 1", base).is_err());
        assert!(PipelineConfig::from_toml("[correction]\ntimeout_secs = 0", base).is_err());
        assert!(PipelineConfig::from_toml("", base).is_ok());
    }

    #[test]
    fn budget_formula() {
        assert_eq!(call_budget(2), 10);
        assert_eq!(call_budget(0), 6);
    }

    fn engine(model: ScriptedModel) -> (Engine, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            knowledge_dir: dir.path().join("kb"),
            ..Default::default()
        };
        let engine = Engine::with_parts(config, Arc::new(model), sports_database().unwrap()).unwrap();
        (engine, dir)
    }

    #[test]
    fn degraded_run_still_answers() {
        let model = ScriptedModel::new().with(Role::Generate, ["SELECT COUNT(*) AS N FROM SPORTS_FINANCIALS"]);
        let (engine, _dir) = engine(model);
        let r = engine.run_query("How many financial rows are there?");
        assert_eq!(r.status, QueryStatus::Clean);
        assert!(r.timings.fallbacks.reformulate);
        assert!(r.timings.fallbacks.plan);
        assert_eq!(r.canonical.reformulated, "How many financial rows are there?");
        assert_eq!(r.preview.as_ref().unwrap().rows[0][0], crate::db::Value::Integer(1200));
        assert!(r.model_calls <= call_budget(2));
        assert_eq!(engine.request(&r.request_id).unwrap().sql, r.sql.unwrap());
    }

    #[test]
    fn generation_failure_is_reported_in_band() {
        let model = ScriptedModel::new().with(Role::Generate, ["I cannot help with that."]);
        let (engine, _dir) = engine(model);
        let r = engine.run_query("anything");
        assert_eq!(r.status, QueryStatus::Unparsable);
        assert!(r.sql.is_none());
        assert!(r.error.is_some());
        assert!(r.model_calls <= PASS_CALL_BUDGET);
    }

    #[test]
    fn execution_errors_are_journaled() {
        let model = ScriptedModel::new()
            .with(Role::Generate, ["SELECT * FROM missing_table"])
            .with(Role::Correct, ["SELECT COUNT(*) AS N FROM SPORTS_VIEWERSHIP"]);
        let (engine, dir) = engine(model);
        let r = engine.run_query("count viewership rows");
        assert_eq!(r.status, QueryStatus::Corrected);
        let journal = crate::adaptation::read_error_journal(&dir.path().join("kb")).unwrap();
        assert_eq!(journal.len(), 1);
        assert_eq!(journal[0].message, "no such table: missing_table");
        assert_eq!(journal[0].request_id, r.request_id);
        let rej = crate::adaptation::read_rejections(&dir.path().join("kb")).unwrap();
        assert_eq!(rej[0].source, FeedbackSource::System);
        assert_eq!(
            r.timings.stage_names(),
            [
                "reformulate",
                "retrieve_examples",
                "retrieve_instructions",
                "prune_schema",
                "plan",
                "generate",
                "attempt_1",
                "attempt_2"
            ]
        );
    }

    #[test]
    fn feedback_publishes_new_versions() {
        let model = ScriptedModel::new().with(Role::Generate, ["SELECT COUNT(*) AS N FROM SPORTS_FINANCIALS"]);
        let (engine, dir) = engine(model);
        let a = engine.run_query("count financial rows");
        let b = engine.run_query("count all financial rows please");
        let v0 = engine.summary().version;
        assert_eq!(engine.submit_feedback(&Feedback::accept(&a.request_id)).unwrap().version, v0 + 1);
        // same SQL under the same intent is not promoted twice
        let second = engine.submit_feedback(&Feedback::accept(&b.request_id)).unwrap();
        assert_eq!(second.version, v0 + 1);
        assert!(matches!(
            engine.submit_feedback(&Feedback::accept("req-unknown")),
            Err(PipelineError::Adaptation(AdaptationError::UnknownRequest(_)))
        ));
        let reloaded = KnowledgeSet::load(dir.path().join("kb")).unwrap();
        assert_eq!(reloaded.version, v0 + 1);
    }

    #[test]
    fn preprocess_requires_inputs_on_an_empty_set() {
        let (engine, dir) = engine(ScriptedModel::new());
        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(matches!(
            engine.run_preprocess(Some(&empty), Some(&empty), None),
            Err(PipelineError::NoInputs(_))
        ));
    }
}
