//! Query reformulation, intent classification and staged retrieval of
//! examples, instructions and schema elements.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::example::DecomposedExample;
use crate::knowledge::KnowledgeSet;
use crate::model::{ModelClient, Role};
use crate::schema::{render_schema, SchemaRepresentation};

pub const DEFAULT_INTENT: &str = "general";

/// Retrieval knobs. `prune_batch_tables == 0` prunes with a single call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_examples: usize,
    pub k_instructions: usize,
    pub lambda: f64,
    pub tau_intent: f64,
    pub prune_batch_tables: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_examples: 3,
            k_instructions: 10,
            lambda: 0.5,
            tau_intent: 0.35,
            prune_batch_tables: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_examples == 0 || self.k_instructions == 0 {
            return Err("k_examples and k_instructions must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.tau_intent) {
            return Err(format!("tau_intent {} outside [0, 1]", self.tau_intent));
        }
        Ok(())
    }
}

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "an", "and", "any", "are", "as", "at", "be", "by", "can", "do", "does",
    "each", "for", "from", "give", "has", "have", "how", "i", "in", "into", "is", "it", "its",
    "list", "me", "of", "on", "or", "our", "please", "show", "that", "the", "their", "them",
    "these", "this", "those", "to", "was", "we", "were", "what", "when", "where", "which", "who",
    "with", "you",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercase alphanumeric runs; internal hyphens are kept
/// (`quarter-over-quarter`), everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if c == '-'
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            cur.push('-');
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokens for scoring: stopwords dropped unless nothing else remains.
pub fn content_tokens(text: &str) -> Vec<String> {
    let all = tokenize(text);
    let content: Vec<String> = all.iter().filter(|t| !is_stopword(t)).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

/// Text similarity in [0, 1]; must be symmetric.
pub trait Scorer: Send + Sync {
    fn score(&self, a: &str, b: &str) -> f64;
}

/// Cosine over term-frequency vectors of [`content_tokens`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl Scorer for LexicalScorer {
    fn score(&self, a: &str, b: &str) -> f64 {
        similarity(a, b)
    }
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let tf = |text: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for t in content_tokens(text) {
            *m.entry(t).or_default() += 1.0;
        }
        m
    };
    let (ta, tb) = (tf(a), tf(b));
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ta.iter().filter_map(|(k, x)| tb.get(k).map(|y| x * y)).sum();
    let norm = |m: &BTreeMap<String, f64>| m.values().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (norm(&ta) * norm(&tb))).clamp(0.0, 1.0)
}

/// Cosine over vectors from an embedding function, clamped to [0, 1].
pub struct EmbeddingScorer<F> {
    embed: F,
}

impl<F: Fn(&str) -> Vec<f64> + Send + Sync> EmbeddingScorer<F> {
    pub fn new(embed: F) -> Self {
        EmbeddingScorer { embed }
    }
}

impl<F: Fn(&str) -> Vec<f64> + Send + Sync> Scorer for EmbeddingScorer<F> {
    fn score(&self, a: &str, b: &str) -> f64 {
        let (va, vb) = ((self.embed)(a), (self.embed)(b));
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalQuery {
    pub original: String,
    pub reformulated: String,
    pub intent: String,
    pub key_terms: Vec<String>,
}

/// Lowercased content tokens, deduplicated, first occurrence order.
pub fn key_terms(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t) && seen.insert(t.clone()))
        .collect()
}

/// Reduce a model-proposed label to `snake_case`.
pub fn sanitize_label(raw: &str) -> Option<String> {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line
        .strip_prefix("INTENT:")
        .or_else(|| line.strip_prefix("intent:"))
        .unwrap_or(line);
    let mut label = String::new();
    for c in line.trim().chars() {
        if c.is_ascii_alphanumeric() {
            label.push(c.to_ascii_lowercase());
        } else if !label.ends_with('_') {
            label.push('_');
        }
    }
    let label: String = label.trim_matches('_').chars().take(48).collect();
    let label = label.trim_end_matches('_').to_string();
    (!label.is_empty()).then_some(label)
}

fn reformulate_prompt(nl: &str) -> String {
    format!(
        "### Task\nRewrite the request as one imperative sentence that names every metric, \
         filter and time frame explicitly. Keep the user's terms. Optionally add a last line \
         `INTENT: <snake_case label>` naming the kind of question.\n\n### Input Query\n{nl}\n"
    )
}

/// Canonicalize `nl` and classify its intent. On model failure the original
/// text is kept; the flag reports that fallback.
pub fn reformulate(
    nl: &str,
    ks: &KnowledgeSet,
    model: &mut ModelClient,
    config: &RetrievalConfig,
) -> (CanonicalQuery, bool) {
    let original = nl.trim().to_string();
    let (reformulated, hint, fallback) = match model.complete(&reformulate_prompt(&original), Role::Reformulate) {
        Ok(text) => {
            let mut hint = None;
            let mut body = Vec::new();
            for line in text.lines() {
                let t = line.trim();
                if t.starts_with("INTENT:") {
                    hint = sanitize_label(t);
                } else if !t.is_empty() {
                    body.push(t);
                }
            }
            let joined = body.join(" ");
            if joined.is_empty() {
                (original.clone(), hint, true)
            } else {
                (joined, hint, false)
            }
        }
        Err(e) => {
            log::warn!("reformulation failed, keeping the original text: {e}");
            (original.clone(), None, true)
        }
    };
    let intent = classify_with_hint(&original, &reformulated, ks, model, config, hint.as_deref());
    let key_terms = key_terms(&reformulated);
    (
        CanonicalQuery {
            original,
            reformulated,
            intent,
            key_terms,
        },
        fallback,
    )
}

fn same_question(a: &str, b: &str) -> bool {
    let squash = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    squash(a) == squash(b)
}

/// Partition label for `nl`: verbatim match of a stored question, else the
/// most similar partition at or above `tau_intent`, else a model-proposed
/// label, else [`DEFAULT_INTENT`].
pub fn classify_intent(nl: &str, ks: &KnowledgeSet, model: &mut ModelClient, config: &RetrievalConfig) -> String {
    classify_with_hint(nl, nl, ks, model, config, None)
}

fn classify_with_hint(
    original: &str,
    canonical: &str,
    ks: &KnowledgeSet,
    model: &mut ModelClient,
    config: &RetrievalConfig,
    hint: Option<&str>,
) -> String {
    if let Some(label) = lexical_intent(original, canonical, ks, config.tau_intent) {
        return label;
    }
    if let Some(h) = hint {
        return h.to_string();
    }
    let labels: Vec<&str> = ks.partitions.keys().map(String::as_str).collect();
    let prompt = format!(
        "### Task\nName the intent of the request as a short snake_case label. Reuse a known \
         label when one fits.\n\n### Known Intents\n{}\n\n### Input Query\n{canonical}\n",
        if labels.is_empty() { "(none)".to_string() } else { labels.join("\n") }
    );
    match model.complete(&prompt, Role::Intent) {
        Ok(text) => sanitize_label(&text).unwrap_or_else(|| DEFAULT_INTENT.to_string()),
        Err(e) => {
            log::warn!("intent model call failed: {e}");
            DEFAULT_INTENT.to_string()
        }
    }
}

/// Model-free part of classification.
pub fn lexical_intent(original: &str, canonical: &str, ks: &KnowledgeSet, tau: f64) -> Option<String> {
    for (label, ids) in &ks.partitions {
        if ids
            .iter()
            .any(|id| same_question(&ks.examples[id].input_nl, original))
        {
            return Some(label.clone());
        }
    }
    let mut best: Option<(&str, f64)> = None;
    for (label, ids) in &ks.partitions {
        let centroid: Vec<&str> = ids.iter().map(|id| ks.examples[id].input_nl.as_str()).collect();
        let s = similarity(canonical, &centroid.join(" "));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.filter(|(_, s)| *s >= tau).map(|(l, _)| l.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

fn rank(mut items: Vec<Scored>, k: usize) -> Vec<Scored> {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    items.truncate(k);
    items
}

/// Examples from the intent's partition (all examples when it is empty),
/// best first. A stored question equal to the user's text scores 1.
pub fn retrieve_examples(cq: &CanonicalQuery, ks: &KnowledgeSet, k: usize, scorer: &dyn Scorer) -> Vec<Scored> {
    let candidates: Vec<&String> = match ks.partitions.get(&cq.intent) {
        Some(ids) if !ids.is_empty() => ids.iter().collect(),
        _ => ks.examples.keys().collect(),
    };
    let scored = candidates
        .into_iter()
        .map(|id| {
            let ex = &ks.examples[id];
            let score = if same_question(&ex.input_nl, &cq.original) {
                1.0
            } else {
                scorer.score(&cq.reformulated, &ex.input_nl)
            };
            Scored {
                id: id.clone(),
                score,
            }
        })
        .collect();
    rank(scored, k)
}

/// Instructions for the intent (or intent-free ones), scored by
/// `lambda * sim(query) + (1 - lambda) * max sim(example context)`.
pub fn retrieve_instructions(
    cq: &CanonicalQuery,
    chosen: &[&DecomposedExample],
    ks: &KnowledgeSet,
    k: usize,
    lambda: f64,
    scorer: &dyn Scorer,
) -> Vec<Scored> {
    let matching: Vec<_> = ks
        .instructions
        .iter()
        .filter(|i| i.intents.is_empty() || i.intents.iter().any(|x| *x == cq.intent))
        .collect();
    let candidates = if matching.is_empty() {
        ks.instructions.iter().collect()
    } else {
        matching
    };
    let contexts: Vec<String> = chosen.iter().map(|e| e.retrieval_text()).collect();
    let scored = candidates
        .into_iter()
        .map(|instr| {
            let q = scorer.score(&cq.reformulated, &instr.text);
            let e = contexts
                .iter()
                .map(|c| scorer.score(c, &instr.text))
                .fold(0.0, f64::max);
            Scored {
                id: instr.id.clone(),
                score: (lambda * q + (1.0 - lambda) * e).clamp(0.0, 1.0),
            }
        })
        .collect();
    rank(scored, k)
}

fn prune_prompt(cq: &CanonicalQuery, protected: &BTreeSet<String>, part: &str) -> String {
    let used = if protected.is_empty() {
        "(none)".to_string()
    } else {
        protected.iter().cloned().collect::<Vec<_>>().join(", ")
    };
    format!(
        "### Task\nList the schema elements that are irrelevant to the request, one per line, as \
         `IRRELEVANT: TABLE` or `IRRELEVANT: TABLE.COLUMN`. Reply `NONE` when everything may \
         be needed.\n\n### Input Query\n{}\n\n### Tables Used By Similar Queries\n{used}\n\n\
         ### Schema Representation\n{part}",
        cq.reformulated
    )
}

/// Drop schema elements the model marks irrelevant. Tables used by the
/// chosen examples are never dropped. Any model failure returns the schema
/// unchanged with the fallback flag set.
pub fn prune_schema(
    cq: &CanonicalQuery,
    chosen: &[&DecomposedExample],
    schema: &SchemaRepresentation,
    model: &mut ModelClient,
    config: &RetrievalConfig,
) -> (SchemaRepresentation, bool) {
    if schema.tables.is_empty() {
        return (schema.clone(), false);
    }
    let protected: BTreeSet<String> = chosen
        .iter()
        .flat_map(|e| e.features.tables.iter().map(|t| t.to_ascii_uppercase()))
        .collect();
    let batch = if config.prune_batch_tables == 0 {
        schema.tables.len()
    } else {
        config.prune_batch_tables
    };
    let mut irrelevant: BTreeSet<String> = BTreeSet::new();
    for chunk in schema.tables.chunks(batch) {
        let part = SchemaRepresentation {
            tables: chunk.to_vec(),
            foreign_keys: Vec::new(),
        };
        let rendered = render_schema(&part, None).unwrap_or_default();
        match model.complete(&prune_prompt(cq, &protected, &rendered), Role::Prune) {
            Ok(text) => {
                for line in text.lines() {
                    if let Some(id) = line.trim().strip_prefix("IRRELEVANT:") {
                        irrelevant.insert(id.trim().to_ascii_uppercase());
                    }
                }
            }
            Err(e) => {
                log::warn!("schema pruning failed, keeping the full schema: {e}");
                return (schema.clone(), true);
            }
        }
    }
    let mut keep = BTreeSet::new();
    for t in &schema.tables {
        let tname = t.name.to_ascii_uppercase();
        if protected.contains(&tname) {
            keep.insert(t.name.clone());
            continue;
        }
        if irrelevant.contains(&tname) {
            continue;
        }
        let dropped: Vec<bool> = t
            .columns
            .iter()
            .map(|c| irrelevant.contains(&format!("{tname}.{}", c.name.to_ascii_uppercase())))
            .collect();
        if !dropped.contains(&true) {
            keep.insert(t.name.clone());
        } else {
            for (c, gone) in t.columns.iter().zip(dropped) {
                if !gone {
                    keep.insert(format!("{}.{}", t.name, c.name));
                }
            }
        }
    }
    match schema.filtered(&keep) {
        Ok(pruned) if !pruned.tables.is_empty() => (pruned, false),
        Ok(_) => (schema.clone(), false),
        Err(e) => {
            log::warn!("schema pruning produced an invalid selection: {e}");
            (schema.clone(), true)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub examples: Vec<Scored>,
    pub instructions: Vec<Scored>,
    pub pruned_schema: SchemaRepresentation,
}
