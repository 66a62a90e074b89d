//! Annotated examples in the hierarchical JSON form stored by the knowledge set.

use std::collections::BTreeSet;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::decomposer::{decompose, referenced_tables, relations_per_binding, ClauseBundle, QuerySketch};
use crate::model::{ModelClient, ModelError, Role};
use crate::sql::{normalize, SqlError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExampleError {
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("invalid example: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub tables: Vec<String>,
    #[serde(rename = "CTEs")]
    pub cte_count: usize,
    #[serde(rename = "CTE_desc")]
    pub cte_desc: Vec<String>,
}

/// A decomposed, annotated query.
///
/// JSON keys: `input_nl`, `complex_terms`, `features`, `cte_1_columns` ..
/// `cte_N_columns`, `final_columns`, `full_sql_query`, in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposedExample {
    pub input_nl: String,
    pub complex_terms: Vec<String>,
    pub features: Features,
    pub cte_bundles: Vec<ClauseBundle>,
    pub final_bundle: ClauseBundle,
    pub full_sql_query: String,
}

impl DecomposedExample {
    /// Build from a sketch; tables are taken from the sketch's SQL.
    pub fn from_sketch(
        sketch: &QuerySketch,
        input_nl: impl Into<String>,
        complex_terms: Vec<String>,
        cte_desc: Vec<String>,
    ) -> Result<Self, ExampleError> {
        let ex = DecomposedExample {
            input_nl: input_nl.into(),
            complex_terms,
            features: Features {
                tables: referenced_tables(&sketch.source_sql)?,
                cte_count: sketch.ctes.len(),
                cte_desc,
            },
            cte_bundles: sketch.ctes.iter().map(|c| c.bundle.clone()).collect(),
            final_bundle: sketch.final_bundle.clone(),
            full_sql_query: sketch.source_sql.clone(),
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), ExampleError> {
        let invalid = |m: String| Err(ExampleError::Invalid(m));
        if self.input_nl.trim().is_empty() {
            return invalid("input_nl is empty".into());
        }
        let n = self.features.cte_count;
        if n != self.cte_bundles.len() || n != self.features.cte_desc.len() {
            return invalid(format!(
                "CTEs = {n} but {} bundles and {} descriptions",
                self.cte_bundles.len(),
                self.features.cte_desc.len()
            ));
        }
        let full = normalize(&self.full_sql_query)?;
        let referenced: BTreeSet<String> = referenced_tables(&full)?.into_iter().collect();
        for t in &self.features.tables {
            if !referenced.contains(&t.to_ascii_uppercase()) {
                return invalid(format!("table {t} is not referenced by full_sql_query"));
            }
        }
        for bundle in self.cte_bundles.iter().chain([&self.final_bundle]) {
            for clause in bundle.clauses() {
                if clause.is_empty() {
                    return invalid("empty clause string".into());
                }
                if !full.contains(clause) {
                    return invalid(format!("clause {clause:?} not found in full_sql_query"));
                }
            }
        }
        Ok(())
    }

    /// Re-derive the sketch (with CTE names) from `full_sql_query`.
    pub fn sketch(&self) -> Result<QuerySketch, SqlError> {
        decompose(&self.full_sql_query)
    }

    /// Text used to match this example against requests.
    pub fn retrieval_text(&self) -> String {
        let mut s = self.input_nl.clone();
        for t in &self.complex_terms {
            s.push(' ');
            s.push_str(t);
        }
        s
    }

    /// Every bundle, CTEs first then final.
    pub fn bundles(&self) -> impl Iterator<Item = &ClauseBundle> {
        self.cte_bundles.iter().chain([&self.final_bundle])
    }
}

impl Serialize for DecomposedExample {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(5 + self.cte_bundles.len()))?;
        map.serialize_entry("input_nl", &self.input_nl)?;
        map.serialize_entry("complex_terms", &self.complex_terms)?;
        map.serialize_entry("features", &self.features)?;
        for (i, b) in self.cte_bundles.iter().enumerate() {
            map.serialize_entry(&format!("cte_{}_columns", i + 1), b)?;
        }
        map.serialize_entry("final_columns", &self.final_bundle)?;
        map.serialize_entry("full_sql_query", &self.full_sql_query)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for DecomposedExample {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut map = Map::<String, Json>::deserialize(d)?;
        fn take<T: serde::de::DeserializeOwned, E: serde::de::Error>(
            map: &mut Map<String, Json>,
            key: &str,
        ) -> Result<T, E> {
            let v = map.remove(key).ok_or_else(|| E::custom(format!("missing field `{key}`")))?;
            serde_json::from_value(v).map_err(|e| E::custom(format!("{key}: {e}")))
        }
        let input_nl: String = take::<_, D::Error>(&mut map, "input_nl")?;
        let complex_terms: Vec<String> = take::<_, D::Error>(&mut map, "complex_terms")?;
        let features: Features = take::<_, D::Error>(&mut map, "features")?;
        let mut cte_bundles = Vec::with_capacity(features.cte_count);
        for i in 1..=features.cte_count {
            cte_bundles.push(take::<_, D::Error>(&mut map, &format!("cte_{i}_columns"))?);
        }
        let final_bundle = take::<_, D::Error>(&mut map, "final_columns")?;
        let full_sql_query = take::<_, D::Error>(&mut map, "full_sql_query")?;
        if let Some(extra) = map.keys().next() {
            return Err(D::Error::custom(format!("unexpected key {extra:?}")));
        }
        Ok(DecomposedExample {
            input_nl,
            complex_terms,
            features,
            cte_bundles,
            final_bundle,
            full_sql_query,
        })
    }
}

fn annotate_prompt(sketch: &QuerySketch) -> String {
    let mut p = String::from(
        "### Task\nDescribe the decomposed SQL query below. Answer with lines of the form:\n\
         INPUT_NL: <question the query answers>\n\
         COMPLEX_TERM: <term>: <definition>; SQL: <expression>\n\
         CTE <name>: <one sentence on what the binding computes>\n\n### SQL\n",
    );
    p.push_str(&sketch.source_sql);
    p.push_str("\n\n### Decomposition\n");
    for c in &sketch.ctes {
        p.push_str(&format!(
            "{}: {}\n",
            c.name,
            serde_json::to_string(&c.bundle).unwrap_or_default()
        ));
    }
    p.push_str(&format!(
        "final: {}\n",
        serde_json::to_string(&sketch.final_bundle).unwrap_or_default()
    ));
    p
}

#[derive(Default)]
struct Annotation {
    input_nl: Option<String>,
    complex_terms: Vec<String>,
    cte_desc: Vec<(String, String)>,
}

fn parse_annotation(text: &str) -> Annotation {
    let mut a = Annotation::default();
    for line in text.lines().map(str::trim) {
        if let Some(nl) = line.strip_prefix("INPUT_NL:") {
            let nl = nl.trim();
            if !nl.is_empty() {
                a.input_nl = Some(nl.to_string());
            }
        } else if let Some(term) = line.strip_prefix("COMPLEX_TERM:") {
            let term = term.trim();
            if !term.is_empty() && !a.complex_terms.iter().any(|t| t == term) {
                a.complex_terms.push(term.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("CTE ") {
            if let Some((name, desc)) = rest.split_once(':') {
                let desc = desc.trim();
                if !desc.is_empty() {
                    a.cte_desc.push((name.trim().to_ascii_uppercase(), desc.to_string()));
                }
            }
        }
    }
    a
}

/// Deterministic description used when the model gives none.
pub fn template_description(name: &str, bundle: &ClauseBundle, tables: &[String]) -> String {
    let cols: Vec<&str> = bundle
        .selects_calcs
        .iter()
        .map(String::as_str)
        .filter(|c| *c != "DISTINCT")
        .collect();
    format!("CTE {name}: selects {} from {}", cols.join(", "), tables.join(", "))
}

/// Attach natural-language descriptions to a sketch. `nl_hint`, when given,
/// is used verbatim as `input_nl`. Missing model output falls back to
/// template descriptions; a model failure is only an error when there is no
/// hint to fall back on.
pub fn annotate(
    sketch: &QuerySketch,
    nl_hint: Option<&str>,
    model: &mut ModelClient,
) -> Result<DecomposedExample, ExampleError> {
    let hint = nl_hint.map(str::trim).filter(|h| !h.is_empty());
    let annotation = match model.complete(&annotate_prompt(sketch), Role::Annotate) {
        Ok(text) => parse_annotation(&text),
        Err(e) if hint.is_some() => {
            log::warn!("annotation model call failed, using templates: {e}");
            Annotation::default()
        }
        Err(e) => return Err(e.into()),
    };
    let (per_cte, final_tables) = relations_per_binding(&sketch.source_sql)?;
    let cte_desc = sketch
        .ctes
        .iter()
        .map(|c| {
            annotation
                .cte_desc
                .iter()
                .find(|(n, _)| *n == c.name.to_ascii_uppercase())
                .map(|(_, d)| d.clone())
                .unwrap_or_else(|| {
                    let tables = per_cte
                        .iter()
                        .find(|(n, _)| *n == c.name)
                        .map(|(_, t)| t.clone())
                        .unwrap_or_default();
                    template_description(&c.name, &c.bundle, &tables)
                })
        })
        .collect();
    let input_nl = match (hint, annotation.input_nl) {
        (Some(h), _) => h.to_string(),
        (None, Some(nl)) => nl,
        (None, None) => {
            let cols: Vec<&str> = sketch
                .final_bundle
                .selects_calcs
                .iter()
                .map(String::as_str)
                .filter(|c| *c != "DISTINCT")
                .collect();
            format!("Show {} from {}", cols.join(", "), final_tables.join(", "))
        }
    };
    DecomposedExample::from_sketch(sketch, input_nl, annotation.complex_terms, cte_desc)
}
